//! Run manifests, stable JSON output and dataset loading for the CLI.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use disguise_core::audit::Sample;
use disguise_core::diffcore::Tensor;
use disguise_core::{png, Error};

use crate::commands::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// JSON with lexicographically sorted keys and a trailing newline
/// (serde_json's default map is a BTreeMap, so a Value round trip sorts).
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let v = serde_json::to_value(value).map_err(Error::from)?;
    let mut s = serde_json::to_string_pretty(&v).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(Error::from)?;
        }
    }
    fs::write(path, to_sorted_json(value)?).map_err(Error::from)?;
    Ok(())
}

#[derive(Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

/// Execution record written next to every command's outputs. Contains the
/// wall time, so it is metadata rather than a reproducible primary output.
#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    config: serde_json::Value,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    seed: Option<u64>,
    tool_version: String,
    wall_time_ms: u64,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: 0,
            started: Instant::now(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(Error::from)?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn record_input_dir(&mut self, dir: &Path, ext: &str) -> Result<(), CliError> {
        for path in sorted_files(dir, ext)? {
            self.record_input(&path)?;
        }
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Verifies every declared output exists, then writes the manifest.
    pub fn finalize(mut self, manifest_path: &Path) -> Result<(), CliError> {
        for out in &self.outputs {
            if !Path::new(out).exists() {
                return Err(CliError::Core(Error::Contract(format!(
                    "declared output {out} was not written"
                ))));
            }
        }
        self.wall_time_ms = self.started.elapsed().as_millis() as u64;
        write_json(manifest_path, &self)
    }
}

/// Files with the given extension in one directory, sorted by file name.
pub fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == ext).unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a dataset directory of .dtns images as audit samples;
/// ids are the file stems, order is the sorted file order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, CliError> {
    let files = sorted_files(dir, "dtns")?;
    if files.is_empty() {
        return Err(CliError::Usage(format!("dataset {} contains no .dtns files", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
            let image = Tensor::load_dtns(&p).map_err(CliError::Core)?;
            Ok(Sample::new(id, image))
        })
        .collect()
}

/// Loads one image argument, .dtns or .png by extension.
pub fn load_image_arg(path: &Path) -> Result<Tensor, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("input file {} does not exist", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("dtns") => Tensor::load_dtns(path).map_err(CliError::Core),
        Some("png") => png::load_png(path).map_err(CliError::Core),
        other => Err(CliError::Usage(format!(
            "unsupported image extension {:?} for {} (want .dtns or .png)",
            other.unwrap_or(""),
            path.display()
        ))),
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

/// Manifest path convention: `<dir>/manifest.json` for directory outputs,
/// `<file>.manifest.json` for file outputs.
pub fn manifest_for_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn manifest_for_file(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}
