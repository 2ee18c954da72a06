//! Subcommand surface and dispatch.
//!
//! Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical abort.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use disguise_core::audit::{
    calibrate_threshold, encoder_decoder_exam, feature_screen, summarize, ExamReport, MetricsSummary,
};
use disguise_core::codec::{train_autoencoder, Autoencoder, TrainConfig};
use disguise_core::diffcore::Tensor;
use disguise_core::distances::d1;
use disguise_core::fixtures::{make_clean_corpus, make_triples, FixtureSpec};
use disguise_core::forge::{generate_disguise, DisguiseConfig, InitMode, OptimizerKind, Variant};
use disguise_core::{png, Error};

use crate::runfile::{
    load_dataset, load_image_arg, manifest_for_dir, manifest_for_file, require_file, sorted_files,
    write_json, RunManifest,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Numerical { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "disguise",
    version,
    about = "Craft images that encode like one image but look like another, and audit datasets for such disguises"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum VariantArg {
    Standard,
    Flip,
    Evasion,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Standard => Variant::Standard,
            VariantArg::Flip => Variant::FlipRobust,
            VariantArg::Evasion => Variant::Evasive,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic corpus plus target/base pairs
    Fixtures {
        /// Fixture description (JSON); required unless --verify
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Check an existing fixture directory against its index instead
        #[arg(long)]
        verify: bool,
    },
    /// Train the autoencoder on a directory of .dtns images
    TrainAe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f32,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output weights file (.dwgt)
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a disguise for a target/base image pair
    Forge {
        #[arg(long)]
        weights: PathBuf,
        /// The image whose latent the disguise should match
        #[arg(long)]
        target: PathBuf,
        /// The image the disguise should visually resemble
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        alpha: f32,
        #[arg(long, default_value_t = 0.05)]
        eta: f32,
        #[arg(long)]
        gamma1: f32,
        #[arg(long)]
        gamma2: f32,
        #[arg(long, value_enum, default_value_t = VariantArg::Standard)]
        variant: VariantArg,
        /// base | zeros | gaussian:SIGMA
        #[arg(long, default_value = "base")]
        init: String,
        /// gd | adam:LR
        #[arg(long, default_value = "gd")]
        optimizer: String,
        #[arg(long, default_value_t = 5000)]
        max_epochs: usize,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (x_d.dtns, result.json, manifest.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent similarity search of a dataset against a target image
    Screen {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        gamma2: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction-loss examination of a dataset
    Exam {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Explicit reconstruction-loss threshold
        #[arg(long)]
        zeta: Option<f64>,
        /// Calibrate the threshold as the minimum reconstruction loss over
        /// this directory of known disguises
        #[arg(long)]
        calibrate: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also dump every reconstruction as .dtns and .png
        #[arg(long)]
        dump_recon: Option<PathBuf>,
    },
    /// Metrics (mean losses, threshold, FPR/FNR, AUROC) from an exam report
    Eval {
        #[arg(long)]
        report: PathBuf,
        /// JSON object mapping sample id to "disguise" or "clean"
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert between .png and .dtns images
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Fixtures { spec, out, verify } => {
            if verify {
                fixtures_verify(&out)
            } else {
                let spec = spec.ok_or_else(|| CliError::Usage("--spec is required to generate fixtures".into()))?;
                fixtures_generate(&spec, &out)
            }
        }
        Cmd::TrainAe { corpus, epochs, lr, batch, seed, out } => train_ae(&corpus, epochs, lr, batch, seed, &out),
        Cmd::Forge {
            weights,
            target,
            base,
            alpha,
            eta,
            gamma1,
            gamma2,
            variant,
            init,
            optimizer,
            max_epochs,
            log_every,
            seed,
            out,
        } => {
            let cfg = DisguiseConfig {
                alpha,
                eta,
                gamma1,
                gamma2,
                max_epochs,
                variant: variant.into(),
                init: parse_init(&init)?,
                optimizer: parse_optimizer(&optimizer)?,
                log_every,
                seed,
            };
            forge(&weights, &target, &base, cfg, &out)
        }
        Cmd::Screen { weights, target, dataset, gamma2, out } => screen(&weights, &target, &dataset, gamma2, &out),
        Cmd::Exam { weights, dataset, zeta, calibrate, out, dump_recon } => {
            exam(&weights, &dataset, zeta, calibrate.as_deref(), &out, dump_recon.as_deref())
        }
        Cmd::Eval { report, labels, out } => eval(&report, &labels, &out),
        Cmd::Convert { input, out } => convert(&input, &out),
    }
}

fn parse_init(s: &str) -> Result<InitMode, CliError> {
    match s {
        "base" => Ok(InitMode::Base),
        "zeros" => Ok(InitMode::Zeros),
        _ => {
            if let Some(rest) = s.strip_prefix("gaussian:") {
                let sigma: f32 = rest
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad gaussian sigma {rest:?}")))?;
                Ok(InitMode::Gaussian { sigma })
            } else {
                Err(CliError::Usage(format!(
                    "unknown init {s:?} (want base, zeros or gaussian:SIGMA)"
                )))
            }
        }
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, CliError> {
    match s {
        "gd" => Ok(OptimizerKind::Gd),
        _ => {
            if let Some(rest) = s.strip_prefix("adam:") {
                let lr: f32 = rest
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad adam learning rate {rest:?}")))?;
                Ok(OptimizerKind::Adam { lr })
            } else {
                Err(CliError::Usage(format!("unknown optimizer {s:?} (want gd or adam:LR)")))
            }
        }
    }
}

// ── fixtures ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct FixtureIndex {
    spec: FixtureSpec,
    corpus: Vec<String>,
    triples: Vec<TripleEntry>,
}

#[derive(Serialize, Deserialize)]
struct TripleEntry {
    target: String,
    base: String,
}

fn fixtures_generate(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    require_file(spec_path, "fixture spec")?;
    let spec: FixtureSpec = serde_json::from_slice(&fs::read(spec_path).map_err(Error::from)?)
        .map_err(|e| CliError::Core(Error::Format { offset: 0, details: format!("fixture spec: {e}") }))?;
    spec.validate().map_err(CliError::Core)?;

    let mut manifest = RunManifest::new("fixtures", serde_json::to_value(&spec).map_err(Error::from)?, Some(spec.texture_seed));
    manifest.record_input(spec_path)?;

    let corpus = make_clean_corpus(&spec)?;
    let triples = make_triples(&spec, &corpus)?;

    let corpus_dir = out.join("corpus");
    let triple_dir = out.join("triples");
    fs::create_dir_all(&corpus_dir).map_err(Error::from)?;
    fs::create_dir_all(&triple_dir).map_err(Error::from)?;

    let mut index = FixtureIndex { spec, corpus: Vec::new(), triples: Vec::new() };
    for (i, img) in corpus.iter().enumerate() {
        let rel = format!("corpus/corpus_{i:04}.dtns");
        let path = out.join(&rel);
        img.save_dtns(&path).map_err(CliError::Core)?;
        manifest.record_output(&path);
        index.corpus.push(rel);
    }
    for (i, (x_c, x_b)) in triples.iter().enumerate() {
        let rel_t = format!("triples/triple_{i:02}_target.dtns");
        let rel_b = format!("triples/triple_{i:02}_base.dtns");
        x_c.save_dtns(out.join(&rel_t)).map_err(CliError::Core)?;
        x_b.save_dtns(out.join(&rel_b)).map_err(CliError::Core)?;
        manifest.record_output(&out.join(&rel_t));
        manifest.record_output(&out.join(&rel_b));
        index.triples.push(TripleEntry { target: rel_t, base: rel_b });
    }

    let index_path = out.join("index.json");
    write_json(&index_path, &index)?;
    manifest.record_output(&index_path);
    manifest.finalize(&manifest_for_dir(out))?;
    println!(
        "wrote {} corpus images and {} triples to {}",
        index.corpus.len(),
        index.triples.len(),
        out.display()
    );
    Ok(())
}

fn fixtures_verify(out: &Path) -> Result<(), CliError> {
    let index_path = out.join("index.json");
    require_file(&index_path, "fixture index")?;
    let index: FixtureIndex = serde_json::from_slice(&fs::read(&index_path).map_err(Error::from)?)
        .map_err(|e| CliError::Core(Error::Format { offset: 0, details: format!("fixture index: {e}") }))?;
    for rel in index.corpus.iter().chain(index.triples.iter().flat_map(|t| [&t.target, &t.base])) {
        if !out.join(rel).is_file() {
            return Err(CliError::Core(Error::Contract(format!("indexed file {rel} is missing"))));
        }
    }
    let on_disk = sorted_files(&out.join("corpus"), "dtns")?.len();
    if on_disk != index.corpus.len() {
        return Err(CliError::Core(Error::Contract(format!(
            "index lists {} corpus images but directory holds {}",
            index.corpus.len(),
            on_disk
        ))));
    }
    let triples_on_disk = sorted_files(&out.join("triples"), "dtns")?.len();
    if triples_on_disk != 2 * index.triples.len() {
        return Err(CliError::Core(Error::Contract(format!(
            "index lists {} triples but directory holds {} files",
            index.triples.len(),
            triples_on_disk
        ))));
    }
    println!("fixture directory {} verifies against its index", out.display());
    Ok(())
}

// ── train-ae ─────────────────────────────────────────────────────────

fn train_ae(corpus_dir: &Path, epochs: usize, lr: f32, batch: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if epochs == 0 {
        return Err(CliError::Usage("--epochs must be >= 1".into()));
    }
    if batch == 0 {
        return Err(CliError::Usage("--batch must be >= 1".into()));
    }
    if !(lr > 0.0) {
        return Err(CliError::Usage("--lr must be > 0".into()));
    }
    let cfg = TrainConfig { epochs, batch_size: batch, learning_rate: lr, seed };
    let samples = load_dataset(corpus_dir)?;
    let corpus: Vec<Tensor> = samples.into_iter().map(|s| s.image).collect();

    let mut manifest = RunManifest::new("train-ae", serde_json::to_value(&cfg).map_err(Error::from)?, Some(seed));
    manifest.record_input_dir(corpus_dir, "dtns")?;

    let (ae, log) = train_autoencoder(&cfg, &corpus)?;
    for (i, loss) in log.epoch_loss.iter().enumerate() {
        println!("epoch {i}: mean reconstruction loss {loss:.6}");
    }
    ae.save(out).map_err(CliError::Core)?;
    manifest.record_output(out);

    let log_path = out.with_extension("trainlog.json");
    write_json(&log_path, &log)?;
    manifest.record_output(&log_path);
    manifest.finalize(&manifest_for_file(out))?;
    Ok(())
}

// ── forge ────────────────────────────────────────────────────────────

fn forge(weights: &Path, target: &Path, base: &Path, cfg: DisguiseConfig, out: &Path) -> Result<(), CliError> {
    require_file(weights, "weights file")?;
    let ae = Autoencoder::load(weights).map_err(CliError::Core)?;
    let x_c = load_image_arg(target)?;
    let x_b = load_image_arg(base)?;

    let mut manifest = RunManifest::new("forge", serde_json::to_value(&cfg).map_err(Error::from)?, Some(cfg.seed));
    manifest.record_input(weights)?;
    manifest.record_input(target)?;
    manifest.record_input(base)?;

    let result = generate_disguise(&ae, &x_c, &x_b, &cfg)?;
    fs::create_dir_all(out).map_err(Error::from)?;
    let xd_path = out.join("x_d.dtns");
    result.x_d.save_dtns(&xd_path).map_err(CliError::Core)?;
    manifest.record_output(&xd_path);

    let result_path = out.join("result.json");
    write_json(&result_path, &result.manifest_json())?;
    manifest.record_output(&result_path);
    manifest.finalize(&manifest_for_dir(out))?;
    println!(
        "{} after {} epochs: d1 {:.6}, d2 {:.6}",
        if result.converged { "converged" } else { "stopped unconverged" },
        result.epochs_run,
        result.final_d1,
        result.final_d2,
    );
    Ok(())
}

// ── screen / exam / eval ─────────────────────────────────────────────

fn screen(weights: &Path, target: &Path, dataset: &Path, gamma2: f64, out: &Path) -> Result<(), CliError> {
    require_file(weights, "weights file")?;
    let ae = Autoencoder::load(weights).map_err(CliError::Core)?;
    let x_c = load_image_arg(target)?;
    let samples = load_dataset(dataset)?;

    let mut manifest = RunManifest::new("screen", serde_json::json!({ "gamma2": gamma2 }), None);
    manifest.record_input(weights)?;
    manifest.record_input(target)?;
    manifest.record_input_dir(dataset, "dtns")?;

    let report = feature_screen(&ae, &x_c, &samples, gamma2)?;
    let n_suspect = report.suspects().count();
    write_json(out, &report)?;
    manifest.record_output(out);
    manifest.finalize(&manifest_for_file(out))?;
    println!("{} of {} samples flagged as suspects", n_suspect, report.entries.len());
    Ok(())
}

fn exam(
    weights: &Path,
    dataset: &Path,
    zeta: Option<f64>,
    calibrate: Option<&Path>,
    out: &Path,
    dump_recon: Option<&Path>,
) -> Result<(), CliError> {
    require_file(weights, "weights file")?;
    let ae = Autoencoder::load(weights).map_err(CliError::Core)?;
    let samples = load_dataset(dataset)?;

    let zeta = match (zeta, calibrate) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage("--zeta and --calibrate are mutually exclusive".into()))
        }
        (Some(z), None) => z,
        (None, Some(dir)) => {
            let known = load_dataset(dir)?;
            let losses: Result<Vec<f64>, Error> = known
                .iter()
                .map(|s| {
                    let recon = ae.reconstruct(&s.image)?;
                    d1(&recon, &s.image)
                })
                .collect();
            calibrate_threshold(&losses?)?
        }
        (None, None) => {
            return Err(CliError::Usage("one of --zeta or --calibrate is required".into()))
        }
    };

    let mut manifest = RunManifest::new("exam", serde_json::json!({ "zeta": zeta }), None);
    manifest.record_input(weights)?;
    manifest.record_input_dir(dataset, "dtns")?;
    if let Some(dir) = calibrate {
        manifest.record_input_dir(dir, "dtns")?;
    }

    let result = encoder_decoder_exam(&ae, &samples, zeta)?;
    write_json(out, &result.report)?;
    manifest.record_output(out);

    if let Some(dir) = dump_recon {
        fs::create_dir_all(dir).map_err(Error::from)?;
        for (entry, recon) in result.report.entries.iter().zip(&result.recons) {
            let dtns_path = dir.join(format!("recon_{}.dtns", entry.id));
            recon.save_dtns(&dtns_path).map_err(CliError::Core)?;
            manifest.record_output(&dtns_path);
            let png_path = dir.join(format!("recon_{}.png", entry.id));
            png::save_png(recon, &png_path).map_err(CliError::Core)?;
            manifest.record_output(&png_path);
        }
    }
    manifest.finalize(&manifest_for_file(out))?;
    let flagged = result.report.entries.iter().filter(|e| e.is_disguise).count();
    println!(
        "zeta {:.6}: {} of {} samples flagged as disguises",
        zeta,
        flagged,
        result.report.entries.len()
    );
    Ok(())
}

fn eval(report_path: &Path, labels_path: &Path, out: &Path) -> Result<(), CliError> {
    require_file(report_path, "exam report")?;
    require_file(labels_path, "labels file")?;
    let report: ExamReport = serde_json::from_slice(&fs::read(report_path).map_err(Error::from)?)
        .map_err(|e| CliError::Core(Error::Format { offset: 0, details: format!("exam report: {e}") }))?;
    let labels: std::collections::BTreeMap<String, String> =
        serde_json::from_slice(&fs::read(labels_path).map_err(Error::from)?)
            .map_err(|e| CliError::Core(Error::Format { offset: 0, details: format!("labels: {e}") }))?;

    let mut manifest = RunManifest::new("eval", serde_json::Value::Null, None);
    manifest.record_input(report_path)?;
    manifest.record_input(labels_path)?;

    let mut disguise_losses = Vec::new();
    let mut clean_losses = Vec::new();
    for entry in &report.entries {
        match labels.get(&entry.id).map(String::as_str) {
            Some("disguise") => disguise_losses.push(entry.loss),
            Some("clean") => clean_losses.push(entry.loss),
            Some(other) => {
                return Err(CliError::Core(Error::Contract(format!(
                    "label for {} must be \"disguise\" or \"clean\", got {other:?}",
                    entry.id
                ))))
            }
            None => {
                return Err(CliError::Core(Error::Contract(format!("no label for sample {}", entry.id))))
            }
        }
    }
    let metrics = summarize(&disguise_losses, &clean_losses, report.zeta)?;
    write_json(out, &metrics)?;
    manifest.record_output(out);
    manifest.finalize(&manifest_for_file(out))?;
    print_metrics_table(&metrics);
    Ok(())
}

fn print_metrics_table(m: &MetricsSummary) {
    println!("mean reconstruction loss (disguises) : {:.4}", m.mean_disguise_loss);
    println!("mean reconstruction loss (clean)     : {:.4}", m.mean_clean_loss);
    println!("threshold zeta                       : {:.4}", m.zeta);
    println!(
        "false positive rate                  : {}/{} = {:.4}",
        m.false_positive_count, m.n_clean, m.false_positive_rate
    );
    println!(
        "false negative rate                  : {}/{} = {:.4}",
        m.false_negative_count, m.n_disguise, m.false_negative_rate
    );
    println!("AUROC                                : {:.4}", m.auroc);
}

fn convert(input: &Path, out: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("convert", serde_json::Value::Null, None);
    let img = load_image_arg(input)?;
    manifest.record_input(input)?;
    match out.extension().and_then(|e| e.to_str()) {
        Some("dtns") => img.save_dtns(out).map_err(CliError::Core)?,
        Some("png") => png::save_png(&img, out).map_err(CliError::Core)?,
        other => {
            return Err(CliError::Usage(format!(
                "unsupported output extension {:?} (want .dtns or .png)",
                other.unwrap_or("")
            )))
        }
    }
    manifest.record_output(out);
    manifest.finalize(&manifest_for_file(out))?;
    Ok(())
}
