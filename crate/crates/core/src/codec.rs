//! The fixed encoder/decoder pair: a small deterministic convolutional
//! autoencoder mapping `H x W x 3` images to `(H/4) x (W/4) x 4` latents.
//!
//! Encoder: 3x3 convs 3->16 (s1, tanh), 16->32 (s2, tanh), 32->32 (s1, tanh),
//! 32->4 (s2, linear). Decoder mirrors it with a nearest 2x upsample before
//! each spatially expanding conv and a final sigmoid, so decoded pixels stay
//! in [0,1]. There is no sampling step anywhere: encode and decode are pure.
//!
//! Weights file DWGT (little-endian):
//!   magic `DWGT` | version `0x01` | u32 tensor count |
//!   per tensor: u16 name length | UTF-8 name | DTNS-encoded tensor

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tensor::CountingReader;
use crate::diffcore::{Graph, GraphOps, Tensor};
use crate::distances::{d1_node, MsSsimParams};
use crate::error::{Error, Result};
use crate::par;

pub const DWGT_MAGIC: [u8; 4] = *b"DWGT";
pub const DWGT_VERSION: u8 = 0x01;

pub const IMAGE_CHANNELS: usize = 3;
pub const LATENT_CHANNELS: usize = 4;
/// Spatial compression factor of the encoder.
pub const DOWN_FACTOR: usize = 4;

/// (cin, cout, stride) per encoder conv; all kernels 3x3.
const ENC_LAYERS: [(usize, usize, usize); 4] = [(3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 4, 2)];
/// (cin, cout, upsample_before) per decoder conv; all stride 1.
const DEC_LAYERS: [(usize, usize, bool); 4] =
    [(4, 32, true), (32, 32, false), (32, 16, true), (16, 3, false)];

const KERNEL_SIDE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// All weights of the fixed autoencoder, encoder first.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub enc: Vec<ConvLayer>,
    pub dec: Vec<ConvLayer>,
}

/// Weight tensor names in serialization order.
pub fn weight_names() -> Vec<String> {
    let mut names = Vec::with_capacity(16);
    for i in 0..ENC_LAYERS.len() {
        names.push(format!("enc{i}.kernel"));
        names.push(format!("enc{i}.bias"));
    }
    for i in 0..DEC_LAYERS.len() {
        names.push(format!("dec{i}.kernel"));
        names.push(format!("dec{i}.bias"));
    }
    names
}

impl Autoencoder {
    /// All-zero weights; encode maps everything to zero (final layer is
    /// linear) and decode to constant 0.5 (sigmoid of zero).
    pub fn zeros() -> Self {
        let layer = |cin: usize, cout: usize| ConvLayer {
            kernel: Tensor::zeros(&[KERNEL_SIDE, KERNEL_SIDE, cin, cout]),
            bias: Tensor::zeros(&[cout]),
        };
        Autoencoder {
            enc: ENC_LAYERS.iter().map(|&(ci, co, _)| layer(ci, co)).collect(),
            dec: DEC_LAYERS.iter().map(|&(ci, co, _)| layer(ci, co)).collect(),
        }
    }

    /// Seeded Glorot-uniform kernels (bound sqrt(6/(fan_in+fan_out))),
    /// zero biases. Layer order fixes the generator consumption order.
    pub fn random_init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |cin: usize, cout: usize| {
            let fan_in = (KERNEL_SIDE * KERNEL_SIDE * cin) as f64;
            let fan_out = (KERNEL_SIDE * KERNEL_SIDE * cout) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt() as f32;
            let kernel = Tensor::from_fn(&[KERNEL_SIDE, KERNEL_SIDE, cin, cout], |_| {
                rng.random::<f32>() * 2.0 * bound - bound
            });
            ConvLayer { kernel, bias: Tensor::zeros(&[cout]) }
        };
        Autoencoder {
            enc: ENC_LAYERS.iter().map(|&(ci, co, _)| layer(ci, co)).collect(),
            dec: DEC_LAYERS.iter().map(|&(ci, co, _)| layer(ci, co)).collect(),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        self.enc
            .iter()
            .chain(self.dec.iter())
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.enc
            .iter_mut()
            .chain(self.dec.iter_mut())
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    /// Wires the weights into a graph as constants (inference / forging).
    pub fn wire_constants<G: GraphOps>(&self, g: &mut G) -> WiredCodec<G::Id> {
        self.wire(g, false)
    }

    /// Wires the weights as differentiable leaves (training).
    pub fn wire_leaves<G: GraphOps>(&self, g: &mut G) -> WiredCodec<G::Id> {
        self.wire(g, true)
    }

    fn wire<G: GraphOps>(&self, g: &mut G, trainable: bool) -> WiredCodec<G::Id> {
        let mut push = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        let enc = self.enc.iter().map(|l| (push(&l.kernel), push(&l.bias))).collect();
        let dec = self.dec.iter().map(|l| (push(&l.kernel), push(&l.bias))).collect();
        WiredCodec { enc, dec }
    }

    /// Deterministic latent of an image; differentiable via the graph form.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wired = self.wire_constants(&mut g);
        let z = wired.encode(&mut g, xn)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zn = g.constant(z.clone());
        let wired = self.wire_constants(&mut g);
        let x = wired.decode(&mut g, zn)?;
        Ok(g.value(x).clone())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wired = self.wire_constants(&mut g);
        let z = wired.encode(&mut g, xn)?;
        let r = wired.decode(&mut g, z)?;
        Ok(g.value(r).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_dwgt(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_dwgt(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&DWGT_MAGIC)?;
        w.write_all(&[DWGT_VERSION])?;
        let names = weight_names();
        w.write_all(&(names.len() as u32).to_le_bytes())?;
        for (name, tensor) in names.iter().zip(self.params()) {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            tensor.write_dtns(&mut w)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = CountingReader::new(BufReader::new(File::open(path)?));
        let ae = Self::read_dwgt(&mut r)?;
        if r.read_one_byte()?.is_some() {
            return Err(Error::format(r.position() - 1, "trailing bytes after weight archive".to_string()));
        }
        Ok(ae)
    }

    pub fn read_dwgt(r: &mut CountingReader<impl Read>) -> Result<Self> {
        let entries = read_dwgt_entries(r)?;
        let names = weight_names();
        if entries.len() != names.len() {
            return Err(Error::format(
                5,
                format!("want {} weight tensors, archive has {}", names.len(), entries.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for ((got_name, tensor), want_name) in entries.into_iter().zip(&names) {
            if &got_name != want_name {
                return Err(Error::contract(format!(
                    "weight archive order mismatch: got {got_name:?}, want {want_name:?}"
                )));
            }
            tensors.push(tensor);
        }
        let mut it = tensors.into_iter();
        let mut take_layer = |cin: usize, cout: usize| -> Result<ConvLayer> {
            let kernel = it.next().expect("count checked");
            let bias = it.next().expect("count checked");
            if kernel.dims() != [KERNEL_SIDE, KERNEL_SIDE, cin, cout] || bias.dims() != [cout] {
                return Err(Error::contract(format!(
                    "weight dims {:?}/{:?} do not match layer {}->{}",
                    kernel.dims(),
                    bias.dims(),
                    cin,
                    cout
                )));
            }
            Ok(ConvLayer { kernel, bias })
        };
        let enc = ENC_LAYERS.iter().map(|&(ci, co, _)| take_layer(ci, co)).collect::<Result<_>>()?;
        let dec = DEC_LAYERS.iter().map(|&(ci, co, _)| take_layer(ci, co)).collect::<Result<_>>()?;
        Ok(Autoencoder { enc, dec })
    }
}

/// Reads every (name, tensor) entry of a DWGT archive in file order.
pub fn read_dwgt_entries(r: &mut CountingReader<impl Read>) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, 0)?;
    if magic != DWGT_MAGIC {
        return Err(Error::format(0, format!("bad magic {:02x?}, want \"DWGT\"", magic)));
    }
    let mut version = [0u8; 1];
    r.read_exact_at(&mut version, 0)?;
    if version[0] != DWGT_VERSION {
        return Err(Error::format(4, format!("unsupported version 0x{:02x}", version[0])));
    }
    let mut count_buf = [0u8; 4];
    r.read_exact_at(&mut count_buf, 0)?;
    let count = u32::from_le_bytes(count_buf) as usize;
    if count > 4096 {
        return Err(Error::format(5, format!("implausible tensor count {count}")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_buf = [0u8; 2];
        r.read_exact_at(&mut len_buf, 0)?;
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        let name_offset = r.position();
        r.read_exact_at(&mut name_bytes, 0)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(name_offset, "weight name is not UTF-8".to_string()))?;
        let tensor = Tensor::read_dtns(r, 0)?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

/// Weight nodes of one autoencoder instance inside one graph.
pub struct WiredCodec<Id> {
    enc: Vec<(Id, Id)>,
    dec: Vec<(Id, Id)>,
}

impl<Id: Copy> WiredCodec<Id> {
    /// Encoder forward pass; output is `(H/4) x (W/4) x 4`.
    pub fn encode<G: GraphOps<Id = Id>>(&self, g: &mut G, x: Id) -> Result<Id> {
        let dims = g.dims(x).to_vec();
        if dims.len() != 3 || dims[2] != IMAGE_CHANNELS {
            return Err(Error::shape("encode", format!("want HxWx3, got {:?}", dims)));
        }
        if dims[0] % DOWN_FACTOR != 0 || dims[1] % DOWN_FACTOR != 0 {
            return Err(Error::shape(
                "encode",
                format!("sides must be divisible by {}, got {}x{}", DOWN_FACTOR, dims[0], dims[1]),
            ));
        }
        let mut cur = x;
        for (i, ((k, b), &(_, _, stride))) in self.enc.iter().zip(ENC_LAYERS.iter()).enumerate() {
            cur = g.conv2d(cur, *k, *b, stride)?;
            if i + 1 < ENC_LAYERS.len() {
                cur = g.tanh(cur);
            }
        }
        Ok(cur)
    }

    /// Decoder forward pass; output is `H x W x 3` with values in [0,1].
    pub fn decode<G: GraphOps<Id = Id>>(&self, g: &mut G, z: Id) -> Result<Id> {
        let dims = g.dims(z).to_vec();
        if dims.len() != 3 || dims[2] != LATENT_CHANNELS {
            return Err(Error::shape("decode", format!("want HxWx4, got {:?}", dims)));
        }
        let mut cur = z;
        for (i, ((k, b), &(_, _, up))) in self.dec.iter().zip(DEC_LAYERS.iter()).enumerate() {
            if up {
                cur = g.upsample2(cur)?;
            }
            cur = g.conv2d(cur, *k, *b, 1)?;
            cur = if i + 1 < DEC_LAYERS.len() { g.tanh(cur) } else { g.sigmoid(cur) };
        }
        Ok(cur)
    }

    fn param_ids(&self) -> Vec<Id> {
        self.enc
            .iter()
            .chain(self.dec.iter())
            .flat_map(|&(k, b)| [k, b])
            .collect()
    }
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, batch_size: 16, learning_rate: 3e-3, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::contract("epochs must be >= 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::contract("batch size must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean reconstruction d1 over the corpus, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    fn new(params: &[&Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gd[i];
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-sample reconstruction loss and weight gradients.
fn sample_grad(ae: &Autoencoder, x: &Tensor, p: &MsSsimParams) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let wired = ae.wire_leaves(&mut g);
    let xn = g.constant(x.clone());
    let z = wired.encode(&mut g, xn)?;
    let recon = wired.decode(&mut g, z)?;
    let loss = d1_node(&mut g, recon, xn, p)?;
    let loss_v = g.scalar_value(loss);
    let grads = g.backward(loss)?;
    let out = wired
        .param_ids()
        .iter()
        .map(|&id| grads.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(g.value(id).dims())))
        .collect();
    Ok((loss_v, out))
}

/// Trains the autoencoder with Adam on mean reconstruction d1.
/// Fully deterministic for a given config and corpus.
pub fn train_autoencoder(cfg: &TrainConfig, corpus: &[Tensor]) -> Result<(Autoencoder, TrainLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("training corpus is empty".to_string()));
    }
    let dims = corpus[0].dims().to_vec();
    if corpus.iter().any(|t| t.dims() != dims) {
        return Err(Error::contract("training corpus has mixed dims".to_string()));
    }
    let p = MsSsimParams::for_min_side(dims[0].min(dims[1]))?;

    let mut ae = Autoencoder::random_init(cfg.seed);
    let mut adam = Adam::new(&ae.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = TrainLog::default();

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _epoch in 0..cfg.epochs {
        // Fisher-Yates with the seeded generator: deterministic epoch order.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<Tensor>)>> =
                par::map_slice(batch, |&i| sample_grad(&ae, &corpus[i], &p));
            let mut batch_grads: Option<Vec<Tensor>> = None;
            let mut n = 0usize;
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                n += 1;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, gt) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(gt.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            let scale = 1.0 / n as f32;
            for gt in &mut grads {
                for v in gt.data_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut ae.params_mut(), &grads, cfg.learning_rate);
        }
        log.epoch_loss.push(epoch_loss / corpus.len() as f64);
    }
    Ok((ae, log))
}

/// Mean reconstruction d1 over a set of images (screening/eval helper).
pub fn mean_reconstruction_loss(ae: &Autoencoder, images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::contract("empty image set".to_string()));
    }
    let losses: Vec<Result<f64>> = par::map_slice(images, |x| {
        let recon = ae.reconstruct(x)?;
        crate::distances::d1(&recon, x)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.random::<f32>())
    }

    #[test]
    fn encode_shape_law() {
        let ae = Autoencoder::random_init(0);
        let x = image(1, 64, 64);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.dims(), &[16, 16, 4]);
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.dims(), &[64, 64, 3]);
    }

    #[test]
    fn encode_rejects_indivisible_sides() {
        let ae = Autoencoder::zeros();
        let x = image(1, 30, 32);
        assert!(ae.encode(&x).is_err());
    }

    #[test]
    fn zero_weights_give_zero_latent_and_half_gray_decode() {
        let ae = Autoencoder::zeros();
        let x = image(2, 16, 16);
        let z = ae.encode(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let y = ae.decode(&z).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn encode_is_deterministic() {
        let ae = Autoencoder::random_init(3);
        let x = image(4, 16, 16);
        assert_eq!(ae.encode(&x).unwrap(), ae.encode(&x).unwrap());
    }

    #[test]
    fn decoded_values_stay_in_unit_range() {
        let ae = Autoencoder::random_init(5);
        let z = Tensor::from_fn(&[4, 4, 4], |i| (i as f32 * 0.37).sin() * 3.0);
        let y = ae.decode(&z).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dwgt_round_trip_is_bit_exact() {
        let ae = Autoencoder::random_init(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dwgt");
        ae.save(&path).unwrap();
        let back = Autoencoder::load(&path).unwrap();
        assert_eq!(ae, back);
    }

    #[test]
    fn dwgt_names_enumerate_in_order() {
        let ae = Autoencoder::random_init(8);
        let mut buf = Vec::new();
        ae.write_dwgt(&mut buf).unwrap();
        let mut r = CountingReader::new(buf.as_slice());
        let entries = read_dwgt_entries(&mut r).unwrap();
        let names: Vec<String> = entries.into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, weight_names());
        assert_eq!(names.len(), 16);
    }

    #[test]
    fn dwgt_truncation_reports_offset() {
        let ae = Autoencoder::random_init(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dwgt");
        ae.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = bytes.len() - 7;
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = Autoencoder::load(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, cut as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn training_is_seeded_deterministic_and_moves_weights() {
        let corpus: Vec<Tensor> = (0..8).map(|i| image(100 + i, 16, 16)).collect();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-3, seed: 11 };
        let (ae1, log1) = train_autoencoder(&cfg, &corpus).unwrap();
        let (ae2, log2) = train_autoencoder(&cfg, &corpus).unwrap();
        assert_eq!(ae1, ae2);
        assert_eq!(log1.epoch_loss, log2.epoch_loss);
        let init = Autoencoder::random_init(cfg.seed);
        assert_ne!(init, ae1, "one epoch must move weights where gradients are non-zero");
    }

    #[test]
    fn training_rejects_empty_corpus_and_zero_epochs() {
        let cfg = TrainConfig::default();
        assert!(train_autoencoder(&cfg, &[]).is_err());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train_autoencoder(&bad, &[image(0, 16, 16)]).is_err());
    }
}
