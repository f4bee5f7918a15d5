//! The three network roles: per-client classifier, server-side conditional
//! generator, and per-client discriminator, plus checkpoint serialization.
//!
//! Architectures are deliberately small. The classifier is two stride-2
//! convolutions and one fully connected layer. The generator is a dense
//! two-layer net with a tanh head so outputs live in `[-1,1]`; conditioning
//! is a one-hot label concatenated to the noise vector. The discriminator is
//! convolutional with a one-channel patch map head whose per-patch sigmoid
//! outputs are averaged into a single probability per sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::seed;
use crate::tensor::{argmax_rows, Tape, Tensor, Var};

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init data is finite")
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

// ── classifier ───────────────────────────────────────────────────────

/// CNN classifier: conv(s2) -> relu -> conv(s2) -> relu -> fc.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub params: ParamVector,
    pub num_classes: usize,
    pub resolution: usize,
    channels: [usize; 2],
}

impl Classifier {
    pub fn new(num_classes: usize, resolution: usize, seed: u64) -> Result<Self> {
        Self::with_channels(num_classes, resolution, [6, 12], seed)
    }

    /// Variant with custom channel widths; tiny instances are used by the
    /// gradient-check suite.
    pub fn with_channels(
        num_classes: usize,
        resolution: usize,
        channels: [usize; 2],
        seed: u64,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract("classifier needs >= 2 classes".to_string()));
        }
        if resolution < 4 {
            return Err(Error::contract("classifier needs resolution >= 4".to_string()));
        }
        let mut rng = seed::rng_from(seed, &[seed::purpose::INIT, 0xC1]);
        let [c1, c2] = channels;
        let s1 = conv_out(resolution, 3, 2, 1);
        let s2 = conv_out(s1, 3, 2, 1);
        let fc_in = c2 * s2 * s2;
        let mut params = ParamVector::new();
        params.push("conv1.w", uniform_init(&mut rng, vec![c1, 1, 3, 3], 9))?;
        params.push("conv1.b", Tensor::zeros(vec![c1]))?;
        params.push("conv2.w", uniform_init(&mut rng, vec![c2, c1, 3, 3], c1 * 9))?;
        params.push("conv2.b", Tensor::zeros(vec![c2]))?;
        params.push("fc.w", uniform_init(&mut rng, vec![fc_in, num_classes], fc_in))?;
        params.push("fc.b", Tensor::zeros(vec![num_classes]))?;
        Ok(Classifier {
            params,
            num_classes,
            resolution,
            channels,
        })
    }

    /// Same architecture, different weights.
    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        if !self.params.compatible(&params) {
            return Err(Error::contract(
                "incompatible ParamVector for classifier".to_string(),
            ));
        }
        Ok(Classifier {
            params,
            num_classes: self.num_classes,
            resolution: self.resolution,
            channels: self.channels,
        })
    }

    /// Records the forward pass on `tape` using `params` (which must be
    /// compatible with this architecture). Returns logits and the parameter
    /// leaves in `params` order.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        batch: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape_of(batch).to_vec();
        if shape.len() != 4 || shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(Error::dimension(format!(
                "classifier expects [B,1,{r},{r}], got {shape:?}",
                r = self.resolution
            )));
        }
        let leaves: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
        let b = shape[0];
        let h1 = tape.conv2d(batch, leaves[0], leaves[1], 2, 1)?;
        let a1 = tape.relu(h1);
        let h2 = tape.conv2d(a1, leaves[2], leaves[3], 2, 1)?;
        let a2 = tape.relu(h2);
        let fc_in = params.get("fc.w").expect("fc.w exists").shape()[0];
        let flat = tape.reshape(a2, vec![b, fc_in])?;
        let logits = tape.linear(flat, leaves[4], leaves[5])?;
        Ok((logits, leaves))
    }

    pub fn forward(&self, tape: &mut Tape, batch: Var) -> Result<(Var, Vec<Var>)> {
        self.forward_with(tape, &self.params, batch)
    }

    /// Plain inference: logits for a batch, no gradient bookkeeping kept.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = tape.constant(batch);
        let (out, _) = self.forward(&mut tape, b)?;
        tape.value(out)
    }

    /// Argmax class predictions for a batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        argmax_rows(&self.logits(batch)?)
    }
}

// ── conditional generator ────────────────────────────────────────────

/// Dense conditional generator `G(z | y)`: the one-hot label is concatenated
/// to the noise vector, followed by two dense layers and a tanh head.
#[derive(Debug, Clone)]
pub struct CondGenerator {
    pub params: ParamVector,
    pub noise_dim: usize,
    pub num_classes: usize,
    pub resolution: usize,
}

impl CondGenerator {
    pub fn new(num_classes: usize, resolution: usize, noise_dim: usize, seed: u64) -> Result<Self> {
        Self::with_hidden(num_classes, resolution, noise_dim, 6 * resolution, seed)
    }

    pub fn with_hidden(
        num_classes: usize,
        resolution: usize,
        noise_dim: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if noise_dim == 0 || hidden == 0 {
            return Err(Error::contract("generator dims must be positive".to_string()));
        }
        let mut rng = seed::rng_from(seed, &[seed::purpose::INIT, 0x6E]);
        let in_dim = noise_dim + num_classes;
        let out_dim = resolution * resolution;
        let mut params = ParamVector::new();
        params.push("fc1.w", uniform_init(&mut rng, vec![in_dim, hidden], in_dim))?;
        params.push("fc1.b", Tensor::zeros(vec![hidden]))?;
        params.push("fc2.w", uniform_init(&mut rng, vec![hidden, out_dim], hidden))?;
        params.push("fc2.b", Tensor::zeros(vec![out_dim]))?;
        Ok(CondGenerator {
            params,
            noise_dim,
            num_classes,
            resolution,
        })
    }

    /// Builds the `[B, noise_dim + C]` input block: seeded standard-normal
    /// noise with the one-hot labels appended.
    pub fn make_input(&self, labels: &[usize], noise_seed: u64) -> Result<Tensor> {
        if labels.is_empty() {
            return Err(Error::contract("generate needs at least one label".to_string()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut rng = seed::rng_from(noise_seed, &[seed::purpose::NOISE]);
        let b = labels.len();
        let width = self.noise_dim + self.num_classes;
        let normal = rand_distr::StandardNormal;
        let mut data = vec![0.0f64; b * width];
        for (row, &label) in labels.iter().enumerate() {
            for j in 0..self.noise_dim {
                let draw: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                data[row * width + j] = draw;
            }
            data[row * width + self.noise_dim + label] = 1.0;
        }
        Tensor::new(vec![b, width], data)
    }

    /// Records the generator forward pass; output is `[B,1,H,W]` in `[-1,1]`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        input: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let leaves: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
        let b = tape.shape_of(input)[0];
        let h = tape.linear(input, leaves[0], leaves[1])?;
        let a = tape.relu(h);
        let out = tape.linear(a, leaves[2], leaves[3])?;
        let img = tape.tanh(out);
        let shaped = tape.reshape(img, vec![b, 1, self.resolution, self.resolution])?;
        Ok((shaped, leaves))
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<(Var, Vec<Var>)> {
        self.forward_with(tape, &self.params, input)
    }

    /// Synthesizes a labeled batch. Deterministic for a given seed.
    pub fn generate(&self, labels: &[usize], noise_seed: u64) -> Result<(Tensor, Vec<usize>)> {
        let input = self.make_input(labels, noise_seed)?;
        let mut tape = Tape::new();
        let iv = tape.constant(&input);
        let (out, _) = self.forward(&mut tape, iv)?;
        Ok((tape.value(out)?, labels.to_vec()))
    }
}

// ── discriminator ────────────────────────────────────────────────────

/// Patch discriminator: conv(s2) -> relu -> conv to a 1-channel logit map;
/// per-patch sigmoids are averaged into one probability per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamVector,
    pub resolution: usize,
}

impl Discriminator {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        Self::with_channels(resolution, 4, seed)
    }

    pub fn with_channels(resolution: usize, channels: usize, seed: u64) -> Result<Self> {
        if resolution < 4 {
            return Err(Error::contract("discriminator needs resolution >= 4".to_string()));
        }
        let mut rng = seed::rng_from(seed, &[seed::purpose::INIT, 0xD1]);
        let mut params = ParamVector::new();
        params.push("conv1.w", uniform_init(&mut rng, vec![channels, 1, 3, 3], 9))?;
        params.push("conv1.b", Tensor::zeros(vec![channels]))?;
        params.push(
            "patch.w",
            uniform_init(&mut rng, vec![1, channels, 3, 3], channels * 9),
        )?;
        params.push("patch.b", Tensor::zeros(vec![1]))?;
        Ok(Discriminator { params, resolution })
    }

    /// Records the forward pass; returns per-sample probabilities `[B]`
    /// (mean of per-patch sigmoids) and the parameter leaves.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &ParamVector,
        batch: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = tape.shape_of(batch).to_vec();
        if shape.len() != 4 || shape[2] != self.resolution || shape[3] != self.resolution {
            return Err(Error::dimension(format!(
                "discriminator expects [B,1,{r},{r}], got {shape:?}",
                r = self.resolution
            )));
        }
        let leaves: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
        let b = shape[0];
        let h1 = tape.conv2d(batch, leaves[0], leaves[1], 2, 1)?;
        let a1 = tape.relu(h1);
        let patches = tape.conv2d(a1, leaves[2], leaves[3], 1, 1)?;
        let s = tape.shape_of(patches).to_vec();
        let flat = tape.reshape(patches, vec![b, s[1] * s[2] * s[3]])?;
        // Per-patch probabilities averaged to one probability per sample;
        // each patch's influence is bounded by 1/num_patches.
        let probs = tape.sigmoid(flat);
        let mean = tape.mean_rows(probs)?;
        Ok((mean, leaves))
    }

    pub fn forward(&self, tape: &mut Tape, batch: Var) -> Result<(Var, Vec<Var>)> {
        self.forward_with(tape, &self.params, batch)
    }

    /// Per-sample probability of being real, in `(0,1)`.
    pub fn discriminate(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = tape.constant(batch);
        let (out, _) = self.forward(&mut tape, b)?;
        Ok(tape.data_of(out).to_vec())
    }
}

// ── checkpoint format ────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMGD";
const CHECKPOINT_VERSION: u16 = 1;

/// CRC-32 (IEEE 802.3 polynomial, reflected), as used by zlib.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &byte in bytes {
        crc ^= byte as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Serializes a [`ParamVector`] into the checkpoint wire format:
/// magic `FMGD`, u16 version, u32 entry count, then per entry
/// `{u16 name length, name bytes, u8 rank, u32 extents..., f64 LE data}`,
/// with a trailing CRC32 of all preceding bytes. Integers are little-endian.
pub fn flatten_params(params: &ParamVector) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::contract(format!("parameter name too long: {name}")));
        }
        let rank = tensor.shape().len();
        if rank > u8::MAX as usize {
            return Err(Error::contract(format!("rank {rank} exceeds u8")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(rank as u8);
        for &extent in tensor.shape() {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &value in tensor.data() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(field, "truncated checkpoint"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Inverse of [`flatten_params`]; validates magic, version, and CRC.
pub fn restore_params(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(Error::format("checkpoint", "truncated checkpoint"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::format(
            "checkpoint.crc",
            format!("checksum mismatch: stored 0x{stored:08x}, computed 0x{computed:08x}"),
        ));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4, "checkpoint.magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint.magic", "bad magic"));
    }
    let version = r.u16("checkpoint.version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint.version",
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32("checkpoint.count")? as usize;
    let mut params = ParamVector::new();
    for entry in 0..count {
        let field = format!("checkpoint.entry[{entry}]");
        let name_len = r.u16(&field)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &field)?)
            .map_err(|_| Error::format(&field, "name is not utf-8"))?
            .to_string();
        let rank = r.take(1, &field)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&field)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &field)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.push(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != body.len() {
        return Err(Error::format("checkpoint", "trailing bytes after entries"));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;

    fn batch_of(resolution: usize, b: usize, fill: f64) -> Tensor {
        Tensor::new(
            vec![b, 1, resolution, resolution],
            vec![fill; b * resolution * resolution],
        )
        .unwrap()
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let mut clf = Classifier::new(4, 8, 1).unwrap();
        let fc_w = clf.params.get_mut("fc.w").unwrap();
        fc_w.data_mut().fill(0.0);
        let logits = clf.logits(&batch_of(8, 3, 0.25)).unwrap();
        let probs = softmax_rows(&logits).unwrap();
        for &p in probs.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_rows_match_batch() {
        let clf = Classifier::new(5, 8, 2).unwrap();
        let logits = clf.logits(&batch_of(8, 7, 0.1)).unwrap();
        assert_eq!(logits.shape(), &[7, 5]);
    }

    #[test]
    fn identical_params_identical_logits() {
        let a = Classifier::new(3, 8, 9).unwrap();
        let b = a.with_params(a.params.clone()).unwrap();
        let batch = batch_of(8, 2, -0.6);
        assert_eq!(
            a.logits(&batch).unwrap().data(),
            b.logits(&batch).unwrap().data()
        );
    }

    #[test]
    fn generator_is_deterministic_and_bounded() {
        let gen = CondGenerator::new(4, 8, 16, 3).unwrap();
        let labels = vec![0, 1, 2, 3, 2, 1];
        let (a, la) = gen.generate(&labels, 42).unwrap();
        let (b, lb) = gen.generate(&labels, 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la, lb);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a.shape(), &[6, 1, 8, 8]);

        let (c, _) = gen.generate(&labels, 43).unwrap();
        assert_ne!(a.data(), c.data(), "different seed must change noise");
    }

    #[test]
    fn generator_rejects_bad_labels() {
        let gen = CondGenerator::new(4, 8, 16, 3).unwrap();
        assert!(gen.generate(&[4], 1).is_err());
        assert!(gen.generate(&[], 1).is_err());
    }

    #[test]
    fn zeroed_discriminator_outputs_half() {
        let mut d = Discriminator::new(8, 5).unwrap();
        for (_, t) in d.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let probs = d.discriminate(&batch_of(8, 4, 0.7)).unwrap();
        assert_eq!(probs.len(), 4);
        for p in probs {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn discriminator_probabilities_in_open_interval() {
        let d = Discriminator::new(8, 11).unwrap();
        let probs = d.discriminate(&batch_of(8, 3, -0.9)).unwrap();
        for p in probs {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let clf = Classifier::new(4, 8, 7).unwrap();
        let bytes = flatten_params(&clf.params).unwrap();
        let restored = restore_params(&bytes).unwrap();
        assert!(clf.params.compatible(&restored));
        for ((an, at), (bn, bt)) in clf.params.iter().zip(restored.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data());
        }
    }

    #[test]
    fn empty_param_vector_round_trips() {
        let empty = ParamVector::new();
        let bytes = flatten_params(&empty).unwrap();
        let restored = restore_params(&bytes).unwrap();
        assert_eq!(restored.len(), 0);
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let clf = Classifier::new(2, 8, 7).unwrap();
        let bytes = flatten_params(&clf.params).unwrap();
        for cut in [3, 10, bytes.len() - 5] {
            let err = restore_params(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut={cut}: {err}");
        }
    }

    #[test]
    fn corrupted_checkpoint_fails_crc() {
        let clf = Classifier::new(2, 8, 7).unwrap();
        let mut bytes = flatten_params(&clf.params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        let err = restore_params(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }
}
