//! Dataset loading, synthetic generation, and Dirichlet label-skew
//! partitioning.
//!
//! IDX ingestion is bit-exact against the classic format: 4-byte big-endian
//! magic (0x00000801 labels / 0x00000803 images), big-endian u32 dimension
//! sizes, raw u8 payload. Pixels map from `[0,255]` to `[-1,1]` via
//! `x/127.5 - 1` and are resized with nearest-neighbor interpolation so the
//! result is reproducible to the bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::seed::{self, purpose};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image dataset with pixels normalized to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Validates the invariants: `N >= 1`, labels in range, pixels in range.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::dimension(format!(
                "dataset images must be [N,C,H,W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() || labels.is_empty() {
            return Err(Error::dimension(format!(
                "{} images vs {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(bad) = images.data().iter().find(|v| v.abs() > 1.0) {
            return Err(Error::contract(format!("pixel {bad} outside [-1,1]")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C,H,W]` extents of one item.
    pub fn item_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn item_numel(&self) -> usize {
        let [c, h, w] = self.item_shape();
        c * h * w
    }

    /// Gathers the given items into a `[B,C,H,W]` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch".to_string()));
        }
        let numel = self.item_numel();
        let [c, h, w] = self.item_shape();
        let mut data = Vec::with_capacity(indices.len() * numel);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("item {i} in dataset of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * numel..(i + 1) * numel]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Per-class item counts over an index subset.
    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &i in indices {
            hist[self.labels[i]] += 1;
        }
        hist
    }
}

// ── IDX ingestion ────────────────────────────────────────────────────

fn read_u32_be(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::format(field, "truncated file"));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Decodes an IDX image/label pair into a normalized dataset.
///
/// Images are resized (nearest-neighbor) to `resolution x resolution`.
/// `num_classes` is inferred as `max(label) + 1` but never below 2.
pub fn load_idx(images_path: &Path, labels_path: &Path, resolution: usize) -> Result<LabeledDataset> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;
    load_idx_bytes(&img_bytes, &lbl_bytes, resolution)
}

/// Same as [`load_idx`] but from in-memory buffers.
pub fn load_idx_bytes(img_bytes: &[u8], lbl_bytes: &[u8], resolution: usize) -> Result<LabeledDataset> {
    if resolution == 0 {
        return Err(Error::contract("resolution must be positive".to_string()));
    }
    let magic = read_u32_be(img_bytes, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(img_bytes, 4, "images.count")? as usize;
    let h = read_u32_be(img_bytes, 8, "images.rows")? as usize;
    let w = read_u32_be(img_bytes, 12, "images.cols")? as usize;
    if n == 0 {
        return Err(Error::format("images.count", "empty item count"));
    }
    if h == 0 || w == 0 {
        return Err(Error::format("images.rows", "zero image extent"));
    }
    let payload = &img_bytes[16..];
    if payload.len() != n * h * w {
        return Err(Error::format(
            "images.data",
            format!("expected {} pixel bytes, found {}", n * h * w, payload.len()),
        ));
    }

    let lbl_magic = read_u32_be(lbl_bytes, 0, "labels.magic")?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("bad magic 0x{lbl_magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let ln = read_u32_be(lbl_bytes, 4, "labels.count")? as usize;
    if ln != n {
        return Err(Error::format(
            "labels.count",
            format!("{ln} labels for {n} images"),
        ));
    }
    let lbl_payload = &lbl_bytes[8..];
    if lbl_payload.len() != ln {
        return Err(Error::format(
            "labels.data",
            format!("expected {ln} label bytes, found {}", lbl_payload.len()),
        ));
    }

    let labels: Vec<usize> = lbl_payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;

    let mut data = Vec::with_capacity(n * resolution * resolution);
    for item in 0..n {
        let src = &payload[item * h * w..(item + 1) * h * w];
        for dy in 0..resolution {
            let sy = dy * h / resolution;
            for dx in 0..resolution {
                let sx = dx * w / resolution;
                data.push(f64::from(src[sy * w + sx]) / 127.5 - 1.0);
            }
        }
    }
    let images = Tensor::new(vec![n, 1, resolution, resolution], data)?;
    LabeledDataset::new(images, labels, num_classes)
}

/// Serializes a dataset's raw `u8` form back into IDX byte buffers.
/// Intended for fixtures and round-trip tests.
pub fn encode_idx(images_u8: &[u8], labels: &[u8], h: usize, w: usize) -> (Vec<u8>, Vec<u8>) {
    let n = labels.len();
    assert_eq!(images_u8.len(), n * h * w);
    let mut img = Vec::with_capacity(16 + images_u8.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend_from_slice(images_u8);
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    (img, lbl)
}

// ── synthetic data ───────────────────────────────────────────────────

/// Deterministic class-conditional dataset.
///
/// Each class is a distinct oriented grating (orientation and frequency vary
/// with the class index) plus seeded uniform noise of amplitude 0.1. A small
/// classifier separates the classes essentially perfectly, which is what the
/// desk-scale protocol checks need.
pub fn synth_dataset(
    num_classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::contract(format!(
            "synth_dataset needs >= 2 classes, got {num_classes}"
        )));
    }
    if per_class == 0 || resolution == 0 {
        return Err(Error::contract(
            "synth_dataset needs per_class >= 1 and resolution >= 1".to_string(),
        ));
    }
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * resolution * resolution);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        // One oriented grating per class: orientation steps through half a
        // turn, frequency alternates between 1.5 and 2.5 cycles.
        let spread = std::env::var("FEDSIM_SYNTH_SPREAD").ok().and_then(|v| v.parse::<f64>().ok()).unwrap_or(1.0);
        let jitter = std::env::var("FEDSIM_SYNTH_JITTER").ok().and_then(|v| v.parse::<f64>().ok()).unwrap_or(0.0);
        let angle = std::f64::consts::PI * class as f64 / (num_classes as f64 * spread);
        let cycles = 1.5;
        let (sin_a, cos_a) = angle.sin_cos();
        for item in 0..per_class {
            let mut rng = seed::rng_from(seed, &[class as u64, item as u64]);
            use rand::Rng;
            let phase0 = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            for y in 0..resolution {
                for x in 0..resolution {
                    let u = x as f64 / resolution as f64;
                    let v = y as f64 / resolution as f64;
                    let phase = 2.0 * std::f64::consts::PI * cycles * (cos_a * u + sin_a * v) + phase0;
                    let pattern = 0.85 * phase.sin();
                    let noise = rng.random_range(-0.1..0.1);
                    data.push((pattern + noise).clamp(-1.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, 1, resolution, resolution], data)?;
    LabeledDataset::new(images, labels, num_classes)
}

// ── Dirichlet partition ──────────────────────────────────────────────

/// How a dataset is split across clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn new(alpha: f64, num_clients: usize, seed: u64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::contract(format!("alpha must be positive, got {alpha}")));
        }
        if num_clients == 0 {
            return Err(Error::contract("num_clients must be >= 1".to_string()));
        }
        Ok(PartitionSpec {
            alpha,
            num_clients,
            seed,
        })
    }
}

/// Disjoint index lists covering a parent dataset exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
    pub test_indices: Vec<usize>,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn dirichlet(rng: &mut rand_chacha::ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        // Extreme alpha can underflow every draw to zero; retry degenerately
        // by putting all mass on a uniformly chosen client.
        use rand::Rng;
        let lucky = rng.random_range(0..k);
        draws = vec![0.0; k];
        draws[lucky] = 1.0;
        return draws;
    }
    draws.iter().map(|d| d / total).collect()
}

/// Splits a dataset into a global stratified test set and `K` client shards
/// with per-class Dirichlet proportions.
///
/// 10% of each class (rounded half-up, at least one item where possible) is
/// held out as the shared test set. The remainder of each class is shuffled
/// and sliced contiguously at the cumulative Dir(alpha) boundaries. If any
/// client ends up with zero samples overall, the proportions are redrawn
/// with `seed + retry` for up to 100 retries.
pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    if ds.len() < spec.num_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {} clients",
            ds.len(),
            spec.num_clients
        )));
    }

    // Class-stratified 10% test split, independent of the retry loop.
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &label) in ds.labels().iter().enumerate() {
        per_class[label].push(i);
    }
    let mut test_indices = Vec::new();
    let mut train_pools: Vec<Vec<usize>> = Vec::with_capacity(per_class.len());
    for (class, indices) in per_class.iter().enumerate() {
        let mut pool = indices.clone();
        if pool.is_empty() {
            train_pools.push(pool);
            continue;
        }
        let mut rng = seed::rng_from(spec.seed, &[purpose::PARTITION, 0, class as u64]);
        pool.shuffle(&mut rng);
        let take = round_half_up(0.1 * pool.len() as f64).max(1).min(pool.len());
        test_indices.extend(pool.drain(..take));
        train_pools.push(pool);
    }

    let k = spec.num_clients;
    for retry in 0..100u64 {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (class, pool) in train_pools.iter().enumerate() {
            if pool.is_empty() {
                continue;
            }
            let mut rng = seed::rng_from(
                spec.seed + retry,
                &[purpose::PARTITION, 1, class as u64],
            );
            let proportions = dirichlet(&mut rng, spec.alpha, k);
            let mut shuffled = pool.clone();
            shuffled.shuffle(&mut rng);
            let m = shuffled.len();
            let mut cumulative = 0.0;
            let mut start = 0usize;
            for (client, &p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == k {
                    m
                } else {
                    round_half_up(cumulative * m as f64).min(m)
                };
                let end = end.max(start);
                shards[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(Partition {
                shards,
                test_indices,
            });
        }
    }
    Err(Error::Partition(format!(
        "no non-empty assignment after 100 redraws (alpha={}, K={})",
        spec.alpha, spec.num_clients
    )))
}

/// Mean pairwise L1 distance between clients' normalized label histograms.
/// Larger means more skew. Single-client partitions score 0.
pub fn mean_label_l1(ds: &LabeledDataset, partition: &Partition) -> f64 {
    let hists: Vec<Vec<f64>> = partition
        .shards
        .iter()
        .map(|shard| {
            let h = ds.class_histogram(shard);
            let total = shard.len().max(1) as f64;
            h.into_iter().map(|c| c as f64 / total).collect()
        })
        .collect();
    let k = hists.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            total += hists[i]
                .iter()
                .zip(&hists[j])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
            pairs += 1;
        }
    }
    total / pairs as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn idx_fixture_round_trips_exactly() {
        let (img, lbl) = encode_idx(&[0, 255, 0, 255], &[7], 2, 2);
        let ds = load_idx_bytes(&img, &lbl, 2).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.images().data(), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(ds.images().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn idx_nearest_neighbor_resize() {
        // 2x2 -> 4x4 repeats each source pixel in a 2x2 block.
        let (img, lbl) = encode_idx(&[0, 255, 0, 255], &[1], 2, 2);
        let ds = load_idx_bytes(&img, &lbl, 4).unwrap();
        let row: Vec<f64> = ds.images().data()[0..4].to_vec();
        assert_eq!(row, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn idx_bad_image_magic() {
        let (mut img, lbl) = encode_idx(&[0; 4], &[0], 2, 2);
        img[3] = 0x01; // now 0x00000801
        let err = load_idx_bytes(&img, &lbl, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("images.magic") && msg.contains("bad magic"), "{msg}");
    }

    #[test]
    fn idx_label_file_with_image_magic() {
        let (img, mut lbl) = encode_idx(&[0; 4], &[0], 2, 2);
        lbl[3] = 0x03; // label file claiming 0x00000803
        let err = load_idx_bytes(&img, &lbl, 2).unwrap_err();
        assert!(err.to_string().contains("labels.magic"), "{err}");
    }

    #[test]
    fn idx_empty_count_is_error() {
        let (img, lbl) = encode_idx(&[], &[], 2, 2);
        let err = load_idx_bytes(&img, &lbl, 2).unwrap_err();
        assert!(err.to_string().contains("empty item count"), "{err}");
    }

    #[test]
    fn idx_truncation_and_count_mismatch() {
        let (mut img, lbl) = encode_idx(&[0, 255, 0, 255], &[3], 2, 2);
        img.truncate(18);
        assert!(load_idx_bytes(&img, &lbl, 2).is_err());

        let (img2, _) = encode_idx(&[0, 255, 0, 255], &[3], 2, 2);
        let (_, lbl2) = encode_idx(&[0; 8], &[3, 4], 2, 2);
        let err = load_idx_bytes(&img2, &lbl2, 2).unwrap_err();
        assert!(err.to_string().contains("labels.count"), "{err}");
    }

    #[test]
    fn synth_is_bit_deterministic() {
        let a = synth_dataset(4, 10, 8, 1).unwrap();
        let b = synth_dataset(4, 10, 8, 1).unwrap();
        assert_eq!(a.images().data(), b.images().data());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn synth_histogram_exact() {
        let ds = synth_dataset(4, 10, 8, 1).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        assert_eq!(ds.class_histogram(&all), vec![10, 10, 10, 10]);
    }

    #[test]
    fn synth_pixels_in_range() {
        let ds = synth_dataset(3, 5, 8, 99).unwrap();
        assert!(ds.images().data().iter().all(|p| (-1.0..=1.0).contains(p)));
    }

    fn check_cover_disjoint(ds: &LabeledDataset, p: &Partition) {
        let mut seen = HashSet::new();
        for idx in p.shards.iter().flatten().chain(p.test_indices.iter()) {
            assert!(seen.insert(*idx), "index {idx} appears twice");
        }
        assert_eq!(seen.len(), ds.len(), "partition must cover the dataset");
    }

    #[test]
    fn partition_cover_disjoint_and_counts() {
        let ds = synth_dataset(4, 25, 8, 3).unwrap();
        for seed in 0..20 {
            for &alpha in &[0.01, 0.1, 1.0, 1e6] {
                let p = dirichlet_partition(&ds, &PartitionSpec::new(alpha, 3, seed).unwrap())
                    .unwrap();
                check_cover_disjoint(&ds, &p);
                // Per-class totals across shards+test equal dataset counts.
                let mut totals = vec![0usize; 4];
                for idx in p.shards.iter().flatten().chain(p.test_indices.iter()) {
                    totals[ds.labels()[*idx]] += 1;
                }
                assert_eq!(totals, vec![25, 25, 25, 25]);
            }
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = synth_dataset(4, 25, 8, 3).unwrap();
        let spec = PartitionSpec::new(0.1, 4, 77).unwrap();
        assert_eq!(
            dirichlet_partition(&ds, &spec).unwrap(),
            dirichlet_partition(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn iid_limit_splits_evenly() {
        // alpha -> infinity: C=2, K=2, 1000/class, 10% test leaves 900/class;
        // each client should hold about 450 of each class.
        let ds = synth_dataset(2, 1000, 4, 5).unwrap();
        let p = dirichlet_partition(&ds, &PartitionSpec::new(1e6, 2, 11).unwrap()).unwrap();
        for shard in &p.shards {
            let hist = ds.class_histogram(shard);
            for &count in &hist {
                assert!(
                    (count as i64 - 450).abs() <= 30,
                    "IID split should be near-even, got {hist:?}"
                );
            }
        }
    }

    #[test]
    fn extreme_alpha_concentrates_classes() {
        // alpha=0.01, K=2: across 100 seeds, for >= 90% of classes one
        // client holds >= 95% of that class's training samples.
        let ds = synth_dataset(4, 50, 4, 8).unwrap();
        let mut concentrated = 0usize;
        let mut total = 0usize;
        for s in 0..100 {
            let p = dirichlet_partition(&ds, &PartitionSpec::new(0.01, 2, s).unwrap()).unwrap();
            let hists: Vec<Vec<usize>> =
                p.shards.iter().map(|sh| ds.class_histogram(sh)).collect();
            for class in 0..4 {
                let counts: Vec<usize> = hists.iter().map(|h| h[class]).collect();
                let class_total: usize = counts.iter().sum();
                let max = counts.iter().copied().max().unwrap_or(0);
                total += 1;
                if max as f64 >= 0.95 * class_total as f64 {
                    concentrated += 1;
                }
            }
        }
        assert!(
            concentrated as f64 >= 0.9 * total as f64,
            "only {concentrated}/{total} classes concentrated"
        );
    }

    #[test]
    fn skew_is_monotone_in_alpha() {
        let ds = synth_dataset(4, 50, 4, 2).unwrap();
        let mean_l1 = |alpha: f64| {
            (0..50)
                .map(|s| {
                    let p = dirichlet_partition(&ds, &PartitionSpec::new(alpha, 3, s).unwrap())
                        .unwrap();
                    mean_label_l1(&ds, &p)
                })
                .sum::<f64>()
                / 50.0
        };
        assert!(mean_l1(0.01) > mean_l1(1.0));
    }

    #[test]
    fn fewer_samples_than_clients_errors() {
        let ds = synth_dataset(2, 1, 4, 1).unwrap();
        let err = dirichlet_partition(&ds, &PartitionSpec::new(1.0, 5, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Partition(_)));
    }
}
