//! Evaluation and emission: global accuracy, per-client fairness, the
//! generative quality proxy, and CSV / JSON-lines output.
//!
//! Both emission formats carry the same seven columns
//! (`round,stage,global_acc,fairness_std,quality_proxy,winner_id,wall_ms`);
//! per-client accuracy lists stay in memory and feed `fairness_std` only.
//! Reals are written with nine significant digits in both formats so the
//! two emissions of one record list parse back identically.

use serde::{Deserialize, Serialize, Serializer};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{Classifier, CondGenerator};
use crate::tensor::Tensor;

/// Which phase of a run produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gan,
    Enhance,
    Baseline,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Gan => "gan",
            Stage::Enhance => "enhance",
            Stage::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gan" => Ok(Stage::Gan),
            "enhance" => Ok(Stage::Enhance),
            "baseline" => Ok(Stage::Baseline),
            other => Err(Error::format("stage", format!("unknown stage `{other}`"))),
        }
    }
}

/// One row of per-round results.
///
/// `fairness_std` is present exactly when `per_client_acc` is, and equals its
/// population standard deviation. `wall_ms` is a schema slot for wall-clock
/// profiling; deterministic runs (the only mode this crate ships) write 0 so
/// that identical configs produce bit-identical record streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub stage: Stage,
    #[serde(serialize_with = "ser_f64_sig9")]
    pub global_acc: f64,
    #[serde(skip)]
    pub per_client_acc: Option<Vec<f64>>,
    #[serde(serialize_with = "ser_opt_f64_sig9")]
    pub fairness_std: Option<f64>,
    #[serde(serialize_with = "ser_opt_f64_sig9")]
    pub quality_proxy: Option<f64>,
    pub winner_id: Option<usize>,
    pub wall_ms: u64,
}

impl MetricsRecord {
    pub fn new(round: usize, stage: Stage, global_acc: f64) -> Self {
        MetricsRecord {
            round,
            stage,
            global_acc,
            per_client_acc: None,
            fairness_std: None,
            quality_proxy: None,
            winner_id: None,
            wall_ms: 0,
        }
    }

    /// Attaches per-client accuracies, deriving `fairness_std` so the
    /// present-iff invariant holds by construction.
    pub fn with_per_client(mut self, accs: Vec<f64>) -> Result<Self> {
        self.fairness_std = Some(fairness_std(&accs)?);
        self.per_client_acc = Some(accs);
        Ok(self)
    }

    pub fn with_quality(mut self, proxy: f64) -> Self {
        self.quality_proxy = Some(proxy);
        self
    }

    pub fn with_winner(mut self, winner: usize) -> Self {
        self.winner_id = Some(winner);
        self
    }
}

// ── scalar metrics ───────────────────────────────────────────────────

/// Fraction of argmax-correct predictions.
pub fn accuracy_from_predictions(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of a classifier over a dataset index subset.
pub fn global_accuracy(clf: &Classifier, ds: &LabeledDataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::contract("empty test set".to_string()));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (batch, labels) = ds.batch(chunk)?;
        let preds = clf.predict(&batch)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Population standard deviation.
pub fn fairness_std(per_client_acc: &[f64]) -> Result<f64> {
    if per_client_acc.is_empty() {
        return Err(Error::contract("fairness_std of empty list".to_string()));
    }
    let n = per_client_acc.len() as f64;
    let mean = per_client_acc.iter().sum::<f64>() / n;
    let var = per_client_acc
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    Ok(var.sqrt())
}

// ── quality proxy ────────────────────────────────────────────────────

/// Anything that can synthesize a labeled image batch; lets tests swap the
/// generator for a replay oracle.
pub trait ImageSource {
    fn synthesize(&self, labels: &[usize], seed: u64) -> Result<Tensor>;
}

impl ImageSource for CondGenerator {
    fn synthesize(&self, labels: &[usize], seed: u64) -> Result<Tensor> {
        Ok(self.generate(labels, seed)?.0)
    }
}

fn class_moments(data: &[f64], count: usize, numel: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; numel];
    for item in 0..count {
        for (slot, &v) in mean.iter_mut().zip(&data[item * numel..(item + 1) * numel]) {
            *slot += v;
        }
    }
    for slot in mean.iter_mut() {
        *slot /= count as f64;
    }
    let mut var = vec![0.0; numel];
    for item in 0..count {
        for px in 0..numel {
            let d = data[item * numel + px] - mean[px];
            var[px] += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / count as f64).sqrt()).collect();
    (mean, std)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Class-conditional pixel-moment distance between generated and reference
/// data: mean over classes of `‖μ_gen - μ_ref‖₂ + ‖σ_gen - σ_ref‖₂`.
/// Lower is better; zero iff per-class moments match exactly.
pub fn quality_proxy(
    source: &dyn ImageSource,
    reference: &LabeledDataset,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let classes = reference.num_classes();
    if batch < classes {
        return Err(Error::contract(format!(
            "quality proxy batch {batch} smaller than {classes} classes"
        )));
    }
    let all: Vec<usize> = (0..reference.len()).collect();
    let ref_hist = reference.class_histogram(&all);
    if let Some(missing) = ref_hist.iter().position(|&c| c == 0) {
        return Err(Error::contract(format!(
            "reference dataset has no samples of class {missing}"
        )));
    }

    // Uniform label coverage: round-robin over classes.
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
    let generated = source.synthesize(&labels, seed)?;
    let numel: usize = generated.shape()[1..].iter().product();
    if numel != reference.item_numel() {
        return Err(Error::dimension(format!(
            "generated item size {numel} vs reference {}",
            reference.item_numel()
        )));
    }

    let mut total = 0.0;
    for class in 0..classes {
        let gen_items: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let mut gen_data = Vec::with_capacity(gen_items.len() * numel);
        for &i in &gen_items {
            gen_data.extend_from_slice(&generated.data()[i * numel..(i + 1) * numel]);
        }
        let (gmu, gsd) = class_moments(&gen_data, gen_items.len(), numel);

        let ref_items: Vec<usize> = reference
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let mut ref_data = Vec::with_capacity(ref_items.len() * numel);
        for &i in &ref_items {
            ref_data.extend_from_slice(&reference.images().data()[i * numel..(i + 1) * numel]);
        }
        let (rmu, rsd) = class_moments(&ref_data, ref_items.len(), numel);

        total += l2(&gmu, &rmu) + l2(&gsd, &rsd);
    }
    Ok(total / classes as f64)
}

// ── formatting and emission ──────────────────────────────────────────

pub const CSV_HEADER: &str = "round,stage,global_acc,fairness_std,quality_proxy,winner_id,wall_ms";

/// Formats with nine significant digits, fixed-point.
pub fn format_sig9(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0.000000000".to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// The f64 closest to the nine-significant-digit decimal rendering of `x`.
pub fn round_sig9(x: f64) -> f64 {
    format_sig9(x).parse().unwrap_or(x)
}

fn ser_f64_sig9<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig9(*x))
}

fn ser_opt_f64_sig9<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match x {
        Some(v) => s.serialize_some(&round_sig9(*v)),
        None => s.serialize_none(),
    }
}

/// Renders records as CSV with the exact pinned header. Absent optionals
/// become empty fields.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let fairness = r.fairness_std.map(format_sig9).unwrap_or_default();
        let proxy = r.quality_proxy.map(format_sig9).unwrap_or_default();
        let winner = r.winner_id.map(|w| w.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.stage.as_str(),
            format_sig9(r.global_acc),
            fairness,
            proxy,
            winner,
            r.wall_ms
        ));
    }
    out
}

/// One JSON object per line, same keys as the CSV columns.
pub fn to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| Error::format("jsonl", e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

fn parse_csv_field<T: std::str::FromStr>(field: &str, name: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::format(name, format!("cannot parse `{field}`")))
}

/// Parses CSV produced by [`to_csv`]. Per-client lists are not part of the
/// wire format, so parsed records carry `per_client_acc: None`.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::format(
                "csv.header",
                format!("expected `{CSV_HEADER}`, got {other:?}"),
            ))
        }
    }
    let mut records = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::format(
                "csv.row",
                format!("expected 7 fields, got {}", fields.len()),
            ));
        }
        let opt_f64 = |f: &str, name: &str| -> Result<Option<f64>> {
            if f.is_empty() {
                Ok(None)
            } else {
                parse_csv_field(f, name).map(Some)
            }
        };
        records.push(MetricsRecord {
            round: parse_csv_field(fields[0], "round")?,
            stage: fields[1].parse()?,
            global_acc: parse_csv_field(fields[2], "global_acc")?,
            per_client_acc: None,
            fairness_std: opt_f64(fields[3], "fairness_std")?,
            quality_proxy: opt_f64(fields[4], "quality_proxy")?,
            winner_id: if fields[5].is_empty() {
                None
            } else {
                Some(parse_csv_field(fields[5], "winner_id")?)
            },
            wall_ms: parse_csv_field(fields[6], "wall_ms")?,
        });
    }
    Ok(records)
}

/// Parses JSON-lines produced by [`to_jsonl`].
pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| serde_json::from_str(line).map_err(|e| Error::format("jsonl", e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn accuracy_oracle_cases() {
        // Always-correct predictions.
        assert_eq!(
            accuracy_from_predictions(&[0, 1, 2], &[0, 1, 2]).unwrap(),
            1.0
        );
        // Constant-class predictor on a balanced set: exactly 1/C.
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let preds = vec![2usize; 40];
        assert_eq!(accuracy_from_predictions(&preds, &labels).unwrap(), 0.25);
    }

    #[test]
    fn random_predictions_near_one_over_c() {
        // Uniform-random predictions, C=10, N=10^4: within 4 sigma of 0.1.
        let mut rng = seed::rng_from(7, &[1]);
        let labels: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        let preds: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..10)).collect();
        let acc = accuracy_from_predictions(&preds, &labels).unwrap();
        let sigma = (0.1 * 0.9 / 10_000.0f64).sqrt();
        assert!((acc - 0.1).abs() <= 4.0 * sigma, "acc {acc}");
    }

    #[test]
    fn fairness_std_oracles() {
        assert!(fairness_std(&[0.7, 0.7, 0.7]).unwrap() < 1e-15);
        assert_eq!(fairness_std(&[0.0, 1.0]).unwrap(), 0.5);
        // mean .5, devs [-.3,-.1,.4], sqsum .26, /3, sqrt
        let v = fairness_std(&[0.2, 0.4, 0.9]).unwrap();
        assert!((v - 0.2943920288775949).abs() < 1e-12);
        assert!((v - 0.294392).abs() < 1e-6);
    }

    #[test]
    fn fairness_std_shift_invariant_and_singleton() {
        assert_eq!(fairness_std(&[0.42]).unwrap(), 0.0);
        let base = fairness_std(&[0.1, 0.5, 0.8]).unwrap();
        let shifted = fairness_std(&[0.2, 0.6, 0.9]).unwrap();
        assert!((base - shifted).abs() < 1e-12);
        assert!(fairness_std(&[]).is_err());
    }

    /// Replays reference samples of the requested class, cycling from an
    /// offset given by the seed.
    struct Replay<'a> {
        ds: &'a crate::data::LabeledDataset,
    }

    impl ImageSource for Replay<'_> {
        fn synthesize(&self, labels: &[usize], seed: u64) -> crate::error::Result<Tensor> {
            let numel = self.ds.item_numel();
            let [c, h, w] = self.ds.item_shape();
            let mut data = Vec::with_capacity(labels.len() * numel);
            let mut cursor = vec![seed as usize; self.ds.num_classes()];
            for &label in labels {
                let pool: Vec<usize> = self
                    .ds
                    .labels()
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == label)
                    .map(|(i, _)| i)
                    .collect();
                let pick = pool[cursor[label] % pool.len()];
                cursor[label] += 1;
                data.extend_from_slice(
                    &self.ds.images().data()[pick * numel..(pick + 1) * numel],
                );
            }
            Tensor::new(vec![labels.len(), c, h, w], data)
        }
    }

    #[test]
    fn proxy_replay_oracle_near_zero() {
        let ds = synth_dataset(4, 10, 8, 3).unwrap();
        let replay = Replay { ds: &ds };
        let proxy = quality_proxy(&replay, &ds, 10 * ds.len(), 0).unwrap();
        assert!(proxy <= 0.05, "replay proxy should vanish, got {proxy}");
    }

    /// Emits all-zero images regardless of labels.
    struct Zeros {
        numel: usize,
        side: usize,
    }

    impl ImageSource for Zeros {
        fn synthesize(&self, labels: &[usize], _seed: u64) -> crate::error::Result<Tensor> {
            Tensor::new(
                vec![labels.len(), 1, self.side, self.side],
                vec![0.0; labels.len() * self.numel],
            )
        }
    }

    #[test]
    fn proxy_constant_zero_closed_form() {
        let ds = synth_dataset(3, 8, 8, 5).unwrap();
        let zeros = Zeros { numel: 64, side: 8 };
        let proxy = quality_proxy(&zeros, &ds, 30, 1).unwrap();

        // Closed form: generated moments are exactly zero, so the proxy is
        // the mean over classes of ‖μ_ref‖ + ‖σ_ref‖, computed independently.
        let mut expected = 0.0;
        for class in 0..3 {
            let items: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
            let mut mu = vec![0.0; 64];
            for &i in &items {
                for (m, &v) in mu.iter_mut().zip(&ds.images().data()[i * 64..(i + 1) * 64]) {
                    *m += v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= items.len() as f64);
            let mut var = vec![0.0; 64];
            for &i in &items {
                for px in 0..64 {
                    let d = ds.images().data()[i * 64 + px] - mu[px];
                    var[px] += d * d;
                }
            }
            let sd: Vec<f64> = var.iter().map(|v| (v / items.len() as f64).sqrt()).collect();
            expected += mu.iter().map(|m| m * m).sum::<f64>().sqrt()
                + sd.iter().map(|s| s * s).sum::<f64>().sqrt();
        }
        expected /= 3.0;
        assert!((proxy - expected).abs() < 1e-12, "{proxy} vs {expected}");
        assert!(proxy > 0.0);
    }

    #[test]
    fn proxy_is_deterministic_and_validates() {
        let ds = synth_dataset(3, 5, 8, 9).unwrap();
        let gen = crate::models::CondGenerator::new(3, 8, 8, 1).unwrap();
        let a = quality_proxy(&gen, &ds, 12, 4).unwrap();
        let b = quality_proxy(&gen, &ds, 12, 4).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
        assert!(quality_proxy(&gen, &ds, 2, 4).is_err(), "B < C must fail");
    }

    #[test]
    fn csv_header_only_for_empty_records() {
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn absent_optionals_are_empty_fields() {
        let rec = MetricsRecord::new(3, Stage::Baseline, 0.5);
        let csv = to_csv(&[rec]);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "3,baseline,0.500000000,,,,0");
    }

    #[test]
    fn jsonl_round_trip_equal() {
        let rec = MetricsRecord::new(2, Stage::Enhance, 0.75)
            .with_quality(0.125)
            .with_winner(1);
        let text = to_jsonl(&[rec.clone()]).unwrap();
        let parsed = parse_jsonl(&text).unwrap();
        assert_eq!(parsed, vec![rec]);
    }

    #[test]
    fn csv_and_jsonl_parse_to_identical_lists() {
        let records = vec![
            MetricsRecord::new(0, Stage::Gan, 1.0 / 3.0).with_winner(2),
            MetricsRecord::new(1, Stage::Enhance, 0.6833333333333333)
                .with_per_client(vec![0.5, 0.7, 0.85])
                .unwrap()
                .with_quality(2.0 / 7.0),
            MetricsRecord::new(2, Stage::Baseline, 0.9999999999),
        ];
        let from_csv = parse_csv(&to_csv(&records)).unwrap();
        let from_jsonl = parse_jsonl(&to_jsonl(&records).unwrap()).unwrap();
        assert_eq!(from_csv, from_jsonl);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.85), "0.850000000");
        assert_eq!(format_sig9(0.0), "0.000000000");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(123.456), "123.456000");
        assert_eq!(format_sig9(-0.25), "-0.250000000");
        assert_eq!(format_sig9(2.0 / 3.0), "0.666666667");
    }
}
