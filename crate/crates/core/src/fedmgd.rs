//! The two-stage generative protocol: an adversarial stage where a server
//! generator trains against per-client discriminators and classifiers with
//! winner-take-round selection by Realistic Score, then an enhancement stage
//! where the aggregated classifier is refined on consistency-filtered
//! synthetic samples.
//!
//! The F2U baseline reuses the adversarial stage but selects by discriminator
//! probability alone and drops the semantic term from the generator loss.

use rand::Rng;

use crate::config::{ExperimentConfig, LabelSamplingMode, StageMode};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fl::{
    aggregate, local_train, sample_clients, train_classifier, ClientState, LocalStrategy,
    RoundPlan, Simulation,
};
use crate::metrics::{quality_proxy, MetricsRecord, Stage};
use crate::models::{Classifier, CondGenerator};
use crate::params::{adam_step, AdamState, ParamVector};
use crate::seed::{self, derive_seed, purpose};
use crate::tensor::{argmax_rows, Tape, Tensor};

const PROB_CLAMP: f64 = 1e-7;

/// Per-client quality score for a synthetic batch: mean discriminator
/// probability minus mean classifier cross-entropy against the preset labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealisticScore {
    pub client_id: usize,
    pub disc_term: f64,
    pub xen_term: f64,
    pub value: f64,
}

impl RealisticScore {
    pub fn new(client_id: usize, disc_term: f64, xen_term: f64) -> Self {
        RealisticScore {
            client_id,
            disc_term,
            xen_term,
            value: disc_term - xen_term,
        }
    }
}

/// Draws the generator's preset labels.
#[derive(Debug, Clone)]
pub struct LabelSampler {
    pub mode: LabelSamplingMode,
    pub num_classes: usize,
    /// Per-client label histograms; required for client-proportional mode.
    pub histograms: Option<Vec<Vec<usize>>>,
}

impl LabelSampler {
    pub fn server_uniform(num_classes: usize) -> Self {
        LabelSampler {
            mode: LabelSamplingMode::ServerUniform,
            num_classes,
            histograms: None,
        }
    }

    pub fn client_proportional(num_classes: usize, histograms: Vec<Vec<usize>>) -> Result<Self> {
        if histograms.is_empty() || histograms.iter().any(|h| h.len() != num_classes) {
            return Err(Error::contract(
                "client-proportional sampling needs one histogram row per client".to_string(),
            ));
        }
        Ok(LabelSampler {
            mode: LabelSamplingMode::ClientProportional,
            num_classes,
            histograms: Some(histograms),
        })
    }

    /// I.i.d. draws: uniform over classes, or from the pooled client
    /// histogram. Deterministic per seed.
    pub fn sample(&self, batch: usize, seed: u64) -> Result<Vec<usize>> {
        if batch == 0 {
            return Err(Error::contract("label batch must be >= 1".to_string()));
        }
        let mut rng = seed::rng_from(seed, &[purpose::LABELS]);
        match self.mode {
            LabelSamplingMode::ServerUniform => Ok((0..batch)
                .map(|_| rng.random_range(0..self.num_classes))
                .collect()),
            LabelSamplingMode::ClientProportional => {
                let hists = self
                    .histograms
                    .as_ref()
                    .ok_or_else(|| Error::contract("missing client histograms".to_string()))?;
                let mut pooled = vec![0usize; self.num_classes];
                for row in hists {
                    for (slot, &c) in pooled.iter_mut().zip(row) {
                        *slot += c;
                    }
                }
                let total: usize = pooled.iter().sum();
                if total == 0 {
                    return Err(Error::contract("pooled label histogram is empty".to_string()));
                }
                Ok((0..batch)
                    .map(|_| {
                        let mut draw = rng.random_range(0..total);
                        for (class, &count) in pooled.iter().enumerate() {
                            if draw < count {
                                return class;
                            }
                            draw -= count;
                        }
                        self.num_classes - 1
                    })
                    .collect())
            }
        }
    }
}

/// Scores a synthetic batch with one client's discriminator and classifier.
pub fn realistic_score(
    client: &ClientState,
    images: &Tensor,
    preset_labels: &[usize],
) -> Result<RealisticScore> {
    if preset_labels.is_empty() {
        return Err(Error::contract("realistic_score on empty batch".to_string()));
    }
    let probs = client.discriminator.discriminate(images)?;
    let disc_term = probs.iter().sum::<f64>() / probs.len() as f64;
    let logits = client.classifier.logits(images)?;
    let mut tape = Tape::new();
    let lv = tape.constant(&logits);
    let ce = tape.cross_entropy(lv, preset_labels)?;
    let xen_term = tape.data_of(ce)[0];
    Ok(RealisticScore::new(client.id, disc_term, xen_term))
}

/// Argmax of the Realistic Score; ties break toward the smallest client id.
pub fn select_winner(scores: &[RealisticScore]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::contract("select_winner on empty score list".to_string()));
    }
    let mut best = &scores[0];
    for s in &scores[1..] {
        let better = s.value.total_cmp(&best.value);
        if better == std::cmp::Ordering::Greater
            || (better == std::cmp::Ordering::Equal && s.client_id < best.client_id)
        {
            best = s;
        }
    }
    Ok(best.client_id)
}

/// Forgiver-first selection: argmax of the mean discriminator probability
/// alone, ties toward the smallest client id.
pub fn f2u_select(disc_scores: &[(usize, f64)]) -> Result<usize> {
    if disc_scores.is_empty() {
        return Err(Error::contract("f2u_select on empty score list".to_string()));
    }
    let mut best = &disc_scores[0];
    for s in &disc_scores[1..] {
        let better = s.1.total_cmp(&best.1);
        if better == std::cmp::Ordering::Greater
            || (better == std::cmp::Ordering::Equal && s.0 < best.0)
        {
            best = s;
        }
    }
    Ok(best.0)
}

/// Keeps the positions whose preset label matches the classifier's argmax
/// prediction. May be empty; callers skip refinement then.
pub fn consistency_filter(
    model: &Classifier,
    images: &Tensor,
    preset_labels: &[usize],
) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    if n != preset_labels.len() || n == 0 {
        return Err(Error::contract(format!(
            "{n} images vs {} preset labels",
            preset_labels.len()
        )));
    }
    let numel: usize = images.shape()[1..].iter().product();
    let [_, c, h, w] = [n, images.shape()[1], images.shape()[2], images.shape()[3]];
    let mut kept = Vec::new();
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let chunk = Tensor::new(
            vec![end - start, c, h, w],
            images.data()[start * numel..end * numel].to_vec(),
        )?;
        let preds = argmax_rows(&model.logits(&chunk)?)?;
        for (offset, pred) in preds.into_iter().enumerate() {
            if pred == preset_labels[start + offset] {
                kept.push(start + offset);
            }
        }
    }
    Ok(kept)
}

/// Gathers rows of a `[B,...]` tensor into a new batch.
pub fn gather_rows(images: &Tensor, rows: &[usize]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::contract("gather_rows of empty selection".to_string()));
    }
    let numel: usize = images.shape()[1..].iter().product();
    let mut shape = images.shape().to_vec();
    shape[0] = rows.len();
    let mut data = Vec::with_capacity(rows.len() * numel);
    for &r in rows {
        data.extend_from_slice(&images.data()[r * numel..(r + 1) * numel]);
    }
    Tensor::new(shape, data)
}

/// Gathers rows and their labels.
pub fn gather_labeled(
    images: &Tensor,
    labels: &[usize],
    rows: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let batch = gather_rows(images, rows)?;
    let out_labels = rows.iter().map(|&r| labels[r]).collect();
    Ok((batch, out_labels))
}

/// How the adversarial stage picks the round winner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// Realistic Score: discriminator probability minus classifier
    /// cross-entropy (the full protocol).
    RealisticScore,
    /// Discriminator probability alone (F2U), with the semantic term also
    /// dropped from the generator loss.
    LargestDisc,
}

/// One adversarial-stage round's outcome.
#[derive(Debug, Clone)]
pub struct GanRoundReport {
    pub round: usize,
    pub winner: usize,
    pub scores: Vec<RealisticScore>,
    pub gen_loss: f64,
}

pub struct GanRoundCtx<'a> {
    pub round: usize,
    pub selected: &'a [usize],
    pub batch_size: usize,
    pub gan_batch: usize,
    pub rule: SelectionRule,
    pub seed: u64,
    /// Also score clients outside the round's selection (read-only), for
    /// score tracing.
    pub score_all: bool,
    pub threads: usize,
}

fn train_discriminator_epoch(
    client: &mut ClientState,
    ds: &LabeledDataset,
    synth_images: &Tensor,
    batch_size: usize,
    round: usize,
) -> Result<()> {
    use rand::seq::SliceRandom;
    let mut order = client.train_indices.clone();
    let mut rng = seed::rng_from(client.rng_seed, &[purpose::SHUFFLE, round as u64, 10]);
    order.shuffle(&mut rng);
    let synth_count = synth_images.shape()[0];
    let mut fake_cursor = 0usize;
    let disc = client.discriminator.clone();
    for chunk in order.chunks(batch_size) {
        let (real, _) = ds.batch(chunk)?;
        let take = batch_size.min(synth_count);
        let rows: Vec<usize> = (0..take).map(|i| (fake_cursor + i) % synth_count).collect();
        fake_cursor = (fake_cursor + take) % synth_count;
        let fake = gather_rows(synth_images, &rows)?;

        let mut tape = Tape::new();
        let rv = tape.constant(&real);
        let fv = tape.constant(&fake);
        let (p_real, leaves_r) = disc.forward_with(&mut tape, &client.discriminator.params, rv)?;
        let (p_fake, leaves_f) = disc.forward_with(&mut tape, &client.discriminator.params, fv)?;
        let real_c = tape.clamp(p_real, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let real_log = tape.ln(real_c)?;
        let real_loss = tape.mean_all(real_log);
        let real_loss = tape.neg(real_loss);
        let fake_rev = tape.one_minus(p_fake);
        let fake_c = tape.clamp(fake_rev, PROB_CLAMP, 1.0 - PROB_CLAMP);
        let fake_log = tape.ln(fake_c)?;
        let fake_loss = tape.mean_all(fake_log);
        let fake_loss = tape.neg(fake_loss);
        let loss = tape.add(real_loss, fake_loss)?;
        tape.backward(loss)?;
        {
            let mut targets: Vec<&mut Tensor> = client
                .discriminator
                .params
                .iter_mut()
                .map(|(_, t)| t)
                .collect();
            tape.accumulate_grads(&leaves_r, &mut targets)?;
            tape.accumulate_grads(&leaves_f, &mut targets)?;
        }
        adam_step(&mut client.discriminator.params, &mut client.d_opt)?;
        client.discriminator.params.zero_grads();
    }
    Ok(())
}

fn client_gan_pass(
    client: &mut ClientState,
    ds: &LabeledDataset,
    synth_images: &Tensor,
    preset_labels: &[usize],
    batch_size: usize,
    round: usize,
) -> Result<RealisticScore> {
    train_discriminator_epoch(client, ds, synth_images, batch_size, round)?;
    let arch = client.classifier.clone();
    let mut params = client.classifier.params.clone();
    train_classifier(
        &arch,
        &mut params,
        &mut client.c_opt,
        ds,
        &client.train_indices,
        1,
        batch_size,
        derive_seed(client.rng_seed, &[purpose::SHUFFLE, round as u64, 11]),
        None,
    )?;
    client.classifier.params = params;
    realistic_score(client, synth_images, preset_labels)
}

/// One round of the adversarial stage: synthesize a preset-label batch,
/// train each selected client's discriminator (real vs synthetic) and
/// classifier (local data), score, pick the winner, and apply one Adam step
/// to the generator against the winner's models.
pub fn gan_round(
    gen: &mut CondGenerator,
    g_opt: &mut AdamState,
    clients: &mut [ClientState],
    ds: &LabeledDataset,
    sampler: &LabelSampler,
    ctx: &GanRoundCtx,
) -> Result<GanRoundReport> {
    let label_seed = derive_seed(ctx.seed, &[purpose::LABELS, ctx.round as u64]);
    let noise_seed = derive_seed(ctx.seed, &[purpose::NOISE, ctx.round as u64]);
    let preset = sampler.sample(ctx.gan_batch, label_seed)?;
    let (synth_images, _) = gen.generate(&preset, noise_seed)?;

    // Per-client phase: independent across clients, may run in parallel.
    let mut selected_refs: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| ctx.selected.contains(&c.id))
        .collect();
    selected_refs.sort_by_key(|c| c.id);

    let mut scores: Vec<RealisticScore> = if ctx.threads <= 1 || selected_refs.len() <= 1 {
        selected_refs
            .into_iter()
            .map(|c| client_gan_pass(c, ds, &synth_images, &preset, ctx.batch_size, ctx.round))
            .collect::<Result<Vec<_>>>()?
    } else {
        let workers = ctx.threads.min(selected_refs.len());
        let mut buckets: Vec<Vec<&mut ClientState>> = (0..workers).map(|_| Vec::new()).collect();
        for (i, c) in selected_refs.into_iter().enumerate() {
            buckets[i % workers].push(c);
        }
        let synth_ref = &synth_images;
        let preset_ref = &preset;
        let outputs = std::thread::scope(|scope| {
            let handles: Vec<_> = buckets
                .into_iter()
                .map(|bucket| {
                    scope.spawn(move || {
                        bucket
                            .into_iter()
                            .map(|c| {
                                client_gan_pass(
                                    c,
                                    ds,
                                    synth_ref,
                                    preset_ref,
                                    ctx.batch_size,
                                    ctx.round,
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        outputs.into_iter().flatten().collect()
    };
    scores.sort_by_key(|s| s.client_id);

    let winner = match ctx.rule {
        SelectionRule::RealisticScore => select_winner(&scores)?,
        SelectionRule::LargestDisc => f2u_select(
            &scores
                .iter()
                .map(|s| (s.client_id, s.disc_term))
                .collect::<Vec<_>>(),
        )?,
    };

    // Generator step against the winner, on the same (z, labels) batch.
    let winner_state = clients
        .iter()
        .find(|c| c.id == winner)
        .expect("winner is a client");
    let input = gen.make_input(&preset, noise_seed)?;
    let mut tape = Tape::new();
    let iv = tape.constant(&input);
    let (fake, g_leaves) = gen.forward(&mut tape, iv)?;
    let (probs, _) = winner_state.discriminator.forward(&mut tape, fake)?;
    let clamped = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let logs = tape.ln(clamped)?;
    let adv = tape.mean_all(logs);
    let adv = tape.neg(adv);
    let loss = match ctx.rule {
        SelectionRule::RealisticScore => {
            let (logits, _) = winner_state.classifier.forward(&mut tape, fake)?;
            let xen = tape.cross_entropy(logits, &preset)?;
            tape.add(adv, xen)?
        }
        SelectionRule::LargestDisc => adv,
    };
    let gen_loss = tape.data_of(loss)[0];
    tape.backward(loss)?;
    {
        let mut targets: Vec<&mut Tensor> = gen.params.iter_mut().map(|(_, t)| t).collect();
        tape.accumulate_grads(&g_leaves, &mut targets)?;
    }
    adam_step(&mut gen.params, g_opt)?;
    gen.params.zero_grads();

    if ctx.score_all {
        for client in clients.iter() {
            if !ctx.selected.contains(&client.id) {
                scores.push(realistic_score(client, &synth_images, &preset)?);
            }
        }
        scores.sort_by_key(|s| s.client_id);
    }

    Ok(GanRoundReport {
        round: ctx.round,
        winner,
        scores,
        gen_loss,
    })
}

pub struct EnhanceCtx<'a> {
    pub round: usize,
    pub selected: &'a [usize],
    pub local_epochs: usize,
    pub batch_size: usize,
    pub refine_batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub threads: usize,
}

/// Outcome of one enhancement round.
pub struct EnhanceOutcome {
    pub global: ParamVector,
    pub survivors: usize,
}

/// One enhancement round: local training (from `global`, or from each
/// client's own parameters when `global` is `None` — the stage handoff),
/// weighted aggregation, synthetic refinement on consistency-filtered
/// samples, and broadcast to all clients.
pub fn enhance_round(
    arch: &Classifier,
    clients: &mut [ClientState],
    ds: &LabeledDataset,
    gen: &CondGenerator,
    sampler: &LabelSampler,
    global: Option<&ParamVector>,
    ctx: &EnhanceCtx,
) -> Result<EnhanceOutcome> {
    let plan = RoundPlan {
        round: ctx.round,
        selected: ctx.selected.to_vec(),
        local_epochs: ctx.local_epochs,
        batch_size: ctx.batch_size,
    };

    let mut selected_refs: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| ctx.selected.contains(&c.id))
        .collect();
    selected_refs.sort_by_key(|c| c.id);

    let run_one = |client: &mut ClientState| -> Result<(usize, ParamVector, usize)> {
        let anchor = match global {
            Some(g) => g.clone(),
            None => client.classifier.params.clone(),
        };
        let pv = local_train(client, ds, &anchor, &plan, LocalStrategy::Plain, ctx.lr)?;
        Ok((client.id, pv, client.n_samples))
    };

    let mut uploads: Vec<(usize, ParamVector, usize)> =
        if ctx.threads <= 1 || selected_refs.len() <= 1 {
            selected_refs
                .into_iter()
                .map(run_one)
                .collect::<Result<Vec<_>>>()?
        } else {
            let workers = ctx.threads.min(selected_refs.len());
            let mut buckets: Vec<Vec<&mut ClientState>> =
                (0..workers).map(|_| Vec::new()).collect();
            for (i, c) in selected_refs.into_iter().enumerate() {
                buckets[i % workers].push(c);
            }
            let outputs = std::thread::scope(|scope| {
                let handles: Vec<_> = buckets
                    .into_iter()
                    .map(|bucket| {
                        scope.spawn(move || {
                            bucket.into_iter().map(run_one).collect::<Result<Vec<_>>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker thread panicked"))
                    .collect::<Result<Vec<_>>>()
            })?;
            outputs.into_iter().flatten().collect()
        };
    uploads.sort_by_key(|(id, _, _)| *id);

    let weighted: Vec<(ParamVector, usize)> =
        uploads.into_iter().map(|(_, pv, n)| (pv, n)).collect();
    let aggregated = aggregate(&weighted)?;

    // Synthesize, filter against the aggregate, refine on survivors.
    let label_seed = derive_seed(ctx.seed, &[purpose::LABELS, ctx.round as u64, 2]);
    let noise_seed = derive_seed(ctx.seed, &[purpose::NOISE, ctx.round as u64, 2]);
    let preset = sampler.sample(ctx.refine_batch, label_seed)?;
    let (synth_images, _) = gen.generate(&preset, noise_seed)?;
    let agg_model = arch.with_params(aggregated.clone())?;
    let kept = consistency_filter(&agg_model, &synth_images, &preset)?;

    let refined = if kept.is_empty() {
        aggregated
    } else {
        let (images, labels) = gather_labeled(&synth_images, &preset, &kept)?;
        let synth_ds = LabeledDataset::new(images, labels, ds.num_classes())?;
        let indices: Vec<usize> = (0..synth_ds.len()).collect();
        let mut params = aggregated;
        let mut opt = AdamState::new(&params, ctx.lr);
        train_classifier(
            arch,
            &mut params,
            &mut opt,
            &synth_ds,
            &indices,
            1,
            ctx.batch_size,
            derive_seed(ctx.seed, &[purpose::REFINE, ctx.round as u64]),
            None,
        )?;
        params
    };

    // Download to every client.
    for client in clients.iter_mut() {
        client.classifier.params.load_values(&refined)?;
    }

    if std::env::var("FEDSIM_DEBUG_ENH").is_ok() {
        let agg_model = arch.with_params(refined.clone())?;
        let all: Vec<usize> = (0..ds.len()).collect();
        let preds = {
            let (batch, _) = ds.batch(&all[..40.min(ds.len())])?;
            agg_model.predict(&batch)?
        };
        let mut hist = vec![0usize; ds.num_classes()];
        for p in &preds {
            hist[*p] += 1;
        }
        let move_norm = match global {
            Some(g) => refined.l2_distance(g)?,
            None => -1.0,
        };
        eprintln!(
            "round {}: survivors {}, pred hist {:?}, |refined-anchor| {:.4}",
            ctx.round,
            kept.len(),
            hist,
            move_norm
        );
    }

    Ok(EnhanceOutcome {
        global: refined,
        survivors: kept.len(),
    })
}

/// Everything a full generative run produces.
pub struct FedMgdRun {
    pub records: Vec<MetricsRecord>,
    pub reports: Vec<GanRoundReport>,
    pub generator: CondGenerator,
    pub global: ParamVector,
}

fn build_sampler(
    mode: LabelSamplingMode,
    ds: &LabeledDataset,
    clients: &[ClientState],
    selected: &[usize],
) -> Result<LabelSampler> {
    match mode {
        LabelSamplingMode::ServerUniform => Ok(LabelSampler::server_uniform(ds.num_classes())),
        LabelSamplingMode::ClientProportional => {
            let histograms: Vec<Vec<usize>> = clients
                .iter()
                .filter(|c| selected.contains(&c.id))
                .map(|c| {
                    let mut all = c.train_indices.clone();
                    all.extend_from_slice(&c.local_test_indices);
                    ds.class_histogram(&all)
                })
                .collect();
            LabelSampler::client_proportional(ds.num_classes(), histograms)
        }
    }
}

/// Weighted aggregate of every client's current classifier, for evaluating
/// adversarial-stage progress (stage 1 maintains no global model).
fn snapshot_aggregate(clients: &[ClientState]) -> Result<ParamVector> {
    let uploads: Vec<(ParamVector, usize)> = clients
        .iter()
        .map(|c| (c.classifier.params.clone(), c.n_samples))
        .collect();
    aggregate(&uploads)
}

fn proxy_of(
    gen: &CondGenerator,
    ds: &LabeledDataset,
    gan_batch: usize,
    seed: u64,
    round: usize,
) -> Result<f64> {
    let b = gan_batch.max(ds.num_classes());
    quality_proxy(gen, ds, b, derive_seed(seed, &[0x9A, round as u64]))
}

fn run_generative(cfg: &ExperimentConfig, rule: SelectionRule, score_all: bool) -> Result<FedMgdRun> {
    let mut sim = Simulation::prepare(cfg)?;
    let mut gen = CondGenerator::new(
        sim.ds.num_classes(),
        cfg.resolution,
        cfg.noise_dim,
        derive_seed(cfg.seed, &[purpose::INIT, 0xA0]),
    )?;
    let gan_lr = cfg.gan_lr();
    for client in &mut sim.clients {
        client.d_opt = AdamState::new(&client.discriminator.params, gan_lr);
        client.c_opt = AdamState::new(&client.classifier.params, gan_lr);
    }
    let mut g_opt = AdamState::new(&gen.params, gan_lr);
    let mut records = Vec::new();
    let mut reports = Vec::new();

    let one_stage = rule == SelectionRule::RealisticScore && cfg.fedmgd.mode == StageMode::OneStage;
    let gan_rounds = cfg.fedmgd.gan_rounds;
    let enhance_rounds = if rule == SelectionRule::LargestDisc {
        0
    } else if one_stage {
        0
    } else {
        cfg.fedmgd.enhance_rounds
    };
    let total_rounds = gan_rounds + enhance_rounds;

    // Round 0: initial snapshot.
    let snap = snapshot_aggregate(&sim.clients)?;
    let rec = sim
        .evaluate(&snap, 0, Stage::Gan, false)?
        .with_quality(proxy_of(&gen, &sim.ds, cfg.fedmgd.gan_batch, cfg.seed, 0)?);
    records.push(rec);

    let mut global = sim.arch.params.clone();

    // Adversarial stage (every round in one-stage mode).
    for t in 1..=gan_rounds {
        let selected = sample_clients(
            cfg.num_clients,
            cfg.client_fraction,
            derive_seed(cfg.seed, &[purpose::SAMPLE_CLIENTS, t as u64]),
        );
        let sampler = build_sampler(cfg.fedmgd.label_sampling, &sim.ds, &sim.clients, &selected)?;
        let ctx = GanRoundCtx {
            round: t,
            selected: &selected,
            batch_size: cfg.batch_size,
            gan_batch: cfg.fedmgd.gan_batch,
            rule,
            seed: cfg.seed,
            score_all,
            threads: cfg.threads,
        };
        let report = gan_round(&mut gen, &mut g_opt, &mut sim.clients, &sim.ds, &sampler, &ctx)
            .map_err(|e| e.in_round(t, "fedmgd"))?;

        if one_stage {
            // Fused update: aggregate, refine, and broadcast in the same
            // round, sharing the round's client selection.
            let ectx = EnhanceCtx {
                round: t,
                selected: &selected,
                local_epochs: cfg.local_epochs,
                batch_size: cfg.batch_size,
                refine_batch: cfg.fedmgd.refine_batch,
                lr: cfg.lr,
                seed: cfg.seed,
                threads: cfg.threads,
            };
            let outcome = enhance_round(
                &sim.arch,
                &mut sim.clients,
                &sim.ds,
                &gen,
                &sampler,
                Some(&global),
                &ectx,
            )
            .map_err(|e| e.in_round(t, "fedmgd"))?;
            global = outcome.global;
            let rec = sim
                .evaluate(
                    &global,
                    t,
                    Stage::Enhance,
                    Simulation::per_client_round(t, total_rounds),
                )?
                .with_winner(report.winner)
                .with_quality(proxy_of(&gen, &sim.ds, cfg.fedmgd.gan_batch, cfg.seed, t)?);
            records.push(rec);
        } else {
            let snap = snapshot_aggregate(&sim.clients)?;
            let rec = sim
                .evaluate(&snap, t, Stage::Gan, false)?
                .with_winner(report.winner)
                .with_quality(proxy_of(&gen, &sim.ds, cfg.fedmgd.gan_batch, cfg.seed, t)?);
            records.push(rec);
        }
        reports.push(report);
    }

    // Enhancement stage (two-stage mode only). Clients enter with their
    // stage-1 classifiers; the first round trains from those directly.
    if enhance_rounds > 0 {
        let stage_proxy = proxy_of(&gen, &sim.ds, cfg.fedmgd.gan_batch, cfg.seed, gan_rounds)?;
        for k in 1..=enhance_rounds {
            let t = gan_rounds + k;
            let selected = sample_clients(
                cfg.num_clients,
                cfg.client_fraction,
                derive_seed(cfg.seed, &[purpose::SAMPLE_CLIENTS, t as u64]),
            );
            let sampler =
                build_sampler(cfg.fedmgd.label_sampling, &sim.ds, &sim.clients, &selected)?;
            let ctx = EnhanceCtx {
                round: t,
                selected: &selected,
                local_epochs: cfg.local_epochs,
                batch_size: cfg.batch_size,
                refine_batch: cfg.fedmgd.refine_batch,
                lr: cfg.lr,
                seed: cfg.seed,
                threads: cfg.threads,
            };
            let anchor = if k == 1 { None } else { Some(&global) };
            let outcome = enhance_round(
                &sim.arch,
                &mut sim.clients,
                &sim.ds,
                &gen,
                &sampler,
                anchor,
                &ctx,
            )
            .map_err(|e| e.in_round(t, "fedmgd"))?;
            global = outcome.global;
            records.push(
                sim.evaluate(
                    &global,
                    t,
                    Stage::Enhance,
                    Simulation::per_client_round(t, total_rounds),
                )?
                .with_quality(stage_proxy),
            );
        }
    } else if !one_stage {
        // Pure generative baseline: the reported global is the final
        // classifier snapshot.
        global = snapshot_aggregate(&sim.clients)?;
    }

    Ok(FedMgdRun {
        records,
        reports,
        generator: gen,
        global,
    })
}

/// The full two-stage protocol (or its one-stage ablation, per config).
pub fn run_fedmgd_full(cfg: &ExperimentConfig, score_all: bool) -> Result<FedMgdRun> {
    run_generative(cfg, SelectionRule::RealisticScore, score_all)
}

pub fn run_fedmgd(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    Ok(run_fedmgd_full(cfg, false)?.records)
}

/// F2U baseline: adversarial stage only, forgiver-first selection.
pub fn run_f2u_full(cfg: &ExperimentConfig, score_all: bool) -> Result<FedMgdRun> {
    run_generative(cfg, SelectionRule::LargestDisc, score_all)
}

pub fn run_f2u(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    Ok(run_f2u_full(cfg, false)?.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetConfig;
    use crate::data::synth_dataset;

    #[test]
    fn realistic_score_is_difference_of_terms() {
        let s = RealisticScore::new(3, 0.9, 0.3);
        assert!((s.value - 0.6).abs() < 1e-15);
        assert_eq!(s.value, s.disc_term - s.xen_term);
    }

    #[test]
    fn untrained_components_give_half_minus_ln_c() {
        // Zeroed discriminator outputs 0.5; zeroed classifier head gives a
        // uniform softmax, so cross-entropy is ln(10).
        let cfg = ExperimentConfig {
            dataset: DatasetConfig::Synth {
                classes: 10,
                per_class: 4,
            },
            num_clients: 2,
            alpha: 1e6,
            seed: 3,
            ..ExperimentConfig::default()
        };
        let mut sim = Simulation::prepare(&cfg).unwrap();
        for (_, t) in sim.clients[0].discriminator.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        for (_, t) in sim.clients[0].classifier.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let (images, labels) = sim.ds.batch(&[0, 1, 2, 3]).unwrap();
        let s = realistic_score(&sim.clients[0], &images, &labels).unwrap();
        assert!((s.disc_term - 0.5).abs() < 1e-12);
        assert!((s.xen_term - 10f64.ln()).abs() < 1e-12);
        assert!((s.value - (0.5 - 10f64.ln())).abs() < 1e-12);
        assert!((s.value + 1.8026).abs() < 1e-4);
    }

    #[test]
    fn select_winner_argmax_and_ties() {
        let scores = vec![
            RealisticScore::new(0, 0.5, 0.4),
            RealisticScore::new(1, 0.95, 0.05),
            RealisticScore::new(2, 0.6, 0.3),
        ];
        assert_eq!(select_winner(&scores).unwrap(), 1);

        let tied = vec![
            RealisticScore::new(2, 0.5, 0.0),
            RealisticScore::new(0, 0.5, 0.0),
            RealisticScore::new(1, 0.5, 0.0),
        ];
        assert_eq!(select_winner(&tied).unwrap(), 0);
        assert!(select_winner(&[]).is_err());
    }

    #[test]
    fn select_winner_shift_invariant() {
        let base = vec![
            RealisticScore::new(0, 0.1, 0.0),
            RealisticScore::new(1, 0.9, 0.0),
            RealisticScore::new(2, 0.3, 0.0),
        ];
        let shifted: Vec<RealisticScore> = base
            .iter()
            .map(|s| RealisticScore::new(s.client_id, s.disc_term, s.xen_term - 7.5))
            .collect();
        assert_eq!(
            select_winner(&base).unwrap(),
            select_winner(&shifted).unwrap()
        );
    }

    #[test]
    fn f2u_select_argmax_and_ties() {
        assert_eq!(f2u_select(&[(0, 0.2), (1, 0.8)]).unwrap(), 1);
        assert_eq!(f2u_select(&[(1, 0.5), (0, 0.5)]).unwrap(), 0);
    }

    #[test]
    fn f2u_and_realistic_score_can_diverge() {
        // Client 0: forgiving discriminator but semantically wrong; client 1
        // the reverse. F2U follows the discriminator, the Realistic Score
        // penalizes the cross-entropy.
        let scores = vec![
            RealisticScore::new(0, 0.9, 2.0),
            RealisticScore::new(1, 0.6, 0.1),
        ];
        let f2u = f2u_select(&scores.iter().map(|s| (s.client_id, s.disc_term)).collect::<Vec<_>>())
            .unwrap();
        let mgd = select_winner(&scores).unwrap();
        assert_eq!(f2u, 0);
        assert_eq!(mgd, 1);
        assert_ne!(f2u, mgd);
    }

    #[test]
    fn server_uniform_sampling_is_balanced() {
        let sampler = LabelSampler::server_uniform(4);
        let labels = sampler.sample(40_000, 5).unwrap();
        let mut counts = [0usize; 4];
        for l in labels {
            counts[l] += 1;
        }
        let sigma = (40_000.0f64 * 0.25 * 0.75).sqrt();
        for &c in &counts {
            assert!((c as f64 - 10_000.0).abs() <= 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn degenerate_histogram_yields_single_class() {
        let sampler = LabelSampler::client_proportional(3, vec![vec![7, 0, 0], vec![3, 0, 0]])
            .unwrap();
        let labels = sampler.sample(100, 1).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let sampler = LabelSampler::server_uniform(5);
        assert_eq!(sampler.sample(64, 9).unwrap(), sampler.sample(64, 9).unwrap());
    }

    #[test]
    fn empty_pooled_histogram_is_error() {
        let sampler = LabelSampler::client_proportional(2, vec![vec![0, 0]]).unwrap();
        assert!(sampler.sample(4, 0).is_err());
    }

    #[test]
    fn consistency_filter_full_and_empty() {
        let ds = synth_dataset(4, 6, 8, 2).unwrap();
        let mut clf = Classifier::new(4, 8, 1).unwrap();
        // Bias the head so class 0 always wins.
        for (_, t) in clf.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        clf.params.get_mut("fc.b").unwrap().data_mut()[0] = 1.0;
        let (images, _) = ds.batch(&(0..8).collect::<Vec<_>>()).unwrap();

        let all_zero = vec![0usize; 8];
        assert_eq!(
            consistency_filter(&clf, &images, &all_zero).unwrap().len(),
            8
        );
        let all_one = vec![1usize; 8];
        assert!(consistency_filter(&clf, &images, &all_one).unwrap().is_empty());
    }

    #[test]
    fn consistency_filter_random_presets_keep_about_one_over_c() {
        // Presets independent of the classifier: match probability is 1/C
        // regardless of what the model predicts.
        let ds = synth_dataset(4, 64, 8, 6).unwrap();
        let clf = Classifier::new(4, 8, 33).unwrap();
        let indices: Vec<usize> = (0..256).collect();
        let (images, _) = ds.batch(&indices).unwrap();
        let sampler = LabelSampler::server_uniform(4);
        let presets = sampler.sample(256, 17).unwrap();
        let kept = consistency_filter(&clf, &images, &presets).unwrap();
        let sigma = (256.0f64 * 0.25 * 0.75).sqrt();
        assert!(
            (kept.len() as f64 - 64.0).abs() <= 4.0 * sigma,
            "kept {} of 256",
            kept.len()
        );
        // Survivors satisfy the predicate and are unique.
        let preds = clf.predict(&images).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &k in &kept {
            assert_eq!(preds[k], presets[k]);
            assert!(seen.insert(k));
        }
    }
}
