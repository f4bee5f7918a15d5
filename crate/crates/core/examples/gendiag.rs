// Scratch: isolate generator learnability (deleted before release).
use fedsim_core::data::synth_dataset;
use fedsim_core::fl::train_classifier;
use fedsim_core::metrics::quality_proxy;
use fedsim_core::models::{Classifier, CondGenerator, Discriminator};
use fedsim_core::params::{adam_step, AdamState};
use fedsim_core::seed::rng_from;
use fedsim_core::tensor::{Tape, Tensor};
use rand::Rng;

fn class_means(ds: &fedsim_core::data::LabeledDataset) -> Vec<Vec<f64>> {
    let numel = ds.item_numel();
    let mut sums = vec![vec![0.0; numel]; ds.num_classes()];
    let mut counts = vec![0usize; ds.num_classes()];
    for i in 0..ds.len() {
        let c = ds.labels()[i];
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(&ds.images().data()[i * numel..(i + 1) * numel]) {
            *s += v;
        }
    }
    for (c, row) in sums.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= counts[c] as f64;
        }
    }
    sums
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "reg".into());
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.005);
    let steps: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(200);

    let ds = synth_dataset(4, 50, 8, 0).unwrap();
    let mut gen = CondGenerator::new(4, 8, 16, 7).unwrap();
    let mut g_opt = AdamState::new(&gen.params, lr);
    let means = class_means(&ds);

    if mode == "reg" {
        // Supervised bound: L2-regress G(z|y) onto the class mean image.
        for step in 0..steps {
            let mut rng = rng_from(step as u64, &[1]);
            let labels: Vec<usize> = (0..64).map(|_| rng.random_range(0..4)).collect();
            let input = gen.make_input(&labels, step as u64).unwrap();
            let mut target = Vec::with_capacity(64 * 64);
            for &l in &labels {
                target.extend_from_slice(&means[l]);
            }
            let mut tape = Tape::new();
            let iv = tape.constant(&input);
            let (img, leaves) = gen.forward(&mut tape, iv).unwrap();
            let flat = tape.reshape(img, vec![64, 64]).unwrap();
            let tv = tape
                .constant_from(vec![64, 64], target)
                .unwrap();
            let diff = tape.sub(flat, tv).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.mean_all(sq);
            tape.backward(loss).unwrap();
            let mut targets: Vec<&mut Tensor> = gen.params.iter_mut().map(|(_, t)| t).collect();
            tape.accumulate_grads(&leaves, &mut targets).unwrap();
            adam_step(&mut gen.params, &mut g_opt).unwrap();
            gen.params.zero_grads();
            if step % 50 == 0 || step + 1 == steps {
                let p = quality_proxy(&gen, &ds, 64, 0).unwrap();
                let l = tape.data_of(loss)[0];
                println!("step {step:4} l2 {l:.4} proxy {p:.3}");
            }
        }
    } else {
        // Fixed-opponent GAN: D pre-trained on real-vs-initial-G, C central.
        let mut clf = Classifier::new(4, 8, 3).unwrap();
        let c_epochs: usize = std::env::var("FEDSIM_C_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
        let c_lr: f64 = std::env::var("FEDSIM_C_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.01);
        let mut c_params = clf.params.clone();
        let mut c_opt = AdamState::new(&c_params, c_lr);
        let all: Vec<usize> = (0..ds.len()).collect();
        train_classifier(&clf, &mut c_params, &mut c_opt, &ds, &all, c_epochs, 32, 5, None).unwrap();
        clf.params = c_params;

        let d_ch: usize = std::env::var("FEDSIM_D_CH").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
        let mut disc = Discriminator::with_channels(8, d_ch, 5).unwrap();
        let d_lr: f64 = std::env::var("FEDSIM_D_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(lr);
        let d_steps: usize = std::env::var("FEDSIM_D_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
        let inoise: f64 = std::env::var("FEDSIM_INOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
        let mut d_opt = AdamState::new(&disc.params, d_lr);

        for step in 0..steps {
            // D steps on real vs current fake.
            for sub in 0..d_steps {
            let mut rng = rng_from(step as u64, &[2, sub as u64]);
            let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..4)).collect();
            let real_idx: Vec<usize> = (0..32).map(|_| rng.random_range(0..ds.len())).collect();
            let (real, _) = ds.batch(&real_idx).unwrap();
            let (mut fake, _) = gen.generate(&labels, 1000 + (step * 31 + sub) as u64).unwrap();
            if inoise > 0.0 {
                let n = fake.numel();
                let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-inoise..inoise)).collect();
                let mut d = fake.data().to_vec();
                for (a, b) in d.iter_mut().zip(&noise) { *a = (*a + b).clamp(-1.0, 1.0); }
                fake = Tensor::new(fake.shape().to_vec(), d).unwrap();
            }
            let mut tape = Tape::new();
            let rv = tape.constant(&real);
            let fv = tape.constant(&fake);
            let (pr, lr_) = disc.forward(&mut tape, rv).unwrap();
            let (pf, lf_) = disc.forward(&mut tape, fv).unwrap();
            let prc = tape.clamp(pr, 1e-7, 1.0 - 1e-7);
            let prl = tape.ln(prc).unwrap();
            let rloss = tape.mean_all(prl);
            let rloss = tape.neg(rloss);
            let pfr = tape.one_minus(pf);
            let pfc = tape.clamp(pfr, 1e-7, 1.0 - 1e-7);
            let pfl = tape.ln(pfc).unwrap();
            let floss = tape.mean_all(pfl);
            let floss = tape.neg(floss);
            let dloss = tape.add(rloss, floss).unwrap();
            tape.backward(dloss).unwrap();
            {
                let mut targets: Vec<&mut Tensor> =
                    disc.params.iter_mut().map(|(_, t)| t).collect();
                tape.accumulate_grads(&lr_, &mut targets).unwrap();
                tape.accumulate_grads(&lf_, &mut targets).unwrap();
            }
            adam_step(&mut disc.params, &mut d_opt).unwrap();
            disc.params.zero_grads();
            }
            let mut rng = rng_from(step as u64, &[3]);
            let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..4)).collect();

            // G step.
            let input = gen.make_input(&labels, 2000 + step as u64).unwrap();
            let _ = &labels;
            let mut tape = Tape::new();
            let iv = tape.constant(&input);
            let (img, leaves) = gen.forward(&mut tape, iv).unwrap();
            let (p, _) = disc.forward(&mut tape, img).unwrap();
            let pc = tape.clamp(p, 1e-7, 1.0 - 1e-7);
            let pl = tape.ln(pc).unwrap();
            let adv = tape.mean_all(pl);
            let adv = tape.neg(adv);
            let (logits, _) = clf.forward(&mut tape, img).unwrap();
            let xen = tape.cross_entropy(logits, &labels).unwrap();
            let xw: f64 = std::env::var("FEDSIM_XEN_W").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
            let xen = tape.scale(xen, xw);
            let gloss = tape.add(adv, xen).unwrap();
            tape.backward(gloss).unwrap();
            {
                let mut targets: Vec<&mut Tensor> =
                    gen.params.iter_mut().map(|(_, t)| t).collect();
                tape.accumulate_grads(&leaves, &mut targets).unwrap();
            }
            adam_step(&mut gen.params, &mut g_opt).unwrap();
            gen.params.zero_grads();

            if step % 50 == 0 || step + 1 == steps {
                let p = quality_proxy(&gen, &ds, 64, 0).unwrap();
                let gl = tape.data_of(gloss)[0];
                println!("step {step:4} gloss {gl:.3} proxy {p:.3}");
            }
        }
    }
}
