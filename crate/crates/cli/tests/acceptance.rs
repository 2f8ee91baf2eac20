//! Acceptance gate. Twelve checks, one test each, covering extraction
//! equivalence, gradient correctness, metric oracles, the forgetting
//! guarantee, desk-scale trend reproductions and report determinism.
//! Every check prints one `[PASS] criterion N` line (visible under
//! `--nocapture`); a violation panics with the matching `[FAIL]` tag.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splinter_cli::config::ExperimentConfig;
use splinter_cli::pipeline;
use splinter_cli::report::EnsembleReport;
use splinter_core::arch::{self, ArchSpec, LayerDesc};
use splinter_core::autodiff::gradcheck::{central_diff, worst_mismatch};
use splinter_core::autodiff::{Reduction, Tape, Tensor};
use splinter_core::continual::{
    allocate_task, cl_accuracy, masked_forward, train_task, MaskLedger, RMatrix, TaskAllocCfg,
    TaskTrainCfg,
};
use splinter_core::data::Dataset;
use splinter_core::diversity::{mmd2, KernelSpec};
use splinter_core::extraction::{extract_subnetwork, plan_member, zero_one_masks, SubnetBlueprint};
use splinter_core::metrics::{self, CombineMode, PredictionBatch};
use splinter_core::network::{init_scaling_sets, ForwardOpts, InitDist, Network};
use splinter_core::saliency::{train_scaling, IndexSets, ScalingTrainCfg, Scope};

fn pass(n: u32, what: &str) {
    println!("[PASS] criterion {n}: {what}");
}

macro_rules! ck {
    ($n:expr, $cond:expr, $($msg:tt)+) => {
        assert!($cond, "[FAIL] criterion {}: {}", $n, format!($($msg)+))
    };
}

fn budget(n: u32, started: Instant, limit: Duration) {
    let took = started.elapsed();
    ck!(n, took <= limit, "runtime {took:?} exceeds the {limit:?} budget");
}

// ---------------------------------------------------------------- helpers

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn ce_mean(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = *logits.shape().last().unwrap();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        total -= softmax_row(row)[l].ln();
    }
    total / labels.len() as f64
}

fn nll_of_avg_softmax(models: &[Network], x: &Tensor, labels: &[usize]) -> f64 {
    let classes = models[0].spec().classes();
    let n = labels.len();
    let mut avg = vec![0.0; n * classes];
    for m in models {
        let logits = m.forward_batch(x, &ForwardOpts::default()).unwrap();
        for i in 0..n {
            let p = softmax_row(&logits.data()[i * classes..(i + 1) * classes]);
            for c in 0..classes {
                avg[i * classes + c] += p[c] / models.len() as f64;
            }
        }
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        total -= avg[i * classes + l].ln();
    }
    total / n as f64
}

fn random_subsets(widths: &[usize], rng: &mut ChaCha8Rng) -> IndexSets {
    let layers = widths
        .iter()
        .map(|&w| {
            let mut kept: Vec<usize> = (0..w).filter(|_| rng.gen_bool(0.5)).collect();
            if kept.is_empty() {
                kept.push(rng.gen_range(0..w));
            }
            kept
        })
        .collect();
    IndexSets::new(layers)
}

fn random_mlp(rng: &mut ChaCha8Rng) -> ArchSpec {
    let d = rng.gen_range(2..5);
    let depth = rng.gen_range(1..4);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(3..9)).collect();
    arch::mlp(d, &hidden, rng.gen_range(2..5))
}

fn random_conv_chain(rng: &mut ChaCha8Rng) -> ArchSpec {
    let c_in = rng.gen_range(1..3);
    let s = if rng.gen_bool(0.5) { 6 } else { 8 };
    let c1 = rng.gen_range(2..5);
    let c2 = rng.gen_range(2..5);
    let mut backbone = vec![
        LayerDesc::Conv2d { out: c1, k: 3, stride: 1, pad: 1, bias: true },
        LayerDesc::Relu,
        LayerDesc::MaxPool { k: 2 },
        LayerDesc::Conv2d { out: c2, k: 3, stride: 1, pad: 1, bias: rng.gen_bool(0.5) },
        LayerDesc::Relu,
    ];
    if rng.gen_bool(0.5) {
        backbone.push(LayerDesc::MaxPool { k: 2 });
    }
    backbone.push(LayerDesc::Flatten);
    let head = vec![LayerDesc::Linear { out: rng.gen_range(2..5), bias: true }];
    ArchSpec::resolve(vec![c_in, s, s], &backbone, &head).unwrap()
}

// ------------------------------------------------------------- criteria

#[test]
fn c01_extraction_equivalence_on_random_triples() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    for trial in 0..50u64 {
        let spec = if trial % 2 == 0 {
            random_conv_chain(&mut rng)
        } else {
            random_mlp(&mut rng)
        };
        let net = Network::build(&spec, 9000 + trial);
        let widths = spec.prunable_widths();
        let sets = random_subsets(&widths, &mut rng);
        let masks = zero_one_masks(&widths, &sets).unwrap();
        let plan = SubnetBlueprint::from_index_sets(&spec, &sets).unwrap();
        let sub = extract_subnetwork(&net, &plan).unwrap();

        let batch = 2;
        let numel: usize = spec.input.iter().product::<usize>() * batch;
        let mut shape = vec![batch];
        shape.extend_from_slice(&spec.input);
        let x = Tensor::new(shape, (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();

        let masked = net
            .forward_batch(&x, &ForwardOpts { mask: Some(&masks), ..Default::default() })
            .unwrap();
        let sliced = sub.forward_batch(&x, &ForwardOpts::default()).unwrap();
        ck!(1, masked.shape() == sliced.shape(), "trial {trial}: output shapes differ");
        for (a, b) in masked.data().iter().zip(sliced.data()) {
            ck!(
                1,
                (a - b).abs() <= 1e-12,
                "trial {trial}: extracted forward deviates by {}",
                (a - b).abs()
            );
        }
    }
    budget(1, started, Duration::from_secs(60));
    pass(1, "50 random extractions match the masked original within 1e-12");
}

#[test]
fn c02_gradients_match_central_differences() {
    let started = Instant::now();
    let rel = 1e-5;
    let abs = 1e-8;
    let spec = arch::mlp(3, &[4], 3);
    let net = Network::build(&spec, 77);
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0002);
    let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let labels = vec![0usize, 2, 1, 0];

    // weights and biases
    {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec()).unwrap();
        let (logits, binds) = net.forward_on(&mut tape, xid, &ForwardOpts::default()).unwrap();
        let loss = tape.cross_entropy(logits, &labels, Reduction::Mean).unwrap();
        tape.backward(loss).unwrap();
        let mut check_net = net.clone();
        check_net.zero_grads();
        binds.accumulate_param_grads(&tape, &mut check_net);
        for key in net.param_keys() {
            let analytic = check_net.param(key).grad().to_vec();
            let at = net.param(key).data().to_vec();
            let mut f = |w: &[f64]| {
                let mut probe = net.clone();
                probe.param_mut(key).data_mut().copy_from_slice(w);
                let logits = probe.forward_batch(&x, &ForwardOpts::default()).unwrap();
                ce_mean(&logits, &labels)
            };
            let numeric = central_diff(&mut f, &at, 1e-5);
            let worst = worst_mismatch(&analytic, &numeric, rel, abs);
            ck!(2, worst.is_none(), "weight gradient mismatch at {key:?}: {worst:?}");
        }
    }

    // scaling vectors
    {
        let sets = init_scaling_sets(&net, 1, InitDist::Normal { mean: 0.0, std: 1.0 }, 5).unwrap();
        let set = &sets[0];
        let mut tape = Tape::new();
        let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec()).unwrap();
        let opts = ForwardOpts { scaling: Some(set), ..Default::default() };
        let (logits, binds) = net.forward_on(&mut tape, xid, &opts).unwrap();
        let loss = tape.cross_entropy(logits, &labels, Reduction::Mean).unwrap();
        tape.backward(loss).unwrap();
        let mut check_set = set.clone();
        for v in &mut check_set.vectors {
            v.zero_grad();
        }
        binds.accumulate_scaling_grads(&tape, &mut check_set);
        for l in 0..set.vectors.len() {
            let analytic = check_set.vectors[l].grad().to_vec();
            let at = set.vectors[l].data().to_vec();
            let mut f = |s: &[f64]| {
                let mut probe = set.clone();
                probe.vectors[l].data_mut().copy_from_slice(s);
                let opts = ForwardOpts { scaling: Some(&probe), ..Default::default() };
                let logits = net.forward_batch(&x, &opts).unwrap();
                ce_mean(&logits, &labels)
            };
            let numeric = central_diff(&mut f, &at, 1e-5);
            let worst = worst_mismatch(&analytic, &numeric, rel, abs);
            ck!(2, worst.is_none(), "scaling gradient mismatch in layer {l}: {worst:?}");
        }
    }

    // input gradient of the attack loss (average softmax, then nll)
    {
        let models = vec![Network::build(&spec, 78), Network::build(&spec, 79)];
        let mut tape = Tape::new();
        let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec()).unwrap();
        let mut avg = None;
        for m in &models {
            let (logits, _) = m.forward_on(&mut tape, xid, &ForwardOpts::default()).unwrap();
            let probs = tape.softmax(logits).unwrap();
            avg = Some(match avg {
                None => probs,
                Some(acc) => tape.add(acc, probs).unwrap(),
            });
        }
        let avg = tape.scale_const(avg.unwrap(), 1.0 / models.len() as f64);
        let loss = tape.nll_probs(avg, &labels).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(xid).to_vec();
        let mut f = |v: &[f64]| {
            let probe = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
            nll_of_avg_softmax(&models, &probe, &labels)
        };
        let numeric = central_diff(&mut f, x.data(), 1e-5);
        let worst = worst_mismatch(&analytic, &numeric, rel, abs);
        ck!(2, worst.is_none(), "input gradient mismatch: {worst:?}");
    }

    budget(2, started, Duration::from_secs(60));
    pass(2, "weight, scaling and input gradients match finite differences at 1e-5 relative");
}

#[test]
fn c03_mmd_oracle() {
    let kernel = KernelSpec::default();
    let got = mmd2(&[1.0, 1.0], &[0.0, 0.0], &kernel).unwrap();
    let want = 2.0 - 2.0 * (-0.5f64).exp();
    ck!(3, (got - want).abs() <= 1e-9, "mmd2 = {got}, want {want}");

    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0003);
    for _ in 0..20 {
        let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = mmd2(&u, &v, &kernel).unwrap();
        let b = mmd2(&v, &u, &kernel).unwrap();
        ck!(3, a.to_bits() == b.to_bits(), "mmd2 asymmetric: {a} vs {b}");
    }

    let c = vec![0.7; 5];
    let zero = mmd2(&c, &c.clone(), &kernel).unwrap();
    ck!(3, zero == 0.0, "identical constants give {zero}, want exact 0");
    pass(3, "mmd2 matches the closed form, is symmetric, and is exactly 0 on identical inputs");
}

fn three_task_stream(train_seed: u64, test_seed: u64) -> Vec<(Dataset, Dataset)> {
    let train = splinter_cli::data::gaussians(1200, 6, 0.05, 2, train_seed).unwrap();
    let test = splinter_cli::data::gaussians(600, 6, 0.05, 2, test_seed).unwrap();
    (0..3)
        .map(|k| {
            let keep = [2 * k, 2 * k + 1];
            (train.filter_remap(&keep).unwrap(), test.filter_remap(&keep).unwrap())
        })
        .collect()
}

#[test]
fn c04_zero_forgetting_is_bitwise() {
    let started = Instant::now();
    let tasks = three_task_stream(21, 22);
    let spec = arch::mlp(2, &[64, 64], 2);
    let mut net = Network::build(&spec, 4);
    let mut ledger = MaskLedger::new(spec.prunable_widths());
    let mut frozen: Vec<Vec<f64>> = Vec::new();

    for (t, (train, _)) in tasks.iter().enumerate() {
        let alloc = TaskAllocCfg {
            p: 50.0,
            mask_epochs: 3,
            mask_lr: 0.05,
            batch: 40,
            seed: 4,
            ..Default::default()
        };
        allocate_task(&mut net, &mut ledger, train, &alloc).unwrap();
        let tcfg = TaskTrainCfg {
            epochs: 8,
            lr: 0.05,
            momentum: 0.9,
            batch: 40,
            seed: 1000 + t as u64,
        };
        train_task(&mut net, &ledger, t, train, &tcfg).unwrap();

        let rows: Vec<usize> = (0..tasks[t].1.len()).collect();
        let (x, _) = tasks[t].1.gather(&rows).unwrap();
        frozen.push(masked_forward(&net, &ledger, t, &x).unwrap().data().to_vec());

        // every earlier task must still produce its post-training logits,
        // bit for bit
        for (j, (_, test)) in tasks.iter().enumerate().take(t + 1) {
            let rows: Vec<usize> = (0..test.len()).collect();
            let (x, _) = test.gather(&rows).unwrap();
            let now = masked_forward(&net, &ledger, j, &x).unwrap();
            ck!(4, now.data().len() == frozen[j].len(), "logit count changed for task {j}");
            for (a, b) in now.data().iter().zip(&frozen[j]) {
                ck!(
                    4,
                    a.to_bits() == b.to_bits(),
                    "task {j} logits drifted after task {t}: {a} vs {b}"
                );
            }
        }
    }
    budget(4, started, Duration::from_secs(120));
    pass(4, "three sequential tasks leave every earlier task's logits bitwise unchanged");
}

#[test]
fn c05_mask_bits_match_the_architecture_constants() {
    let lenet = arch::lenet5(vec![1, 28, 28], 10).unwrap();
    let widths = lenet.prunable_widths();
    assert_eq!(widths.iter().sum::<usize>(), 142);
    let ledger = MaskLedger::new(widths);
    for m in [1usize, 2, 3, 5, 10] {
        let (_, bits) = ledger.memory_account(lenet.head_param_count(), m);
        ck!(5, bits == 142 * m, "lenet mask bits for {m} models: {bits}, want {}", 142 * m);
    }

    let vgg = arch::half_vgg11(vec![3, 32, 32], 10).unwrap();
    let widths = vgg.prunable_widths();
    assert_eq!(widths.iter().sum::<usize>(), 1376);
    let ledger = MaskLedger::new(widths);
    for m in [1usize, 2, 5] {
        let (_, bits) = ledger.memory_account(vgg.head_param_count(), m);
        ck!(5, bits == 1376 * m, "half-vgg mask bits for {m} models: {bits}, want {}", 1376 * m);
    }
    pass(5, "mask storage reports 142 bits and 1376 bits per model for the two presets");
}

// ------------------------------------------------ shared desk experiment

struct Desk {
    ens: Vec<EnsembleReport>,
    single: Vec<EnsembleReport>,
    train_time: Duration,
    _dir: tempfile::TempDir,
}

static DESK: OnceLock<Desk> = OnceLock::new();

fn desk_config(out_dir: &std::path::Path, mode: &str, seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"
mode = "{mode}"
seed = {seed}
out_dir = "{}"

[arch]
preset = "mlp"
input = [32]
hidden = [64, 64]
classes = 10

[dataset]
kind = "spirals"
classes = 10
seed = 7
train_n = 4000
test_n = 1000
noise = 0.05
dims = 32

[ensemble]
members = 5
p = 50.0
scope = "per_layer"
extraction = "hard"
lambda = 0.1
mask_epochs = 8
mask_lr = 0.05
mask_batch = 50
scaling_init = "normal"
init_a = 0.0
init_b = 1.0
combine = "avg_softmax"

[train]
epochs = 400
lr = 0.03
momentum = 0.9
batch = 32
lr_decay = 0.7
lr_decay_every = 80
patience = 60

[eval]
ece_bins = 15
fgsm_eps = 0.1
gaussian_sigmas = [0.0, 0.3]
"#,
        out_dir.display()
    );
    ExperimentConfig::from_str_for_tests(&text).unwrap()
}

fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let started = Instant::now();
        let mut ens = Vec::new();
        let mut single = Vec::new();
        for seed in 0..3u64 {
            let cfg = desk_config(&dir.path().join(format!("ens{seed}")), "ensemble", seed);
            ens.push(pipeline::run_ensemble(&cfg).unwrap());
            let cfg = desk_config(&dir.path().join(format!("single{seed}")), "single", seed);
            single.push(pipeline::run_ensemble(&cfg).unwrap());
        }
        Desk {
            ens,
            single,
            train_time: started.elapsed(),
            _dir: dir,
        }
    })
}

#[test]
fn c06_ensemble_beats_single_on_the_desk_spiral() {
    let d = desk();
    let ens: Vec<f64> = d.ens.iter().map(|r| r.results.test_accuracy_pct).collect();
    let single: Vec<f64> = d.single.iter().map(|r| r.results.test_accuracy_pct).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ck!(
        6,
        mean(&ens) >= mean(&single),
        "mean ensemble {:.3} below mean single {:.3} (per-seed ens {ens:?}, single {single:?})",
        mean(&ens),
        mean(&single)
    );
    for s in 0..3 {
        ck!(
            6,
            ens[s] >= single[s] - 0.5,
            "seed {s}: ensemble {:.3} trails single {:.3} by more than 0.5 points",
            ens[s],
            single[s]
        );
        ck!(6, d.ens[s].results.overhead < 5.0, "seed {s}: overhead {}", d.ens[s].results.overhead);
    }
    ck!(
        6,
        d.train_time <= Duration::from_secs(900),
        "desk training took {:?}, budget 15 min",
        d.train_time
    );
    pass(6, "seed-averaged ensemble accuracy meets the single model with overhead under 5");
}

#[test]
fn c07_overhead_strictly_decreases_across_the_p_sweep() {
    let spec = arch::mlp(2, &[64, 64], 10);
    let net = Network::build(&spec, 1);
    let data = splinter_cli::data::spirals(1000, 10, 0.02, 2, 3).unwrap();
    let mut sets = init_scaling_sets(&net, 5, InitDist::Normal { mean: 0.0, std: 1.0 }, 11).unwrap();
    let cfg = ScalingTrainCfg {
        epochs: 3,
        lr: 0.05,
        lambda: 0.1,
        batch: 50,
        seed: 13,
        ..Default::default()
    };
    train_scaling(&net, &mut sets, &data, &cfg).unwrap();

    let mut overheads = Vec::new();
    for p in [30.0, 50.0, 70.0, 80.0] {
        let mut members = Vec::new();
        for set in &sets {
            let (_, plan) = plan_member(&net, set, p, Scope::PerLayer, &data).unwrap();
            members.push(extract_subnetwork(&net, &plan).unwrap());
        }
        overheads.push(metrics::overhead(&members, &net));
    }
    for w in overheads.windows(2) {
        ck!(7, w[1] < w[0], "overhead not strictly decreasing: {overheads:?}");
    }
    pass(7, "one trained scaling set yields strictly shrinking overhead at p = 30, 50, 70, 80");
}

#[test]
fn c08_ece_oracles() {
    // one bin: four samples at confidence 0.8, three correct
    let p_hit = [0.8f64, 0.2];
    let logits: Vec<f64> = p_hit.iter().map(|p| p.ln()).collect();
    let rows: Vec<f64> = logits.repeat(4);
    let preds = PredictionBatch::from_logits(vec![rows], 2, vec![0, 0, 0, 1], CombineMode::AvgSoftmax).unwrap();
    let got = metrics::ece(&preds, 1).unwrap();
    ck!(8, (got - 0.05).abs() <= 1e-12, "single-bin ece {got}, want 0.05");

    // perfectly calibrated: ten samples at confidence 0.8, eight correct
    let rows: Vec<f64> = logits.repeat(10);
    let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
    let preds = PredictionBatch::from_logits(vec![rows], 2, labels, CombineMode::AvgSoftmax).unwrap();
    let got = metrics::ece(&preds, 2).unwrap();
    ck!(8, got.abs() <= 1e-12, "calibrated ece {got}, want 0");
    pass(8, "hand-built prediction sets reproduce ECE to 1e-12");
}

#[test]
fn c09_entropy_filter_behaves_on_clean_and_corrupted_data() {
    let d = desk();
    let rows = &d.ens[0].results.gaussian;
    let clean = rows.iter().find(|r| r.sigma == 0.0).expect("sigma 0 row");
    let noisy = rows.iter().find(|r| r.sigma == 0.3).expect("sigma 0.3 row");

    ck!(9, clean.discarded_pct <= 30.0, "clean discard rate {}%", clean.discarded_pct);
    let fa = clean.accuracy_filtered_pct.expect("clean filter kept something");
    ck!(
        9,
        (fa - clean.accuracy_all_pct).abs() <= 2.0,
        "clean filtered accuracy {fa} vs overall {} differs by more than 2 points",
        clean.accuracy_all_pct
    );

    ck!(
        9,
        noisy.discarded_pct > 0.0 && noisy.discarded_pct < 100.0,
        "corrupted discard rate {}%",
        noisy.discarded_pct
    );
    let fa = noisy.accuracy_filtered_pct.expect("corrupted filter kept something");
    ck!(
        9,
        fa >= noisy.accuracy_all_pct,
        "filtering lowered accuracy under corruption: {fa} vs {}",
        noisy.accuracy_all_pct
    );
    pass(9, "the entropy filter is neutral on clean data and helps under sigma 0.3 corruption");
}

#[test]
fn c10_continual_accuracy_oracle() {
    let mut r = RMatrix::new(2);
    r.set(0, 0, 0.9).unwrap();
    r.set(1, 0, 0.8).unwrap();
    r.set(1, 1, 0.7).unwrap();
    let got = cl_accuracy(&r).unwrap();
    ck!(10, (got - 0.8).abs() <= 1e-12, "cl accuracy {got}, want 0.8");
    pass(10, "cl_accuracy((0.9), (0.8, 0.7)) = 0.8");
}

#[test]
fn c11_naive_forgets_and_masks_do_not() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let text = |mode: &str, out: &str| {
        format!(
            r#"
mode = "{mode}"
seed = 2
out_dir = "{}"

[arch]
preset = "mlp"
input = [2]
hidden = [64, 64]
classes = 2

[dataset]
kind = "gaussians"
classes = 6
seed = 7
train_n = 1800
test_n = 600
noise = 0.05

[ensemble]
members = 1
p = 50.0
scope = "per_layer"
extraction = "hard"
lambda = 0.0
mask_epochs = 3
mask_lr = 0.05
mask_batch = 40
scaling_init = "normal"
init_a = 0.0
init_b = 1.0
combine = "avg_softmax"

[train]
epochs = 15
lr = 0.1
momentum = 0.9
batch = 32
lr_decay = 0.8
lr_decay_every = 50
patience = 0

[cl]
tasks = 3
"#,
            dir.path().join(out).display()
        )
    };
    let masked = pipeline::run_cl(&ExperimentConfig::from_str_for_tests(&text("cl", "masked")).unwrap()).unwrap();
    let naive = pipeline::run_cl(&ExperimentConfig::from_str_for_tests(&text("naive", "naive")).unwrap()).unwrap();

    ck!(
        11,
        naive.first_task_drop_pct >= 5.0,
        "naive first-task drop only {:.3} points",
        naive.first_task_drop_pct
    );
    ck!(
        11,
        masked.first_task_drop_pct == 0.0,
        "masked first-task drop {:.17} points, want exactly 0",
        masked.first_task_drop_pct
    );
    budget(11, started, Duration::from_secs(300));
    pass(11, "naive sequential training forgets task 1 by 5+ points, the masked run by exactly 0");
}

#[test]
fn c12_reports_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = format!(
        r#"
mode = "ensemble"
seed = 6
out_dir = "{}"

[arch]
preset = "mlp"
input = [2]
hidden = [24]
classes = 4

[dataset]
kind = "gaussians"
classes = 4
train_n = 400
test_n = 120
noise = 0.04

[ensemble]
members = 3
p = 50.0
scope = "per_layer"
extraction = "hard"
lambda = 0.1
mask_epochs = 3
mask_lr = 0.05
mask_batch = 40
scaling_init = "normal"
init_a = 0.0
init_b = 1.0
combine = "avg_softmax"

[train]
epochs = 20
lr = 0.1
momentum = 0.9
batch = 32
lr_decay = 0.8
lr_decay_every = 50
patience = 5

[eval]
gaussian_sigmas = [0.0, 0.3]
"#,
        dir.path().display()
    );
    let cfg = ExperimentConfig::from_str_for_tests(&cfg_text).unwrap();
    pipeline::run_ensemble(&cfg).unwrap();
    let first = std::fs::read(dir.path().join("report.json")).unwrap();
    pipeline::run_ensemble(&cfg).unwrap();
    let second = std::fs::read(dir.path().join("report.json")).unwrap();
    ck!(12, first == second, "rerun produced different report bytes");
    let members_first = std::fs::read(dir.path().join("member_0.model")).unwrap();
    pipeline::run_ensemble(&cfg).unwrap();
    let members_second = std::fs::read(dir.path().join("member_0.model")).unwrap();
    ck!(12, members_first == members_second, "rerun produced different model bytes");
    pass(12, "rerunning the same config rewrites report and model files byte for byte");
}
