//! Experiment pipelines. Each run walks named stages; an error anywhere is
//! tagged with its stage, and every stage persists its artifacts the moment
//! they exist, so a dead run leaves models, masks and logs on disk up to
//! the point of failure.
//!
//! Seeds fan out from the run seed through fixed stream tags: the base
//! network, the scaling init, scaling training, each member's batch order
//! and each corruption level all draw from disjoint streams. Rerunning a
//! config reproduces every artifact byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use splinter_core::arch::ArchSpec;
use splinter_core::autodiff::{Reduction, SgdOptimizer, Tape, Tensor};
use splinter_core::continual::{
    allocate_task, cl_accuracy, masked_forward, train_task, MaskLedger, RMatrix, TaskAllocCfg,
    TaskTrainCfg,
};
use splinter_core::data::{shuffled_batches, Dataset};
use splinter_core::diversity::KernelSpec;
use splinter_core::extraction::{extract_subnetwork, plan_member};
use splinter_core::metrics::{self, CombineMode, PredictionBatch, Subset};
use splinter_core::network::{derive_seed, init_scaling_sets, ForwardOpts, Network};
use splinter_core::saliency::{train_scaling, ScalingTrainCfg};
use splinter_core::Error as CoreError;

use crate::config::{ExperimentConfig, Mode, TrainConfig};
use crate::data::{self, DataBundle};
use crate::error::{in_stage, CliError, Result};
use crate::model_io;
use crate::report::{
    self, ArchSummary, ClReport, DatasetSummary, EnsembleReport, EnsembleResults, FilterRow,
    GaussianRow, MemoryRow, TrainRow,
};

const EVAL_CHUNK: usize = 256;

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Plain test accuracy of one model (optionally a specific head), in
/// percent, evaluated in fixed-size chunks.
pub fn eval_accuracy(net: &Network, ds: &Dataset, head: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(CoreError::invalid("eval", "empty dataset").into());
    }
    let classes = net.spec().classes();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for rows in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(rows)?;
        let logits = net.forward_batch(&x, &ForwardOpts { head, ..Default::default() })?;
        let d = logits.data();
        for (i, &l) in y.iter().enumerate() {
            if argmax_row(&d[i * classes..(i + 1) * classes]) == l {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Accuracy of the task-t subnetwork (its mask plus its head).
pub fn masked_accuracy(net: &Network, ledger: &MaskLedger, t: usize, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(CoreError::invalid("eval", "empty dataset").into());
    }
    let classes = net.spec().classes();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for rows in idx.chunks(EVAL_CHUNK) {
        let (x, y) = ds.gather(rows)?;
        let logits = masked_forward(net, ledger, t, &x)?;
        let d = logits.data();
        for (i, &l) in y.iter().enumerate() {
            if argmax_row(&d[i * classes..(i + 1) * classes]) == l {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Runs every model over the dataset in chunks and merges the outputs.
pub fn combine_dataset(models: &[Network], ds: &Dataset, mode: CombineMode) -> Result<PredictionBatch> {
    if models.is_empty() || ds.is_empty() {
        return Err(CoreError::invalid("combine", "no models or no samples").into());
    }
    let classes = models[0].spec().classes();
    let mut per_model: Vec<Vec<f64>> = vec![Vec::with_capacity(ds.len() * classes); models.len()];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for rows in idx.chunks(EVAL_CHUNK) {
        let (x, _) = ds.gather(rows)?;
        for (m, model) in models.iter().enumerate() {
            let logits = model.forward_batch(&x, &ForwardOpts::default())?;
            per_model[m].extend_from_slice(logits.data());
        }
    }
    Ok(PredictionBatch::from_logits(per_model, classes, ds.labels().to_vec(), mode)?)
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_dev_accuracy_pct: Option<f64>,
}

/// Trains one model with momentum SGD, stepped learning-rate decay and,
/// when a dev set is given, early stopping that restores the best
/// checkpoint: training halts after `patience` epochs without a dev
/// accuracy improvement and the weights roll back to the best epoch.
pub fn fit(
    net: &mut Network,
    head: usize,
    train: &Dataset,
    dev: Option<&Dataset>,
    t: &TrainConfig,
    seed: u64,
) -> Result<FitSummary> {
    let mut opt = SgdOptimizer::new(t.lr, t.momentum);
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..t.epochs {
        opt.set_lr(t.lr * t.lr_decay.powi((epoch / t.lr_decay_every) as i32));
        let batches = shuffled_batches(train.len(), t.batch, derive_seed(seed, epoch as u64))?;
        for rows in &batches {
            let (x, y) = train.gather(rows)?;
            let mut tape = Tape::new();
            let xid = tape.leaf(x.data().to_vec(), x.shape().to_vec())?;
            let opts = ForwardOpts { scaling: None, mask: None, head };
            let (logits, binds) = net.forward_on(&mut tape, xid, &opts)?;
            let loss = tape.cross_entropy(logits, &y, Reduction::Mean)?;
            tape.backward(loss)?;
            net.zero_grads();
            binds.accumulate_param_grads(&tape, net);
            let mut tensors = net.trainable_tensors_mut(head);
            opt.step(&mut tensors, None)?;
        }
        epochs_run = epoch + 1;
        if let (Some(dev), true) = (dev, t.patience > 0) {
            let acc = eval_accuracy(net, dev, head)?;
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                let snap = net.param_keys().iter().map(|&k| net.param(k).clone()).collect();
                best = Some((acc, snap));
                stale = 0;
            } else {
                stale += 1;
                if stale >= t.patience {
                    break;
                }
            }
        }
    }
    match best {
        Some((acc, snap)) => {
            for (&k, s) in net.param_keys().iter().zip(&snap) {
                net.param_mut(k).data_mut().copy_from_slice(s.data());
            }
            Ok(FitSummary {
                epochs_run,
                best_dev_accuracy_pct: Some(acc),
            })
        }
        None => Ok(FitSummary {
            epochs_run,
            best_dev_accuracy_pct: None,
        }),
    }
}

fn check_input_shape(spec: &ArchSpec, ds: &Dataset) -> Result<()> {
    if ds.sample_shape() != spec.input.as_slice() {
        return Err(CliError::Usage(format!(
            "data samples have shape {:?} but the architecture expects {:?}",
            ds.sample_shape(),
            spec.input
        )));
    }
    Ok(())
}

fn dataset_summary(bundle: &DataBundle) -> DatasetSummary {
    DatasetSummary {
        kind: bundle.kind.to_string(),
        classes: bundle.train.classes(),
        train: bundle.train.len(),
        dev: bundle.dev.len(),
        test: bundle.test.len(),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Full ensemble experiment: scaling training, extraction, independent
/// member training, evaluation, report. `single` trains the base network
/// as-is and `naive` trains independently initialized full-size copies.
pub fn run_ensemble(cfg: &ExperimentConfig) -> Result<EnsembleReport> {
    if cfg.mode == Mode::Cl {
        return Err(CliError::Usage(
            "this config says mode = \"cl\"; run it with the cl-run command".into(),
        ));
    }
    // validate() skips this for naive configs, which may target either
    // command; the ensemble path needs head width == class count.
    if cfg.arch.classes != cfg.dataset.classes {
        return Err(CliError::Usage(format!(
            "arch.classes = {} but dataset.classes = {}",
            cfg.arch.classes, cfg.dataset.classes
        )));
    }
    ensure_out_dir(&cfg.out_dir)?;
    let bundle = in_stage("data", data::load(&cfg.dataset))?;
    let spec = in_stage("build", cfg.arch.resolve())?;
    in_stage("build", check_input_shape(&spec, &bundle.train))?;
    let base = Network::build(&spec, derive_seed(cfg.seed, 10));
    let e = &cfg.ensemble;

    let mut scaling_loss = Vec::new();
    let mut kept_per_member = Vec::new();
    let mut members: Vec<Network> = match cfg.mode {
        Mode::Single => vec![base.clone()],
        Mode::Naive => (0..e.members)
            .map(|m| Network::build(&spec, derive_seed(cfg.seed, 300 + m as u64)))
            .collect(),
        Mode::Ensemble => {
            let mut sets = in_stage(
                "scaling",
                init_scaling_sets(&base, e.members, e.init_dist(), derive_seed(cfg.seed, 20))
                    .map_err(CliError::from),
            )?;
            let scfg = ScalingTrainCfg {
                epochs: e.mask_epochs,
                lr: e.mask_lr,
                lambda: e.lambda,
                kernel: KernelSpec::default(),
                batch: e.mask_batch,
                seed: derive_seed(cfg.seed, 30),
                head: 0,
            };
            scaling_loss = in_stage(
                "scaling",
                train_scaling(&base, &mut sets, &bundle.train, &scfg).map_err(CliError::from),
            )?;
            let mut members = Vec::with_capacity(sets.len());
            for set in &sets {
                let (kept, plan) = in_stage(
                    "extract",
                    plan_member(&base, set, e.p, e.scope.to_scope(), &bundle.train).map_err(CliError::from),
                )?;
                kept_per_member.push(kept.counts());
                members.push(in_stage(
                    "extract",
                    extract_subnetwork(&base, &plan).map_err(CliError::from),
                )?);
            }
            members
        }
        Mode::Cl => unreachable!("rejected above"),
    };

    let mut training = Vec::with_capacity(members.len());
    for (m, net) in members.iter_mut().enumerate() {
        let s = in_stage(
            "train-members",
            fit(net, 0, &bundle.train, Some(&bundle.dev), &cfg.train, derive_seed(cfg.seed, 100 + m as u64)),
        )?;
        in_stage(
            "train-members",
            model_io::save_model(&cfg.out_dir.join(format!("member_{m}.model")), net),
        )?;
        info!(
            "member {m}: {} epochs, best dev {:?}",
            s.epochs_run, s.best_dev_accuracy_pct
        );
        training.push(TrainRow {
            epochs_run: s.epochs_run,
            best_dev_accuracy_pct: s.best_dev_accuracy_pct,
        });
    }

    let results = in_stage("evaluate", evaluate_ensemble(&members, &base, &bundle, cfg))?;

    let label = if cfg.is_single_equivalent() {
        "single-model"
    } else if cfg.mode == Mode::Naive {
        "deep-ensemble"
    } else {
        "split-ensemble"
    };
    let report = EnsembleReport {
        label: label.to_string(),
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        dataset: dataset_summary(&bundle),
        arch: ArchSummary {
            canonical: spec.canonical_text(),
            params: base.param_count(),
        },
        members: members.len(),
        p: e.p,
        lambda: e.lambda,
        scope: e.scope.as_str().to_string(),
        combine: e.combine.as_str().to_string(),
        scaling_loss,
        kept_per_member,
        training,
        results,
    };
    in_stage("report", report::write_json(&cfg.out_dir.join("report.json"), &report))?;
    Ok(report)
}

fn evaluate_ensemble(
    members: &[Network],
    base: &Network,
    bundle: &DataBundle,
    cfg: &ExperimentConfig,
) -> Result<EnsembleResults> {
    let mode = cfg.ensemble.combine.to_mode();
    let e = &cfg.eval;
    let preds = combine_dataset(members, &bundle.test, mode)?;
    let mut member_acc = Vec::with_capacity(members.len());
    for m in members {
        member_acc.push(eval_accuracy(m, &bundle.test, 0)?);
    }
    let ece = metrics::ece(&preds, e.ece_bins)?;
    // A subset score needs two models and a non-empty subset; anything
    // else reports as absent rather than failing the run.
    let (div_c, div_w) = if members.len() >= 2 {
        (
            metrics::diversity_score(&preds, Subset::Correct).ok(),
            metrics::diversity_score(&preds, Subset::Wrong).ok(),
        )
    } else {
        (None, None)
    };
    let dev_preds = combine_dataset(members, &bundle.dev, mode)?;
    let dev_correct: Vec<f64> = dev_preds
        .entropies()
        .iter()
        .zip(dev_preds.correct())
        .filter_map(|(&h, c)| c.then_some(h))
        .collect();
    let clean = metrics::uncertainty_filter(&dev_correct, &preds)?;
    let threshold = clean.threshold;

    let rows: Vec<usize> = (0..bundle.test.len()).collect();
    let (x_test, y_test) = bundle.test.gather(&rows)?;
    let x_adv = metrics::fgsm(members, &x_test, &y_test, e.fgsm_eps)?;
    let adv = metrics::combine(members, &x_adv, &y_test, mode)?;

    let mut gaussian = Vec::with_capacity(e.gaussian_sigmas.len());
    for (i, &sigma) in e.gaussian_sigmas.iter().enumerate() {
        let x_noisy = metrics::gaussian_corrupt(&x_test, sigma, derive_seed(cfg.seed, 40 + i as u64))?;
        let noisy = metrics::combine(members, &x_noisy, &y_test, mode)?;
        let f = metrics::filter_at_threshold(threshold, &noisy.entropies(), &noisy.correct())?;
        gaussian.push(GaussianRow {
            sigma,
            threshold,
            accuracy_all_pct: f.accuracy_all_pct,
            accuracy_filtered_pct: f.accuracy_filtered_pct,
            discarded_pct: f.discarded_pct,
        });
    }

    Ok(EnsembleResults {
        test_accuracy_pct: preds.accuracy_pct(),
        member_test_accuracy_pct: member_acc,
        ece,
        ece_bins: e.ece_bins,
        diversity_correct_pct: div_c,
        diversity_wrong_pct: div_w,
        overhead: metrics::overhead(members, base),
        base_params: base.param_count(),
        member_params: members.iter().map(Network::param_count).collect(),
        uncertainty_clean: FilterRow {
            threshold: clean.threshold,
            accuracy_all_pct: clean.accuracy_all_pct,
            accuracy_filtered_pct: clean.accuracy_filtered_pct,
            discarded_pct: clean.discarded_pct,
        },
        fgsm_eps: e.fgsm_eps,
        fgsm_accuracy_pct: adv.accuracy_pct(),
        gaussian,
    })
}

/// Sequential pipeline: `cl` allocates a disjoint mask plus a fresh head
/// per task and trains only the claimed neurons; `naive` retrains the
/// shared backbone for every task and demonstrates the forgetting the
/// masks remove.
pub fn run_cl(cfg: &ExperimentConfig) -> Result<ClReport> {
    if !matches!(cfg.mode, Mode::Cl | Mode::Naive) {
        return Err(CliError::Usage(
            "cl-run wants mode = \"cl\" or mode = \"naive\"".into(),
        ));
    }
    cfg.validate_task_arithmetic()?;
    ensure_out_dir(&cfg.out_dir)?;
    let m = cfg.cl.tasks;
    let bundle = in_stage("data", data::load(&cfg.dataset))?;
    let tasks = in_stage("data", data::split_tasks(&bundle, m))?;
    let spec = in_stage("build", cfg.arch.resolve())?;
    in_stage("build", check_input_shape(&spec, &bundle.train))?;
    let mut net = Network::build(&spec, derive_seed(cfg.seed, 10));
    let e = &cfg.ensemble;

    let mut r = RMatrix::new(m);
    let mut densities: Vec<Vec<f64>> = Vec::new();
    let memory;
    let extraction;

    if cfg.mode == Mode::Cl {
        let mut ledger = MaskLedger::new(spec.prunable_widths());
        for (t, task) in tasks.iter().enumerate() {
            let alloc = TaskAllocCfg {
                p: e.p,
                scope: e.scope.to_scope(),
                mode: e.extraction.to_mode(),
                mask_epochs: e.mask_epochs,
                mask_lr: e.mask_lr,
                batch: e.mask_batch,
                init: e.init_dist(),
                seed: cfg.seed,
            };
            in_stage(
                "allocate",
                allocate_task(&mut net, &mut ledger, &task.train, &alloc).map_err(CliError::from),
            )?;
            let tcfg = TaskTrainCfg {
                epochs: cfg.train.epochs,
                lr: cfg.train.lr,
                momentum: cfg.train.momentum,
                batch: cfg.train.batch,
                seed: derive_seed(cfg.seed, 100 + t as u64),
            };
            in_stage(
                "train-task",
                train_task(&mut net, &ledger, t, &task.train, &tcfg)
                    .map(|_| ())
                    .map_err(CliError::from),
            )?;
            in_stage("train-task", model_io::save_model(&cfg.out_dir.join("model.model"), &net))?;
            in_stage("train-task", model_io::save_masks(&cfg.out_dir.join("masks.bin"), &ledger))?;
            let owned = ledger.owned(t).map_err(CliError::from)?;
            let claimed: Vec<usize> = owned
                .layers()
                .iter()
                .map(|l| l.iter().filter(|&&b| b).count())
                .collect();
            densities.push(
                owned.layers()
                    .iter()
                    .map(|l| 100.0 * l.iter().filter(|&&b| b).count() as f64 / l.len() as f64)
                    .collect(),
            );
            info!("task {t}: claimed {claimed:?} neurons per layer");
            for (j, past) in tasks.iter().take(t + 1).enumerate() {
                let acc = in_stage("evaluate", masked_accuracy(&net, &ledger, j, &past.test))?;
                r.set(t, j, acc / 100.0).map_err(CliError::from)?;
            }
        }
        let (floats, bits) = ledger.memory_account(spec.head_param_count(), m);
        memory = MemoryRow {
            extra_head_floats: floats,
            mask_bits: bits,
            mask_bits_per_task: if m > 0 { bits / m } else { 0 },
        };
        extraction = e.extraction.as_str().to_string();
    } else {
        for (t, task) in tasks.iter().enumerate() {
            if t > 0 {
                net.add_head(derive_seed(cfg.seed, 1000 + t as u64));
            }
            in_stage(
                "train-task",
                fit(&mut net, t, &task.train, None, &cfg.train, derive_seed(cfg.seed, 100 + t as u64))
                    .map(|_| ()),
            )?;
            in_stage("train-task", model_io::save_model(&cfg.out_dir.join("model.model"), &net))?;
            for (j, past) in tasks.iter().take(t + 1).enumerate() {
                let acc = in_stage("evaluate", eval_accuracy(&net, &past.test, j))?;
                r.set(t, j, acc / 100.0).map_err(CliError::from)?;
            }
        }
        let head_params = spec.head_param_count();
        memory = MemoryRow {
            extra_head_floats: (m - 1) * head_params,
            mask_bits: 0,
            mask_bits_per_task: 0,
        };
        extraction = "none".to_string();
    }

    let cl_acc = cl_accuracy(&r).map_err(CliError::from)?;
    let first = r.get(0, 0).expect("filled above");
    let last = r.get(m - 1, 0).expect("filled above");
    let r_matrix: Vec<Vec<Option<f64>>> = (0..m)
        .map(|i| (0..m).map(|j| r.get(i, j)).collect())
        .collect();
    let report = ClReport {
        label: if cfg.mode == Mode::Cl { "masked-cl" } else { "naive-sequential" }.to_string(),
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        dataset: dataset_summary(&bundle),
        arch: ArchSummary {
            canonical: spec.canonical_text(),
            params: Network::build(&spec, derive_seed(cfg.seed, 10)).param_count(),
        },
        tasks: m,
        p: e.p,
        scope: e.scope.as_str().to_string(),
        extraction,
        r_matrix,
        cl_accuracy: cl_acc,
        first_task_drop_pct: (first - last) * 100.0,
        mask_density_pct: densities,
        memory,
    };
    in_stage("report", report::write_json(&cfg.out_dir.join("report.json"), &report))?;
    Ok(report)
}

/// Reruns the ensemble pipeline once per value of one hyperparameter and
/// tabulates accuracy, calibration and overhead.
pub fn run_sweep(base: &ExperimentConfig, param: &str, values_text: &str) -> Result<PathBuf> {
    let mut values = Vec::new();
    for v in values_text.split(',') {
        let v = v.trim();
        values.push(v.parse::<f64>().map_err(|_| {
            CliError::Usage(format!("sweep value '{v}' is not a number"))
        })?);
    }
    if values.is_empty() {
        return Err(CliError::Usage("no sweep values given".into()));
    }
    ensure_out_dir(&base.out_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in &values {
        let mut cfg = base.clone();
        match param {
            "p" => cfg.ensemble.p = v,
            "lambda" => cfg.ensemble.lambda = v,
            "members" => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(CliError::Usage(format!("members sweep value {v} is not a positive integer")));
                }
                cfg.ensemble.members = v as usize;
            }
            other => {
                return Err(CliError::Usage(format!(
                    "unknown sweep parameter '{other}' (use p, lambda or members)"
                )))
            }
        }
        cfg.out_dir = base.out_dir.join(format!("{param}_{v}"));
        cfg.validate()?;
        let rep = run_ensemble(&cfg)?;
        rows.push(vec![
            param.to_string(),
            report::fmt_f64(v),
            report::fmt_f64(rep.results.test_accuracy_pct),
            report::fmt_f64(rep.results.ece),
            report::fmt_f64(rep.results.overhead),
        ]);
        info!("sweep {param}={v}: acc {:.2}", rep.results.test_accuracy_pct);
    }
    let csv = base.out_dir.join("sweep.csv");
    report::write_csv(&csv, &["param", "value", "test_accuracy_pct", "ece", "overhead"], &rows)?;
    Ok(csv)
}

/// Loads a saved model (or a directory of member models) and scores it on
/// a data directory holding either test.csv or images.idx plus labels.idx.
pub fn eval_saved(model: &Path, data_dir: &Path) -> Result<(usize, f64)> {
    let mut models = Vec::new();
    if model.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(model)
            .map_err(|e| CliError::io(model, e))?
            .filter_map(|r| r.ok().map(|d| d.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "model"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(CliError::Usage(format!("no .model files in {}", model.display())));
        }
        for p in paths {
            models.push(model_io::load_model(&p)?);
        }
    } else {
        models.push(model_io::load_model(model)?);
    }
    let classes = models[0].spec().classes();
    let csv = data_dir.join("test.csv");
    let ds = if csv.exists() {
        data::load_csv(&csv, classes)?
    } else {
        let img = data_dir.join("images.idx");
        let lab = data_dir.join("labels.idx");
        if img.exists() && lab.exists() {
            data::load_idx_pair(&img, &lab, classes)?
        } else {
            return Err(CliError::Usage(format!(
                "{} holds neither test.csv nor images.idx/labels.idx",
                data_dir.display()
            )));
        }
    };
    let preds = combine_dataset(&models, &ds, CombineMode::AvgSoftmax)?;
    Ok((ds.len(), preds.accuracy_pct()))
}
