use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;

use ngc_core::checkpoint::load_checkpoint;
use ngc_core::data::{
    generate_synthetic, horizon_ms, load_dataset, save_dataset, windows, DataError, Dataset, PoseSequence, SynthConfig,
};
use ngc_core::model::{Model, Variant};
use ngc_core::tensor::Tensor;
use ngc_core::train::{evaluate, train as run_training, EvalReport, Trainer, TrainOutputs};
use ngc_core::verify::full_report;

use crate::config::Settings;
use crate::error::{CliError, Result};
use crate::{AblateArgs, EvalArgs, GenDataArgs, GradcheckArgs, PredictArgs, TrainArgs};

/// Horizons (frames) reported by default, 80–400 ms at 25 fps.
const REPORT_HORIZONS: [usize; 4] = [2, 4, 8, 10];
const PREDICT_BATCH: usize = 64;

const MAE_NOTE: &str = "# MAE is the mean absolute error of joint coordinates in the dataset's native \
coordinate space, not joint-angle space.";

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        fps: a.fps,
        ..SynthConfig::new(a.classes, a.per_class, a.joints, a.frames, a.seed)
    };
    let ds = generate_synthetic(&cfg).map_err(|e| match e {
        DataError::Invalid(msg) => CliError::Usage(msg),
        other => other.into(),
    })?;
    save_dataset(&ds, &a.out)?;
    println!(
        "wrote {}: {} sequences ({} classes x {}), {} joints, {} frames at {} fps",
        a.out.display(),
        ds.sequences.len(),
        a.classes,
        a.per_class,
        ds.n_joints(),
        a.frames,
        ds.fps
    );
    println!("labels: {}", ds.labels.join(", "));
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Default report horizons that fit in `horizon`, plus `horizon` itself.
fn report_horizons(horizon: usize) -> Vec<usize> {
    let mut hs: Vec<usize> = REPORT_HORIZONS.iter().copied().filter(|&h| h <= horizon).collect();
    if !hs.contains(&horizon) {
        hs.push(horizon);
    }
    hs
}

fn new_trainer(ds: &Dataset, s: &Settings) -> Result<Trainer> {
    s.train.validate()?;
    let mc = s.model_config(ds.n_joints(), ds.labels.len());
    mc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Trainer::new(ds, mc, s.train.clone())?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.seed.is_some() || a.hyper.sets_more_than_epochs() {
                return Err(CliError::Usage(
                    "--resume takes its settings from the checkpoint; only --epochs may be given".into(),
                ));
            }
            let mut state = load_checkpoint(path)?;
            if let Some(e) = a.hyper.epochs {
                state.config.epochs = e;
            }
            Trainer::resume(&ds, state)?
        }
        None => new_trainer(&ds, &a.hyper.settings(a.seed)?)?,
    };
    let metrics = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    let outputs = TrainOutputs {
        checkpoint: Some(a.out.clone()),
        metrics: Some(metrics.clone()),
    };
    let total = trainer.state.config.epochs;
    println!(
        "{} parameters; {} training and {} validation windows; epochs {}..{}",
        trainer.model().params.num_trainable_values(),
        trainer.train_windows.len(),
        trainer.val_windows.len(),
        trainer.state.epoch,
        total
    );
    run_training(&mut trainer, &ds, &outputs, |m| {
        if !a.quiet {
            println!(
                "epoch {:>4}/{total}  lr {:.2e}  tf {:.3}  l_pred {:.5}  l_rec {:.5}  loss {:.5}  val_loss {:.5}  val_mae {:.4}  val_acc {:.3}{}",
                m.epoch + 1,
                m.lr,
                m.tf_p,
                m.l_pred,
                m.l_rec,
                m.loss,
                m.val_loss,
                m.val_mae,
                m.val_accuracy,
                if m.improved { "  *" } else { "" }
            );
        }
    })?;
    println!("checkpoint: {} (latest: {})", a.out.display(), with_suffix(&a.out, ".last").display());
    println!("metrics: {}", metrics.display());

    let ws = if trainer.val_windows.is_empty() {
        &trainer.train_windows
    } else {
        &trainer.val_windows
    };
    let report = evaluate(trainer.model(), &ds, ws, &report_horizons(trainer.model().config.horizon))?;
    println!("final validation over {} windows:", report.n_windows);
    print_mae(&report);
    Ok(())
}

fn print_mae(report: &EvalReport) {
    for r in &report.rows {
        println!(
            "  {:>6} ms ({:>2} frames): MAE {:.5}  zero-velocity {:.5}",
            r.ms, r.frames, r.model_mae, r.zerov_mae
        );
    }
    match report.accuracy {
        Some(acc) => println!("  accuracy {acc:.4}"),
        None => println!("  accuracy n/a (unlabeled data)"),
    }
}

/// Joint count and edges must agree; labels too when the data has any.
fn check_compatible(model: &Model, ds: &Dataset, need_labels: bool) -> Result<()> {
    if ds.n_joints() != model.config.n_joints {
        return Err(CliError::Mismatch(format!(
            "data has {} joints, model {}",
            ds.n_joints(),
            model.config.n_joints
        )));
    }
    if ds.topology.edges() != model.topology.edges() {
        return Err(CliError::Mismatch("skeleton edges differ".into()));
    }
    let labeled = ds.sequences.iter().any(|s| s.label.is_some());
    if need_labels && labeled && ds.labels != model.labels {
        return Err(CliError::Mismatch(format!(
            "data labels {:?}, model labels {:?}",
            ds.labels, model.labels
        )));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if a.horizons.is_empty() || a.horizons.contains(&0) {
        return Err(CliError::Usage("--horizons must be positive frame counts".into()));
    }
    let model = load_checkpoint(&a.model)?.model;
    let ds = load_dataset(&a.data)?;
    check_compatible(&model, &ds, true)?;
    let longest = *a.horizons.iter().max().expect("non-empty");
    let ws = windows(&ds, model.config.tau, longest)?;
    let report = evaluate(&model, &ds, &ws, &a.horizons)?;

    println!("{MAE_NOTE}");
    println!("# {} windows, tau {}, {} fps", report.n_windows, model.config.tau, ds.fps);
    let mut out = csv::Writer::from_writer(std::io::stdout().lock());
    write_eval_csv(&mut out, &report).map_err(CliError::csv("<stdout>"))?;
    drop(out);
    if let Some(path) = &a.out {
        let file = File::create(path).map_err(CliError::io(path))?;
        write_eval_csv(&mut csv::Writer::from_writer(file), &report).map_err(CliError::csv(path))?;
    }
    match report.accuracy {
        Some(acc) => {
            println!("accuracy {acc:.4} ({} of {})", report.confusion.correct(), report.confusion.total());
            print!("{}", report.confusion);
        }
        None => println!("accuracy n/a (unlabeled data)"),
    }
    Ok(())
}

fn write_eval_csv<W: Write>(w: &mut csv::Writer<W>, report: &EvalReport) -> csv::Result<()> {
    w.write_record(["horizon_ms", "model_mae", "zerov_mae"])?;
    for r in &report.rows {
        w.write_record([r.ms.to_string(), r.model_mae.to_string(), r.zerov_mae.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    if a.frames == 0 {
        return Err(CliError::Usage("--frames must be positive".into()));
    }
    let model = load_checkpoint(&a.model)?.model;
    let input = load_dataset(&a.input)?;
    check_compatible(&model, &input, false)?;
    let (tau, n) = (model.config.tau, model.config.n_joints);
    if let Some((i, s)) = input.sequences.iter().enumerate().find(|(_, s)| s.n_frames() < tau) {
        return Err(DataError::TooShort {
            sequence: i,
            frames: s.n_frames(),
            needed: tau,
        }
        .into());
    }
    let per = n * 3;
    let mut sequences = Vec::with_capacity(input.sequences.len());
    for chunk in input.sequences.chunks(PREDICT_BATCH) {
        let b = chunk.len();
        let mut prev = vec![0.0; tau * b * per];
        for (bi, s) in chunk.iter().enumerate() {
            let start = s.n_frames() - tau;
            for t in 0..tau {
                prev[(t * b + bi) * per..(t * b + bi + 1) * per].copy_from_slice(s.frame(start + t));
            }
        }
        let x_prev = Tensor::new(&[tau, b, n, 3], prev).map_err(ngc_core::model::ModelError::from)?;
        let inf = model.infer(&x_prev, a.frames)?;
        let poses = inf.poses.data();
        for bi in 0..b {
            let mut frames = Vec::with_capacity(a.frames * per);
            for t in 0..a.frames {
                frames.extend_from_slice(&poses[(t * b + bi) * per..(t * b + bi + 1) * per]);
            }
            let label = model.labels[inf.labels[bi]].clone();
            sequences.push(PoseSequence::new(frames, n, Some(label))?);
        }
    }
    let out = Dataset {
        topology: model.topology.clone(),
        sequences,
        labels: model.labels.clone(),
        fps: input.fps,
    };
    save_dataset(&out, &a.out)?;
    if let Some(path) = &a.csv {
        write_pose_csv(path, &out)?;
    }
    println!(
        "predicted {} frames for {} sequences -> {}",
        a.frames,
        out.sequences.len(),
        a.out.display()
    );
    for (i, s) in out.sequences.iter().enumerate() {
        println!("  sequence {i}: {}", s.label.as_deref().unwrap_or("?"));
    }
    Ok(())
}

fn write_pose_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    let run = |w: &mut csv::Writer<File>| -> csv::Result<()> {
        w.write_record(["sequence", "label", "frame", "joint", "x", "y", "z"])?;
        for (i, s) in ds.sequences.iter().enumerate() {
            let label = s.label.as_deref().unwrap_or("");
            for t in 0..s.n_frames() {
                for (j, p) in s.frame(t).chunks(3).enumerate() {
                    w.write_record([
                        i.to_string(),
                        label.to_string(),
                        t.to_string(),
                        j.to_string(),
                        p[0].to_string(),
                        p[1].to_string(),
                        p[2].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(CliError::csv(path))
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(a.tol > 0.0) || !(a.step > 0.0) || a.per_param == 0 {
        return Err(CliError::Usage("--tol, --step and --per-param must be positive".into()));
    }
    let report = full_report(a.seed, a.per_param, a.step, a.tol);
    print!("{report}");
    let failed = report.failures().count();
    let total = report.entries.len();
    println!("{} of {total} checks passed at tolerance {:e}", total - failed, a.tol);
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("{failed} of {total} gradient checks failed")))
    }
}

#[derive(Clone, Debug)]
struct AblationRow {
    variant: Variant,
    seed: Option<u64>,
    accuracy: Option<f64>,
    mae: f64,
}

fn ablate_variant(ds: &Dataset, test: Option<&Dataset>, base: &Settings, variant: Variant, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut s = base.clone();
        s.variant = variant;
        s.train.seed = seed;
        let mut trainer = new_trainer(ds, &s)?;
        run_training(&mut trainer, ds, &TrainOutputs::default(), |_| {})?;
        let horizon = s.horizon;
        let report = match test {
            Some(t) => evaluate(trainer.model(), t, &windows(t, s.tau, horizon)?, &[horizon])?,
            None if trainer.val_windows.is_empty() => evaluate(trainer.model(), ds, &trainer.train_windows, &[horizon])?,
            None => evaluate(trainer.model(), ds, &trainer.val_windows, &[horizon])?,
        };
        let row = AblationRow {
            variant,
            seed: Some(seed),
            accuracy: report.accuracy,
            mae: report.rows[0].model_mae,
        };
        eprintln!("{variant} seed {seed}: accuracy {}, mae {:.5}", fmt_acc(row.accuracy), row.mae);
        rows.push(row);
    }
    Ok(rows)
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |a| format!("{a:.4}"))
}

fn mean_row(variant: Variant, rows: &[AblationRow]) -> AblationRow {
    let k = rows.len() as f64;
    let accuracy = rows
        .iter()
        .map(|r| r.accuracy)
        .sum::<Option<f64>>()
        .map(|s| s / k);
    AblationRow {
        variant,
        seed: None,
        accuracy,
        mae: rows.iter().map(|r| r.mae).sum::<f64>() / k,
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    if a.seeds.is_empty() || a.variants.is_empty() {
        return Err(CliError::Usage("need at least one seed and one variant".into()));
    }
    let mut variants: Vec<Variant> = Vec::new();
    for v in &a.variants {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let base = a.hyper.settings(None)?;
    base.train.validate()?;
    let ds = load_dataset(&a.data)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    if let Some(t) = &test {
        if t.labels != ds.labels || t.n_joints() != ds.n_joints() {
            return Err(CliError::Mismatch("test data labels or joints differ from training data".into()));
        }
    }

    let per_variant: Vec<Result<Vec<AblationRow>>> = if a.parallel {
        thread::scope(|scope| {
            let handles: Vec<_> = variants
                .iter()
                .map(|&v| {
                    let (ds, test, base, seeds) = (&ds, test.as_ref(), &base, &a.seeds);
                    scope.spawn(move || ablate_variant(ds, test, base, v, seeds))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ablation thread panicked")).collect()
        })
    } else {
        variants
            .iter()
            .map(|&v| ablate_variant(&ds, test.as_ref(), &base, v, &a.seeds))
            .collect()
    };

    let mut table = Vec::new();
    let mut means = Vec::new();
    for (v, rows) in variants.iter().zip(per_variant) {
        let rows = rows?;
        let mean = mean_row(*v, &rows);
        table.extend(rows);
        table.push(mean.clone());
        means.push(mean);
    }
    let ms = horizon_ms(base.horizon, ds.fps);
    let scored_on = if test.is_some() { "held-out data" } else { "each run's validation split" };
    println!("ablation over seeds {:?}, scored on {scored_on}, MAE at {ms} ms", a.seeds);
    println!("{:<10} {:>6} {:>9} {:>9}", "variant", "seed", "accuracy", "mae");
    for r in &table {
        let seed = r.seed.map_or_else(|| "mean".into(), |s| s.to_string());
        println!("{:<10} {:>6} {:>9} {:>9.5}", r.variant.name(), seed, fmt_acc(r.accuracy), r.mae);
    }
    let full = means.iter().find(|m| m.variant == Variant::Full);
    if let (Some(full), true) = (full, means.len() > 1) {
        println!("directional expectations (reported, not asserted):");
        for other in means.iter().filter(|m| m.variant != Variant::Full) {
            let holds = full.mae <= other.mae;
            println!(
                "  full mae {:.5} <= {} mae {:.5}: {}",
                full.mae,
                other.variant,
                other.mae,
                if holds { "holds" } else { "does not hold" }
            );
        }
    }
    if let Some(path) = &a.out {
        write_ablation_csv(path, &table, ms)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_ablation_csv(path: &Path, table: &[AblationRow], ms: f64) -> Result<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    let run = |w: &mut csv::Writer<File>| -> csv::Result<()> {
        w.write_record(["variant", "seed", "accuracy", "horizon_ms", "mae"])?;
        for r in table {
            w.write_record([
                r.variant.name().to_string(),
                r.seed.map_or_else(|| "mean".into(), |s| s.to_string()),
                r.accuracy.map_or_else(String::new, |a| a.to_string()),
                ms.to_string(),
                r.mae.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(CliError::csv(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_horizons_fit_the_model() {
        assert_eq!(report_horizons(10), vec![2, 4, 8, 10]);
        assert_eq!(report_horizons(5), vec![2, 4, 5]);
        assert_eq!(report_horizons(1), vec![1]);
    }

    #[test]
    fn mean_row_averages_and_propagates_missing_accuracy() {
        let row = |seed, accuracy, mae| AblationRow {
            variant: Variant::Full,
            seed: Some(seed),
            accuracy,
            mae,
        };
        let m = mean_row(Variant::Full, &[row(1, Some(0.5), 0.1), row(2, Some(1.0), 0.3)]);
        assert_eq!(m.seed, None);
        assert_eq!(m.accuracy, Some(0.75));
        assert!((m.mae - 0.2).abs() < 1e-15);
        assert_eq!(mean_row(Variant::Full, &[row(1, None, 0.1)]).accuracy, None);
    }
}
