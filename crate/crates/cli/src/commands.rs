use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stvisit_core::config::RunConfig;
use stvisit_core::data::{generate_synthetic, load_bundle, save_bundle, DatasetBundle};
use stvisit_core::model::Model;
use stvisit_core::pipeline::{
    calibrate as fit_margin, check_compatible, evaluate, forecast, prepare, train_variant,
    ForecastOptions,
};
use stvisit_core::training::{write_history, Checkpoint, TrainData};
use stvisit_core::uncertainty::{apply_calibration, CalibrationRecord};
use stvisit_core::Error;

use crate::artifacts::{write_predictions, write_reliability, write_selective};
use crate::{CliError, CommonArgs};

type CliResult<T> = Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CALIBRATION_FILE: &str = "calibration.json";

/// Loads the config and applies flag overrides, then re-validates.
fn load_run(a: &CommonArgs, data_seed: bool) -> CliResult<RunConfig> {
    let mut run = RunConfig::load(&a.config).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {}", a.config.display(), io),
        )),
        other => other,
    })?;
    if let Some(seed) = a.seed {
        run.seed = seed;
        if data_seed {
            run.data.seed = seed;
        }
    }
    if let Some(v) = &a.variant {
        run.variant = v.parse()?;
    }
    if let Some(alpha) = a.alpha {
        run.uq.alpha = alpha;
    }
    if let Some(d) = &a.data {
        run.paths.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        run.paths.out = Some(o.clone());
    }
    run.resolve()?;
    Ok(run)
}

fn data_dir(run: &RunConfig) -> CliResult<PathBuf> {
    run.paths.data.clone().ok_or_else(|| {
        CliError::Usage("no dataset directory: pass --data or set paths.data".into())
    })
}

fn out_dir(run: &RunConfig) -> CliResult<PathBuf> {
    let dir = run.paths.out.clone().ok_or_else(|| {
        CliError::Usage("no output directory: pass --out or set paths.out".into())
    })?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_data(run: &RunConfig) -> CliResult<DatasetBundle> {
    let dir = data_dir(run)?;
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} does not exist", dir.display()),
        ))
        .into());
    }
    Ok(load_bundle(&dir)?.0)
}

/// Checkpoint model plus the windowed data it applies to.
fn load_trained(run: &RunConfig, out: &Path) -> CliResult<(Model, DatasetBundle, TrainData)> {
    let ckpt = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
    let model = ckpt.model()?;
    let bundle = load_data(run)?;
    check_compatible(&model.spec, &bundle, run)?;
    let data = prepare(&bundle, run)?;
    Ok((model, bundle, data))
}

fn load_calibration(out: &Path) -> CliResult<Option<CalibrationRecord>> {
    let path = out.join(CALIBRATION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn warn_uncalibrated() {
    eprintln!(
        "WARNING: no {} in the output directory; intervals are NOT conformally calibrated",
        CALIBRATION_FILE
    );
}

pub fn gen_data(a: &CommonArgs) -> CliResult<()> {
    let run = load_run(a, true)?;
    let dir = a
        .out
        .clone()
        .or_else(|| run.paths.data.clone())
        .ok_or_else(|| {
            CliError::Usage("no bundle directory: pass --out, --data or set paths.data".into())
        })?;
    let bundle = generate_synthetic(&run.data)?;
    let m = save_bundle(&bundle, &run.window, &dir)?;
    println!(
        "wrote {}: {} nodes, {} steps, {} categories, d_dem {}, d_ext {}",
        dir.display(),
        m.n_nodes,
        m.n_steps,
        m.n_categories,
        m.d_dem,
        m.d_ext
    );
    let s = &m.splits;
    println!(
        "{} windows: train {}, val {}, cal {}, test {}",
        m.n_windows,
        s.train.len(),
        s.val.len(),
        s.cal.len(),
        s.test.len()
    );
    Ok(())
}

pub fn train(a: &CommonArgs) -> CliResult<()> {
    let run = load_run(a, false)?;
    let bundle = load_data(&run)?;
    let out = out_dir(&run)?;
    let data = prepare(&bundle, &run)?;
    let (model, outcome) = train_variant(&bundle, &data, &run, run.variant)?;
    let config = serde_json::to_value(&run)?;
    Checkpoint::capture(&model, &outcome, config).save(&model, &out.join(CHECKPOINT_FILE))?;
    write_history(
        &outcome.history,
        BufWriter::new(fs::File::create(out.join("history.csv"))?),
    )?;
    write_json(&out.join("config.resolved.json"), &run)?;
    println!(
        "trained {} for {} epochs; best epoch {} with validation loss {:.6}",
        run.variant,
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val
    );
    Ok(())
}

pub fn calibrate(a: &CommonArgs) -> CliResult<()> {
    let run = load_run(a, false)?;
    let out = out_dir(&run)?;
    let (model, _, data) = load_trained(&run, &out)?;
    if !model.spec.variant.calibrates() {
        eprintln!(
            "note: variant {} skips conformal widening; the record is written but not applied",
            model.spec.variant
        );
    }
    let rec = fit_margin(&model, &data, &run, run.uq.alpha)?;
    write_json(&out.join(CALIBRATION_FILE), &rec)?;
    println!(
        "calibrated on {} points at alpha {}: margin c = {}, raw coverage {:.2}%",
        rec.n_cal, rec.alpha, rec.margin_c, rec.raw_coverage
    );
    Ok(())
}

pub fn eval(a: &CommonArgs) -> CliResult<()> {
    let run = load_run(a, false)?;
    let out = out_dir(&run)?;
    let (model, _, data) = load_trained(&run, &out)?;
    let calibration = load_calibration(&out)?;
    if calibration.is_none() {
        warn_uncalibrated();
    }
    let test: Vec<usize> = data.splits.test.clone().collect();
    let ev = evaluate(&model, &data, &run, "test", &test, calibration.as_ref())?;
    write_json(&out.join("eval_report.json"), &ev.report)?;
    ev.report.write_csv(BufWriter::new(fs::File::create(
        out.join("eval_report.csv"),
    )?))?;
    write_selective(&out.join("selective_curve.csv"), &ev.selective)?;
    write_reliability(&out.join("reliability_curve.csv"), &ev.reliability)?;
    let h = &ev.report.headline;
    println!(
        "test ({}): MAE {:.4} RMSE {:.4} MPIW {:.4} IS {:.4} COV {:.2}% [{}]",
        if ev.report.calibrated {
            "calibrated"
        } else {
            "UNCALIBRATED"
        },
        h.mae,
        h.rmse,
        h.mpiw,
        h.interval_score,
        h.coverage,
        if ev.report.coverage_pass {
            "pass"
        } else {
            "below target"
        }
    );
    Ok(())
}

pub fn predict(a: &CommonArgs) -> CliResult<()> {
    let run = load_run(a, false)?;
    let out = out_dir(&run)?;
    let (model, _, data) = load_trained(&run, &out)?;
    let idx = a
        .window
        .ok_or_else(|| CliError::Usage("predict needs --window <idx>".into()))?;
    if idx >= data.windows.len() {
        return Err(Error::config(
            "window",
            format!("index {} out of range: {} windows", idx, data.windows.len()),
        )
        .into());
    }
    let calibration = load_calibration(&out)?;
    if calibration.is_none() {
        warn_uncalibrated();
    }
    let mut f = forecast(&model, &data, &[idx], ForecastOptions::from_run(&run))?;
    if let Some(rec) = calibration
        .as_ref()
        .filter(|_| model.spec.variant.calibrates())
    {
        let (lo, hi) = apply_calibration(&f.set.lower, &f.set.upper, rec.margin_c)?;
        f.set.lower = lo;
        f.set.upper = hi;
    }
    let path = out.join("predictions.csv");
    write_predictions(&path, &f, run.uq.mc_passes >= 2)?;
    println!("wrote {} ({} rows)", path.display(), f.set.target.len());
    Ok(())
}
