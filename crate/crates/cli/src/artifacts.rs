use std::path::Path;

use stvisit_core::metrics::ReliabilityPoint;
use stvisit_core::pipeline::SplitForecast;

use crate::CliError;

pub fn write_selective(path: &Path, curve: &[(f64, f64)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kept_fraction", "mae"])?;
    for (kept, mae) in curve {
        w.write_record([kept.to_string(), mae.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reliability(path: &Path, curve: &[ReliabilityPoint]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "nominal", "empirical"])?;
    for p in curve {
        w.write_record([
            p.source.clone(),
            p.nominal.to_string(),
            p.empirical.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (node, horizon step, category); horizon is 1-based.
/// Gaussian cells are empty for variants without the Gaussian head.
pub fn write_predictions(path: &Path, f: &SplitForecast, mc_columns: bool) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "node", "horizon", "category", "lower", "median", "upper", "mu", "sigma2",
    ];
    if mc_columns {
        header.extend(["aleatoric", "epistemic"]);
    }
    w.write_record(&header)?;
    let s = &f.set;
    let cell =
        |v: &Option<Vec<f64>>, i: usize| v.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
    for i in 0..s.target.len() {
        let mut row = vec![
            f.node[i].to_string(),
            (s.horizon[i] + 1).to_string(),
            s.category[i].to_string(),
            s.lower[i].to_string(),
            s.median[i].to_string(),
            s.upper[i].to_string(),
            cell(&s.mu, i),
            cell(&s.var, i),
        ];
        if mc_columns {
            let gaussian = s.mu.is_some();
            row.push(if gaussian {
                f.aleatoric[i].to_string()
            } else {
                String::new()
            });
            row.push(if gaussian {
                f.epistemic[i].to_string()
            } else {
                String::new()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
