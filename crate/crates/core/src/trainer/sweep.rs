//! Hyperparameter sweeps over independent seeded synthetic runs, one CSV
//! row per (value, seed).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::RunConfig;
use crate::error::{Error, Result};
use crate::synth::{generate_dataset, SynthSpec};
use crate::trainer::eval::{evaluate, EvalOptions};
use crate::trainer::{train, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    T,
    Sigma,
    NIntra,
    NInter,
    K,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" => Ok(SweepAxis::T),
            "sigma" => Ok(SweepAxis::Sigma),
            "n_intra" | "nintra" => Ok(SweepAxis::NIntra),
            "n_inter" | "ninter" => Ok(SweepAxis::NInter),
            "k" => Ok(SweepAxis::K),
            other => Err(Error::Validation(format!(
                "unknown sweep axis {other:?}; expected one of t, sigma, n_intra, n_inter, k"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SweepAxis::T => "t",
            SweepAxis::Sigma => "sigma",
            SweepAxis::NIntra => "n_intra",
            SweepAxis::NInter => "n_inter",
            SweepAxis::K => "k",
        };
        f.write_str(s)
    }
}

/// Applies one axis value to a (config, data spec) pair.
fn apply_value(
    axis: SweepAxis,
    value: f64,
    cfg: &RunConfig,
    spec: &SynthSpec,
) -> Result<(RunConfig, SynthSpec)> {
    let mut cfg = cfg.clone();
    let mut spec = spec.clone();
    let as_usize = |v: f64| -> Result<usize> {
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Validation(format!(
                "axis {axis} needs a non-negative integer, got {v}"
            )));
        }
        Ok(v as usize)
    };
    match axis {
        SweepAxis::T => {
            cfg.t = as_usize(value)?;
            spec.t = cfg.t;
            // Intra mining capacity shrinks with T.
            cfg.n_intra = cfg.n_intra.min(cfg.t.saturating_sub(cfg.k));
        }
        SweepAxis::Sigma => cfg.sigma = value,
        SweepAxis::NIntra => cfg.n_intra = as_usize(value)?,
        SweepAxis::NInter => cfg.n_inter = as_usize(value)?,
        SweepAxis::K => {
            cfg.k = as_usize(value)?;
            cfg.n_intra = cfg.n_intra.min(cfg.t.saturating_sub(cfg.k));
        }
    }
    cfg.validate()?;
    spec.validate()?;
    Ok((cfg, spec))
}

/// Runs the sweep: per value and seed, generate data, train, evaluate, and
/// append one CSV row. Invalid values are skipped with a logged reason and
/// the remaining values still run.
pub fn sweep(
    base_config: &RunConfig,
    base_spec: &SynthSpec,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("axis,value,seed,recall,answer_acc,center_error,skipped_reason\n");
    for &value in values {
        let (cfg, spec) = match apply_value(axis, value, base_config, base_spec) {
            Ok(pair) => pair,
            Err(e) => {
                eprintln!("sweep: skipping {axis}={value}: {e}");
                csv.push_str(&format!("{axis},{value},,,,,\"{e}\"\n"));
                continue;
            }
        };
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            let mut run_spec = spec.clone();
            run_spec.seed = seed;
            let run_dir = out_dir.join(format!("{axis}_{value}_seed{seed}"));
            let data_dir = run_dir.join("data");
            let generated = generate_dataset(&run_spec, &data_dir)?;
            let summary = train(&TrainOptions {
                config: run_cfg.clone(),
                manifest: &generated.train_manifest,
                test_manifest: None,
                out_dir: &run_dir,
            })?;
            let report = evaluate(&EvalOptions {
                checkpoint: &summary.checkpoint_dir,
                manifest: &generated.test_manifest,
                sidecar: Some(&generated.test_sidecar),
                out_dir: &run_dir.join("eval"),
            })?;
            csv.push_str(&format!(
                "{axis},{value},{seed},{},{},{},\n",
                report.grounded.keyframe_recall.unwrap_or(f64::NAN),
                report.grounded.answer_accuracy,
                report.grounded.center_error.unwrap_or(f64::NAN),
            ));
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    fs::write(&csv_path, csv)?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!(SweepAxis::parse("sigma").unwrap(), SweepAxis::Sigma);
        assert_eq!(SweepAxis::parse("T").unwrap(), SweepAxis::T);
        assert_eq!(SweepAxis::parse("N_INTRA").unwrap(), SweepAxis::NIntra);
        assert!(SweepAxis::parse("bogus").is_err());
    }

    #[test]
    fn invalid_value_is_rejected_by_apply() {
        let cfg = RunConfig::default();
        let spec = SynthSpec::default();
        assert!(apply_value(SweepAxis::K, 100.0, &cfg, &spec).is_err());
        assert!(apply_value(SweepAxis::Sigma, -0.2, &cfg, &spec).is_err());
        let (cfg2, spec2) = apply_value(SweepAxis::T, 48.0, &cfg, &spec).unwrap();
        assert_eq!(cfg2.t, 48);
        assert_eq!(spec2.t, 48);
    }
}
