//! Evaluation: the fully discrete selection path, baseline arms, and metric
//! aggregation. Never mutates parameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataio::{load_manifest, RunConfig};
use crate::error::{Error, Result};
use crate::grounder::{self, GrounderDims, GrounderNodes};
use crate::numerics::optim::ParamStore;
use crate::numerics::record::ComputationRecord;
use crate::numerics::tensor::Tensor;
use crate::objectives::{self, HeadNodes};
use crate::selection::{gather_hard, hard_topk};
use crate::synth::{load_sidecar, oracle_metrics, GroundTruth, Sidecar};
use crate::trainer::{build_batch_graph, checkpoint, load_samples, LoadedSample};
use crate::util::mix_seed;

/// Mean loss components over a split.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SplitLosses {
    pub l_vqa: f64,
    pub l_reg: f64,
    pub l_con: f64,
    pub total: f64,
}

/// Forward grounder values of one sample without gradient bookkeeping kept.
pub fn grounder_values(
    store: &ParamStore,
    cfg: &RunConfig,
    sample: &LoadedSample,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let dims = GrounderDims::from_config(cfg);
    let mut rec = ComputationRecord::new();
    let nodes = GrounderNodes::bind(&mut rec, store, &dims)?;
    let frames = rec.constant(sample.frames.clone());
    let question = rec.constant(sample.question.clone());
    let fwd = grounder::forward(
        &mut rec,
        &nodes,
        frames,
        question,
        &sample.question_mask,
        cfg.sigma,
    )?;
    Ok((
        rec.value(fwd.p).data().to_vec(),
        rec.value(fwd.mu).data().to_vec(),
        rec.value(fwd.masks).data().to_vec(),
    ))
}

/// Candidate logits with a hard gather of the given 1-based frame indices.
pub fn hard_logits(
    store: &ParamStore,
    cfg: &RunConfig,
    sample: &LoadedSample,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let mut rec = ComputationRecord::new();
    let head = HeadNodes::bind(&mut rec, store)?;
    let gathered = gather_hard(&sample.frames, indices)?;
    let selected = rec.constant(gathered);
    let question = rec.constant(sample.question.clone());
    let candidates = rec.constant(sample.candidates.clone());
    let logits = objectives::answer_logits(
        &mut rec,
        &head,
        selected,
        question,
        &sample.question_mask,
        candidates,
    )?;
    let _ = cfg;
    Ok(rec.value(logits).data().to_vec())
}

fn argmax_lowest(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Answer accuracy over samples with the fully discrete Top-K path.
pub fn answer_accuracy_hard(
    store: &ParamStore,
    cfg: &RunConfig,
    samples: &[LoadedSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for sample in samples {
        let (p, _, _) = grounder_values(store, cfg, sample)?;
        let indices = hard_topk(&p, cfg.k)?;
        let logits = hard_logits(store, cfg, sample, &indices)?;
        if argmax_lowest(&logits) == sample.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean loss breakdown over a split, chunked like training but without any
/// parameter update.
pub fn split_losses(
    store: &ParamStore,
    cfg: &RunConfig,
    samples: &[LoadedSample],
    stream: u64,
) -> Result<SplitLosses> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut sums = SplitLosses {
        l_vqa: 0.0,
        l_reg: 0.0,
        l_con: 0.0,
        total: 0.0,
    };
    let mut batches = 0usize;
    for (chunk_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut rec = ComputationRecord::new();
        let chunk_stream = mix_seed(&[stream, chunk_idx as u64]);
        let (_, breakdown, _) =
            build_batch_graph(&mut rec, store, cfg, samples, chunk, chunk_stream)?;
        sums.l_vqa += breakdown.l_vqa;
        sums.l_reg += breakdown.l_reg;
        sums.l_con += breakdown.l_con;
        sums.total += breakdown.total;
        batches += 1;
    }
    let inv = 1.0 / batches.max(1) as f64;
    Ok(SplitLosses {
        l_vqa: sums.l_vqa * inv,
        l_reg: sums.l_reg * inv,
        l_con: sums.l_con * inv,
        total: sums.total * inv,
    })
}

/// Evenly spaced 1-based frame indices: the uniform-sampling baseline.
pub fn uniform_indices(t: usize, k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for j in 0..k {
        let mut idx = (((j as f64 + 0.5) * t as f64 / k as f64).round() as usize).clamp(1, t);
        while chosen.contains(&idx) {
            idx = idx % t + 1;
        }
        chosen.push(idx);
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub answer_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keyframe_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub losses: SplitLosses,
    /// The trained grounder with discrete Top-K selection.
    pub grounded: ArmReport,
    /// Evenly spaced frame selection.
    pub uniform: ArmReport,
    /// Selection directly at the pseudo-labeled timestamps.
    pub pseudo_oracle: ArmReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_agreement: Option<f64>,
}

pub struct EvalOptions<'a> {
    pub checkpoint: &'a Path,
    pub manifest: &'a Path,
    pub sidecar: Option<&'a Path>,
    pub out_dir: &'a Path,
}

struct ArmAccumulator {
    correct: usize,
    recall_sum: f64,
    center_err_sum: f64,
    with_gt: usize,
}

impl ArmAccumulator {
    fn new() -> Self {
        ArmAccumulator {
            correct: 0,
            recall_sum: 0.0,
            center_err_sum: 0.0,
            with_gt: 0,
        }
    }

    fn add(
        &mut self,
        sample: &LoadedSample,
        indices: &[usize],
        logits: &[f64],
        mu: &[f64],
        gt: Option<&GroundTruth>,
        t: usize,
    ) {
        if argmax_lowest(logits) == sample.answer {
            self.correct += 1;
        }
        if let Some(gt) = gt {
            let m = oracle_metrics(indices, gt, logits, mu, t);
            self.recall_sum += m.keyframe_recall;
            self.center_err_sum += m.center_error;
            self.with_gt += 1;
        }
    }

    fn report(&self, n: usize, with_center: bool) -> ArmReport {
        ArmReport {
            answer_accuracy: self.correct as f64 / n.max(1) as f64,
            keyframe_recall: (self.with_gt > 0).then(|| self.recall_sum / self.with_gt as f64),
            center_error: (self.with_gt > 0 && with_center)
                .then(|| self.center_err_sum / self.with_gt as f64),
        }
    }
}

/// Full evaluation of a checkpoint on a manifest: the grounded arm plus the
/// uniform and pseudo-label-oracle baselines, a per-sample selection dump,
/// and mean losses. Grounding metrics require the sidecar and are omitted
/// without it.
pub fn evaluate(opts: &EvalOptions) -> Result<EvalReport> {
    let (store, cfg, _) = checkpoint::load_checkpoint(opts.checkpoint)?;
    let dataset = load_manifest(opts.manifest)?;
    if dataset.manifest.t != cfg.t || dataset.manifest.d_i != cfg.d_i {
        return Err(Error::Validation(format!(
            "checkpoint was trained for T={} D_I={}, manifest has T={} D_I={}",
            cfg.t, cfg.d_i, dataset.manifest.t, dataset.manifest.d_i
        )));
    }
    let precision = cfg.precision_mode()?;
    let samples = load_samples(&dataset, cfg.k, precision)?;
    let sidecar: Option<Sidecar> = match opts.sidecar {
        Some(path) => Some(load_sidecar(path)?),
        None => None,
    };

    fs::create_dir_all(opts.out_dir)?;
    let mut selection_csv = String::from("sample_id");
    for j in 1..=cfg.k {
        selection_csv.push_str(&format!(",sel_{j}"));
    }
    selection_csv.push('\n');

    let uniform = uniform_indices(cfg.t, cfg.k);
    let mut grounded_acc = ArmAccumulator::new();
    let mut uniform_acc = ArmAccumulator::new();
    let mut oracle_acc = ArmAccumulator::new();
    let mut agreement_sum = 0.0;
    let mut agreement_n = 0usize;

    for sample in &samples {
        let (p, mu, _) = grounder_values(&store, &cfg, sample)?;
        let chosen = hard_topk(&p, cfg.k)?;
        let gt = sidecar.as_ref().and_then(|s| s.get(&sample.id));

        let logits = hard_logits(&store, &cfg, sample, &chosen)?;
        grounded_acc.add(sample, &chosen, &logits, &mu, gt, cfg.t);

        let logits_u = hard_logits(&store, &cfg, sample, &uniform)?;
        uniform_acc.add(sample, &uniform, &logits_u, &[], gt, cfg.t);

        let logits_o = hard_logits(&store, &cfg, sample, &sample.labels.0)?;
        oracle_acc.add(sample, &sample.labels.0, &logits_o, &[], gt, cfg.t);

        if let Some(gt) = gt {
            let planted: std::collections::BTreeSet<usize> =
                gt.timestamps.iter().cloned().collect();
            let hits = sample.labels.0.iter().filter(|w| planted.contains(w)).count();
            agreement_sum +=
                hits as f64 / sample.labels.0.len().min(gt.timestamps.len()).max(1) as f64;
            agreement_n += 1;
        }

        selection_csv.push_str(&sample.id);
        for idx in &chosen {
            selection_csv.push_str(&format!(",{idx}"));
        }
        selection_csv.push('\n');
    }

    let losses = split_losses(&store, &cfg, &samples, mix_seed(&[cfg.seed, 0xEE]))?;
    let report = EvalReport {
        samples: samples.len(),
        losses,
        grounded: grounded_acc.report(samples.len(), true),
        uniform: uniform_acc.report(samples.len(), false),
        pseudo_oracle: oracle_acc.report(samples.len(), false),
        pseudo_label_agreement: (agreement_n > 0)
            .then(|| agreement_sum / agreement_n as f64),
    };

    fs::write(opts.out_dir.join("selection.csv"), selection_csv)?;
    fs::write(
        opts.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Per-sample mask and weight traces (CSV: sample id, t, g_1..g_K, p_t).
pub fn dump_weights(
    checkpoint_dir: &Path,
    manifest_path: &Path,
    out_csv: &Path,
) -> Result<PathBuf> {
    let (store, cfg, _) = checkpoint::load_checkpoint(checkpoint_dir)?;
    let dataset = load_manifest(manifest_path)?;
    let precision = cfg.precision_mode()?;
    let samples = load_samples(&dataset, cfg.k, precision)?;

    let mut csv = String::from("sample_id,t");
    for k in 1..=cfg.k {
        csv.push_str(&format!(",g_{k}"));
    }
    csv.push_str(",p\n");
    for sample in &samples {
        let (p, _, masks) = grounder_values(&store, &cfg, sample)?;
        for t in 0..cfg.t {
            csv.push_str(&format!("{},{}", sample.id, t + 1));
            for k in 0..cfg.k {
                csv.push_str(&format!(",{}", masks[k * cfg.t + t]));
            }
            csv.push_str(&format!(",{}\n", p[t]));
        }
    }
    fs::write(out_csv, csv)?;
    Ok(out_csv.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_indices_are_stratum_centers() {
        assert_eq!(uniform_indices(32, 4), vec![4, 12, 20, 28]);
        assert_eq!(uniform_indices(8, 2), vec![2, 6]);
        assert_eq!(uniform_indices(4, 4), vec![1, 2, 3, 4]);
        // Collisions resolved while keeping K distinct indices.
        assert_eq!(uniform_indices(3, 3), vec![1, 2, 3]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_lowest(&[0.2, 0.9, 0.9]), 1);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }
}
