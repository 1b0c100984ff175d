//! Orchestration: batching, the joint training loop, evaluation, the
//! gradient-check suite, and ablation sweeps.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{load_manifest, Dataset, RunConfig};
use crate::error::{Error, Result};
use crate::grounder::{self, GrounderDims, GrounderNodes};
use crate::numerics::optim::{AdamWConfig, ParamStore};
use crate::numerics::record::{ComputationRecord, ValueId};
use crate::numerics::tensor::{Precision, Tensor};
use crate::objectives::{self, HeadNodes, LossBreakdown};
use crate::pseudolabel::{labels_for_sample, PseudoLabels};
use crate::selection::{self, hard_topk};
use crate::util::mix_seed;

const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const TAG_TOPK: u64 = 0xA1;
const TAG_NEGATIVES: u64 = 0xB2;
const TAG_SHUFFLE: u64 = 0xC3;
const TAG_INIT: u64 = 0xD4;

/// One dataset sample resident in memory, with pseudo-labels resolved.
pub struct LoadedSample {
    pub id: String,
    pub frames: Tensor,
    pub question: Tensor,
    /// 1 x D_I row matrix.
    pub description: Tensor,
    pub candidates: Tensor,
    pub answer: usize,
    pub labels: PseudoLabels,
    pub question_mask: Vec<bool>,
}

/// Loads every sample of a manifest, resolving pseudo-labels from the cache
/// or computing them fresh. The ground-truth sidecar is deliberately not
/// part of this path.
pub fn load_samples(
    dataset: &Dataset,
    k: usize,
    precision: Precision,
) -> Result<Vec<LoadedSample>> {
    let mut samples = Vec::with_capacity(dataset.len());
    for (i, record) in dataset.manifest.samples.iter().enumerate() {
        let (labels, _) = labels_for_sample(dataset, i, k)?;
        let frames = dataset.load_frames(record)?.to_precision(precision);
        let question = dataset.load_question(record)?.to_precision(precision);
        let description = dataset.load_description(record)?.to_precision(precision);
        let d_i = description.len();
        let description = Tensor::matrix(1, d_i, description.data().to_vec(), precision)?;
        let candidates = dataset.load_candidates(record)?.to_precision(precision);
        let l_q = question.rows();
        samples.push(LoadedSample {
            id: record.id.clone(),
            frames,
            question,
            description,
            candidates,
            answer: record.answer,
            labels,
            question_mask: vec![true; l_q],
        });
    }
    Ok(samples)
}

/// Fresh grounder plus answer-head parameters for a config.
pub fn init_params(cfg: &RunConfig) -> Result<ParamStore> {
    let precision = cfg.precision_mode()?;
    let dims = GrounderDims::from_config(cfg);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_INIT]));
    grounder::init_grounder_params(&mut store, &dims, precision, &mut rng)?;
    objectives::init_head_params(&mut store, cfg.d_i, precision, &mut rng)?;
    Ok(store)
}

/// Forward values of one sample that the discrete paths need.
pub struct SampleOutcome {
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    pub hard: Vec<usize>,
}

/// Builds the joint-loss graph for one batch: grounder forward, smoothed
/// Top-K, soft gather for both the contrastive positives and the answer
/// head, negative mining, and the three losses. Returns the batch-mean loss
/// node, the mean breakdown, and per-sample forward values.
pub fn build_batch_graph(
    rec: &mut ComputationRecord,
    store: &ParamStore,
    cfg: &RunConfig,
    samples: &[LoadedSample],
    chunk: &[usize],
    stream: u64,
) -> Result<(ValueId, LossBreakdown, Vec<SampleOutcome>)> {
    let dims = GrounderDims::from_config(cfg);
    let gnodes = GrounderNodes::bind(rec, store, &dims)?;
    let hnodes = HeadNodes::bind(rec, store)?;

    let mut totals: Vec<ValueId> = Vec::with_capacity(chunk.len());
    let mut sums = LossBreakdown {
        l_vqa: 0.0,
        l_reg: 0.0,
        l_con: 0.0,
        total: 0.0,
    };
    let mut outcomes = Vec::with_capacity(chunk.len());

    for (pos, &index) in chunk.iter().enumerate() {
        let sample = &samples[index];
        let frames = rec.constant(sample.frames.clone());
        let question = rec.constant(sample.question.clone());
        let description = rec.constant(sample.description.clone());
        let candidates = rec.constant(sample.candidates.clone());

        let fwd = grounder::forward(
            rec,
            &gnodes,
            frames,
            question,
            &sample.question_mask,
            cfg.sigma,
        )?;
        let p_vals = rec.value(fwd.p).data().to_vec();
        let mu_vals = rec.value(fwd.mu).data().to_vec();
        let hard = hard_topk(&p_vals, cfg.k)?;

        let mut topk_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[stream, TAG_TOPK, pos as u64]));
        let soft = rec.perturbed_topk(fwd.p, cfg.k, cfg.eps_p, cfg.n_p, &mut topk_rng)?;
        let selected = selection::gather_selected(rec, soft, frames)?;

        let mut neg_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[stream, TAG_NEGATIVES, pos as u64]));
        let negatives = selection::mine_negatives(
            &p_vals,
            &hard,
            pos,
            chunk.len(),
            cfg.n_intra,
            cfg.n_inter,
            &mut neg_rng,
        )?;
        let neg_count = negatives.intra.len() + negatives.inter.len();
        let neg_node = if neg_count == 0 {
            None
        } else {
            let d_i = sample.frames.cols();
            let mut rows = Vec::with_capacity(neg_count * d_i);
            for &t in &negatives.intra {
                rows.extend_from_slice(sample.frames.row(t - 1));
            }
            for &(peer, t) in &negatives.inter {
                rows.extend_from_slice(samples[chunk[peer]].frames.row(t - 1));
            }
            Some(rec.constant(Tensor::matrix(
                neg_count,
                d_i,
                rows,
                sample.frames.precision(),
            )?))
        };

        let l_con = objectives::info_nce(rec, description, selected, neg_node, cfg.tau)?;
        let l_reg = objectives::regression_loss(rec, fwd.mu, &sample.labels, cfg.t)?;
        let (l_vqa, _logits) = objectives::vqa_surrogate_loss(
            rec,
            &hnodes,
            selected,
            question,
            &sample.question_mask,
            candidates,
            sample.answer,
        )?;
        let (total, breakdown) =
            objectives::joint_loss(rec, l_vqa, l_reg, l_con, cfg.alpha1, cfg.alpha2)?;
        totals.push(total);
        sums.l_vqa += breakdown.l_vqa;
        sums.l_reg += breakdown.l_reg;
        sums.l_con += breakdown.l_con;
        sums.total += breakdown.total;
        outcomes.push(SampleOutcome {
            p: p_vals,
            mu: mu_vals,
            hard,
        });
    }

    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = rec.add(acc, t)?;
    }
    let inv = 1.0 / totals.len() as f64;
    let mean = rec.scale(acc, inv)?;
    let mean_breakdown = LossBreakdown {
        l_vqa: sums.l_vqa * inv,
        l_reg: sums.l_reg * inv,
        l_con: sums.l_con * inv,
        total: sums.total * inv,
    };
    Ok((mean, mean_breakdown, outcomes))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub steps_csv: PathBuf,
    pub epochs_run: usize,
    pub final_train_loss: f64,
}

pub struct TrainOptions<'a> {
    pub config: RunConfig,
    pub manifest: &'a Path,
    /// Optional held-out manifest for per-epoch test metrics.
    pub test_manifest: Option<&'a Path>,
    pub out_dir: &'a Path,
}

fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// The joint training loop. Deterministic given (seed, config, dataset):
/// metrics logs and checkpoints are bitwise reproducible.
pub fn train(opts: &TrainOptions) -> Result<TrainSummary> {
    let cfg = &opts.config;
    cfg.validate()?;
    let precision = cfg.precision_mode()?;
    let dataset = load_manifest(opts.manifest)?;
    check_dims(cfg, &dataset)?;
    if dataset.is_empty() {
        return Err(Error::Manifest("cannot train on an empty dataset".into()));
    }
    let samples = load_samples(&dataset, cfg.k, precision)?;
    let test_samples = match opts.test_manifest {
        Some(path) => {
            let test_dataset = load_manifest(path)?;
            check_dims(cfg, &test_dataset)?;
            Some(load_samples(&test_dataset, cfg.k, precision)?)
        }
        None => None,
    };

    let mut store = init_params(cfg)?;
    let adam = AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    };

    fs::create_dir_all(opts.out_dir)?;
    let mut steps_csv = String::from("step,l_vqa,l_reg,l_con,total\n");
    let mut metrics_csv = String::from("epoch,split,l_vqa,l_reg,l_con,total,answer_acc\n");

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut global_step = 0u64;
    let mut last_epoch_mean = LossBreakdown {
        l_vqa: 0.0,
        l_reg: 0.0,
        l_con: 0.0,
        total: 0.0,
    };

    for epoch in 0..cfg.epochs {
        shuffle(
            &mut order,
            &mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_SHUFFLE, epoch as u64])),
        );
        let mut epoch_sums = LossBreakdown {
            l_vqa: 0.0,
            l_reg: 0.0,
            l_con: 0.0,
            total: 0.0,
        };
        let chunks = batches(&order, cfg.batch_size);
        for (step_in_epoch, chunk) in chunks.iter().enumerate() {
            global_step += 1;
            let stream = mix_seed(&[
                cfg.seed,
                STREAM_TRAIN,
                epoch as u64,
                step_in_epoch as u64,
            ]);
            let mut rec = ComputationRecord::new();
            let (mean_loss, breakdown, _) =
                build_batch_graph(&mut rec, &store, cfg, &samples, chunk, stream)?;
            store.zero_grads();
            rec.backward_into(mean_loss, &mut store)?;
            store.adamw_step(&adam)?;

            steps_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                global_step, breakdown.l_vqa, breakdown.l_reg, breakdown.l_con, breakdown.total
            ));
            epoch_sums.l_vqa += breakdown.l_vqa;
            epoch_sums.l_reg += breakdown.l_reg;
            epoch_sums.l_con += breakdown.l_con;
            epoch_sums.total += breakdown.total;
        }
        let inv = 1.0 / chunks.len() as f64;
        last_epoch_mean = LossBreakdown {
            l_vqa: epoch_sums.l_vqa * inv,
            l_reg: epoch_sums.l_reg * inv,
            l_con: epoch_sums.l_con * inv,
            total: epoch_sums.total * inv,
        };

        // Train-split answer accuracy on a fixed-size subsample, hard path.
        let sub = samples.len().min(500);
        let train_acc = eval::answer_accuracy_hard(&store, cfg, &samples[..sub])?;
        metrics_csv.push_str(&format!(
            "{},train,{},{},{},{},{}\n",
            epoch,
            last_epoch_mean.l_vqa,
            last_epoch_mean.l_reg,
            last_epoch_mean.l_con,
            last_epoch_mean.total,
            train_acc
        ));
        if let Some(test) = &test_samples {
            let stream = mix_seed(&[cfg.seed, STREAM_EVAL, epoch as u64]);
            let losses = eval::split_losses(&store, cfg, test, stream)?;
            let test_acc = eval::answer_accuracy_hard(&store, cfg, test)?;
            metrics_csv.push_str(&format!(
                "{},test,{},{},{},{},{}\n",
                epoch, losses.l_vqa, losses.l_reg, losses.l_con, losses.total, test_acc
            ));
        }
    }

    let checkpoint_dir = opts.out_dir.join("checkpoint");
    checkpoint::save_checkpoint(&checkpoint_dir, &store, cfg, cfg.epochs)?;
    let metrics_path = opts.out_dir.join("metrics.csv");
    fs::write(&metrics_path, metrics_csv)?;
    let steps_path = opts.out_dir.join("steps.csv");
    fs::write(&steps_path, steps_csv)?;

    let run_meta = serde_json::json!({
        "config": cfg,
        "manifest": opts.manifest.display().to_string(),
        "test_manifest": opts.test_manifest.map(|p| p.display().to_string()),
        "samples": samples.len(),
        "parameters": store.names().count(),
        "steps": global_step,
    });
    fs::write(
        opts.out_dir.join("run.json"),
        serde_json::to_string_pretty(&run_meta)?,
    )?;

    Ok(TrainSummary {
        checkpoint_dir,
        metrics_csv: metrics_path,
        steps_csv: steps_path,
        epochs_run: cfg.epochs,
        final_train_loss: last_epoch_mean.total,
    })
}

fn check_dims(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    if dataset.manifest.t != cfg.t {
        return Err(Error::Validation(format!(
            "config T={} disagrees with manifest T={}",
            cfg.t, dataset.manifest.t
        )));
    }
    if dataset.manifest.d_i != cfg.d_i {
        return Err(Error::Validation(format!(
            "config D_I={} disagrees with manifest D_I={}",
            cfg.d_i, dataset.manifest.d_i
        )));
    }
    Ok(())
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
