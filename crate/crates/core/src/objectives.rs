//! The three training objectives and their weighted joint: center
//! regression against pseudo-labels, the description-moment contrastive
//! loss, and the multi-choice answer surrogate.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grounder::xavier_init_std;
use crate::numerics::optim::ParamStore;
use crate::numerics::record::{ComputationRecord, ValueId};
use crate::numerics::tensor::{Precision, Tensor};
use crate::pseudolabel::PseudoLabels;

/// Per-step loss components; `total` is exactly
/// `l_vqa + alpha1 * l_reg + alpha2 * l_con` as computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_vqa: f64,
    pub l_reg: f64,
    pub l_con: f64,
    pub total: f64,
}

/// Smooth-L1 discrepancy between sorted predicted centers and sorted
/// pseudo-label timestamps mapped to (0, 1].
pub fn regression_loss(
    rec: &mut ComputationRecord,
    mu: ValueId,
    labels: &PseudoLabels,
    t: usize,
) -> Result<ValueId> {
    let k = rec.value(mu).len();
    if labels.0.len() != k {
        return Err(Error::Contract(format!(
            "regression loss pairs {k} centers with {} labels",
            labels.0.len()
        )));
    }
    // Ascending 1-D matching: sort centers, pair with the (already
    // ascending) labels.
    let mu_vals = rec.value(mu).data().to_vec();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| mu_vals[a].partial_cmp(&mu_vals[b]).unwrap().then(a.cmp(&b)));

    let precision = rec.value(mu).precision();
    let sorted_mu = rec.gather_elems(mu, perm, vec![k])?;
    let targets: Vec<f64> = labels.0.iter().map(|&w| w as f64 / t as f64).collect();
    let target_node = rec.constant(Tensor::vector(targets, precision)?);
    let diff = rec.sub(sorted_mu, target_node)?;
    let losses = rec.smooth_l1(diff)?;
    rec.sum_all(losses)
}

/// infoNCE over L2-normalized embeddings: every positive shares one
/// denominator built from all intra and inter negatives. With no negatives
/// the loss is exactly zero.
pub fn info_nce(
    rec: &mut ComputationRecord,
    description: ValueId,
    positives: ValueId,
    negatives: Option<ValueId>,
    tau: f64,
) -> Result<ValueId> {
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("tau must be > 0, got {tau}")));
    }
    let k = rec.value(positives).rows();
    let d_norm = rec.l2_normalize_rows(description)?;
    let d_col = rec.transpose(d_norm)?;
    let pos_norm = rec.l2_normalize_rows(positives)?;
    let pos_sims = rec.matmul(pos_norm, d_col)?; // K x 1
    let pos_scaled = rec.scale(pos_sims, 1.0 / tau)?;

    let n_neg = match negatives {
        Some(n) => rec.value(n).rows(),
        None => 0,
    };
    let lse = if n_neg == 0 {
        // Denominator reduces to the positive term alone.
        rec.reshape(pos_scaled, vec![k])?
    } else {
        let neg = negatives.unwrap();
        let neg_norm = rec.l2_normalize_rows(neg)?;
        let neg_sims = rec.matmul(neg_norm, d_col)?; // N x 1
        let neg_scaled = rec.scale(neg_sims, 1.0 / tau)?;
        let all = rec.concat_rows(pos_scaled, neg_scaled)?; // (K+N) x 1
        // Row k of the gathered matrix holds [pos_k, neg_1 .. neg_N].
        let mut indices = Vec::with_capacity(k * (1 + n_neg));
        for row in 0..k {
            indices.push(row);
            for j in 0..n_neg {
                indices.push(k + j);
            }
        }
        let per_positive = rec.gather_elems(all, indices, vec![k, 1 + n_neg])?;
        rec.log_sum_exp_rows(per_positive)?
    };
    let lse_sum = rec.sum_all(lse)?;
    let pos_sum = rec.sum_all(pos_scaled)?;
    let gap = rec.sub(lse_sum, pos_sum)?;
    rec.scale(gap, 1.0 / k as f64)
}

/// Parameters of the answer surrogate: a two-layer perceptron over the
/// concatenated selected-frame mean and masked question mean, scored against
/// the candidate embeddings by scaled dot product.
pub fn init_head_params(
    store: &mut ParamStore,
    d_i: usize,
    precision: Precision,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(
        "head.l1.weight",
        xavier_init_std(vec![2 * d_i, d_i], precision, rng),
    )?;
    store.insert("head.l1.bias", Tensor::zeros(vec![d_i], precision))?;
    store.insert(
        "head.l2.weight",
        xavier_init_std(vec![d_i, d_i], precision, rng),
    )?;
    store.insert("head.l2.bias", Tensor::zeros(vec![d_i], precision))?;
    Ok(())
}

pub struct HeadNodes {
    pub l1_weight: ValueId,
    pub l1_bias: ValueId,
    pub l2_weight: ValueId,
    pub l2_bias: ValueId,
}

impl HeadNodes {
    pub fn bind(rec: &mut ComputationRecord, store: &ParamStore) -> Result<Self> {
        Ok(HeadNodes {
            l1_weight: rec.param(store, "head.l1.weight")?,
            l1_bias: rec.param(store, "head.l1.bias")?,
            l2_weight: rec.param(store, "head.l2.weight")?,
            l2_bias: rec.param(store, "head.l2.bias")?,
        })
    }
}

/// Candidate logits for the selected frames: the gradient path into the
/// grounder runs through `selected`.
pub fn answer_logits(
    rec: &mut ComputationRecord,
    head: &HeadNodes,
    selected: ValueId,
    question: ValueId,
    question_mask: &[bool],
    candidates: ValueId,
) -> Result<ValueId> {
    let k = rec.value(selected).rows();
    let d_i = rec.value(selected).cols();
    let l_q = rec.value(question).rows();
    if question_mask.len() != l_q {
        return Err(Error::Shape(format!(
            "question mask length {} does not match {l_q} tokens",
            question_mask.len()
        )));
    }
    let real = question_mask.iter().filter(|&&m| m).count();
    if real == 0 {
        return Err(Error::InvalidMask("question is entirely padding".into()));
    }
    let precision = rec.value(selected).precision();

    let mean_sel_w = rec.constant(Tensor::matrix(1, k, vec![1.0 / k as f64; k], precision)?);
    let mean_sel = rec.matmul(mean_sel_w, selected)?;
    let mut q_weights = vec![0.0; l_q];
    for (i, &m) in question_mask.iter().enumerate() {
        if m {
            q_weights[i] = 1.0 / real as f64;
        }
    }
    let mean_q_w = rec.constant(Tensor::matrix(1, l_q, q_weights, precision)?);
    let mean_q = rec.matmul(mean_q_w, question)?;

    let fused = rec.concat_cols(&[mean_sel, mean_q])?;
    let hidden = rec.matmul(fused, head.l1_weight)?;
    let hidden = rec.add_bias(hidden, head.l1_bias)?;
    let hidden = rec.gelu(hidden)?;
    let r = rec.matmul(hidden, head.l2_weight)?;
    let r = rec.add_bias(r, head.l2_bias)?;

    let cand_t = rec.transpose(candidates)?;
    let logits = rec.matmul(r, cand_t)?;
    rec.scale(logits, 1.0 / (d_i as f64).sqrt())
}

/// Cross-entropy of the candidate logits against the answer index.
pub fn cross_entropy(
    rec: &mut ComputationRecord,
    logits: ValueId,
    answer: usize,
) -> Result<ValueId> {
    let c = rec.value(logits).cols();
    if answer >= c {
        return Err(Error::Contract(format!(
            "answer index {answer} outside [0, {c})"
        )));
    }
    let lse = rec.log_sum_exp_rows(logits)?;
    let lse = rec.reshape(lse, vec![])?;
    let truth = rec.gather_elems(logits, vec![answer], vec![])?;
    rec.sub(lse, truth)
}

/// Answer surrogate loss plus its logits.
#[allow(clippy::too_many_arguments)]
pub fn vqa_surrogate_loss(
    rec: &mut ComputationRecord,
    head: &HeadNodes,
    selected: ValueId,
    question: ValueId,
    question_mask: &[bool],
    candidates: ValueId,
    answer: usize,
) -> Result<(ValueId, ValueId)> {
    let logits = answer_logits(rec, head, selected, question, question_mask, candidates)?;
    let loss = cross_entropy(rec, logits, answer)?;
    Ok((loss, logits))
}

/// Joint objective node plus the float breakdown read off the tape.
pub fn joint_loss(
    rec: &mut ComputationRecord,
    l_vqa: ValueId,
    l_reg: ValueId,
    l_con: ValueId,
    alpha1: f64,
    alpha2: f64,
) -> Result<(ValueId, LossBreakdown)> {
    if alpha1 < 0.0 || alpha2 < 0.0 {
        return Err(Error::Contract(format!(
            "loss weights must be non-negative, got {alpha1} and {alpha2}"
        )));
    }
    let reg_scaled = rec.scale(l_reg, alpha1)?;
    let con_scaled = rec.scale(l_con, alpha2)?;
    let partial = rec.add(l_vqa, reg_scaled)?;
    let total = rec.add(partial, con_scaled)?;
    let breakdown = LossBreakdown {
        l_vqa: rec.value(l_vqa).scalar_value(),
        l_reg: rec.value(l_reg).scalar_value(),
        l_con: rec.value(l_con).scalar_value(),
        total: rec.value(total).scalar_value(),
    };
    Ok((total, breakdown))
}
