//! Frame selection from the weight distribution: the smoothed Top-K used in
//! training, the discrete Top-K used at inference, and positive/negative
//! moment mining for the contrastive objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::record::{ComputationRecord, ValueId};
use crate::numerics::tensor::Tensor;

/// Negative moments for one anchor sample: frame indices of the same video
/// (1-based) and `(batch position, frame)` references into other videos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSet {
    pub intra: Vec<usize>,
    pub inter: Vec<(usize, usize)>,
}

/// Smoothed Top-K as a graph node; see
/// [`ComputationRecord::perturbed_topk`] for the estimator.
pub fn perturbed_topk(
    rec: &mut ComputationRecord,
    p: ValueId,
    k: usize,
    eps_p: f64,
    n_p: usize,
    rng: &mut impl Rng,
) -> Result<ValueId> {
    rec.perturbed_topk(p, k, eps_p, n_p, rng)
}

/// The K highest-weight frame indices, ties toward the smaller index,
/// returned in ascending temporal order (1-based).
pub fn hard_topk(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > p.len() {
        return Err(Error::Contract(format!(
            "hard_topk K={k} exceeds T={}",
            p.len()
        )));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].iter().map(|&i| i + 1).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Intra negatives are the lowest-weight frames outside the hard Top-K set;
/// inter negatives are seeded uniform draws over the other samples of the
/// batch.
pub fn mine_negatives(
    p: &[f64],
    hard_set: &[usize],
    anchor: usize,
    batch_size: usize,
    n_intra: usize,
    n_inter: usize,
    rng: &mut impl Rng,
) -> Result<NegativeSet> {
    let t = p.len();
    if n_intra > t - hard_set.len() {
        return Err(Error::Contract(format!(
            "N_intra={n_intra} exceeds T-K={}",
            t - hard_set.len()
        )));
    }
    if n_inter > 0 && batch_size < 2 {
        return Err(Error::Config(
            "inter negatives require at least two samples in the batch".into(),
        ));
    }
    if anchor >= batch_size {
        return Err(Error::Contract(format!(
            "anchor position {anchor} outside batch of {batch_size}"
        )));
    }

    let excluded: Vec<bool> = {
        let mut mask = vec![false; t];
        for &idx in hard_set {
            mask[idx - 1] = true;
        }
        mask
    };
    let mut order: Vec<usize> = (0..t).filter(|&i| !excluded[i]).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
    let mut intra: Vec<usize> = order[..n_intra].iter().map(|&i| i + 1).collect();
    intra.sort_unstable();

    let mut inter = Vec::with_capacity(n_inter);
    for _ in 0..n_inter {
        // Skip the anchor position when drawing the sample.
        let offset = rng.gen_range(1..batch_size);
        let sample = (anchor + offset) % batch_size;
        let frame = rng.gen_range(1..=t);
        inter.push((sample, frame));
    }
    Ok(NegativeSet { intra, inter })
}

/// Soft gather of the selected frames: `S . frames`, differentiable in both
/// the selection and the frames.
pub fn gather_selected(
    rec: &mut ComputationRecord,
    selection: ValueId,
    frames: ValueId,
) -> Result<ValueId> {
    rec.matmul(selection, frames)
}

/// Hard row gather by 1-based frame indices, used on the inference path.
pub fn gather_hard(frames: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let zero_based: Vec<usize> = indices.iter().map(|&i| i - 1).collect();
    frames.gather_rows(&zero_based)
}
