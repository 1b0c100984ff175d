//! The finite-difference verification suite: per-operation checks, the full
//! grounder chain, and the end-to-end joint objective with the stochastic
//! selection held fixed. Runs at 64-bit only.
//!
//! The smoothed Top-K is a Monte-Carlo estimator of the gradient of an
//! expectation; for fixed noise the forward map is piecewise constant, so it
//! cannot be finite-difference checked. The end-to-end check therefore
//! treats the selection matrix as a constant, which leaves every
//! deterministic path (centers, masks, weights, regression, answer head)
//! under test, and the estimator gets its own finiteness and
//! direction-consistency check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::RunConfig;
use crate::error::{Error, Result};
use crate::grounder::{self, GrounderDims, GrounderNodes};
use crate::numerics::finitediff::{self, finite_diff_grad};
use crate::numerics::record::{ComputationRecord, ValueId};
use crate::numerics::tensor::{Precision, Tensor};
use crate::objectives::{self, HeadNodes};
use crate::pseudolabel::{cosine_scores, select_pseudo_labels, PseudoLabels};
use crate::selection::hard_topk;
use crate::trainer::{init_params, LoadedSample};
use crate::util::mix_seed;

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const INSTANCES_PER_OP: usize = 20;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub elapsed_seconds: f64,
}

/// Compares an analytic gradient against the oracle under the suite
/// tolerance. Exposed so reporting can be exercised against corrupted
/// gradients.
pub fn check_result(name: &str, analytic: &[f64], numeric: &[f64]) -> CheckResult {
    let max_rel_err = finitediff::max_rel_err(analytic, numeric, ABS_FLOOR);
    CheckResult {
        name: name.to_string(),
        max_rel_err,
        passed: finitediff::grads_match(analytic, numeric, REL_TOL, ABS_FLOOR),
    }
}

/// The desk-scale instance the suite runs on.
pub fn desk_config() -> RunConfig {
    RunConfig {
        t: 8,
        k: 2,
        d_i: 8,
        d_g: 16,
        layers: 2,
        heads: 4,
        t_max: 8,
        sigma: 0.2,
        tau: 0.1,
        alpha1: 0.1,
        alpha2: 0.1,
        n_intra: 2,
        n_inter: 2,
        lr: 1e-3,
        epochs: 1,
        batch_size: 2,
        seed: 0,
        eps_p: 0.05,
        n_p: 50,
        precision: "f64".to_string(),
    }
}

fn randn(extents: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = extents.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(extents, data, Precision::P64).unwrap()
}

/// Distinct, well-gapped values so extremum and ranking subgradients stay
/// away from ties under the finite-difference step.
fn gapped_vector(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.2).collect();
    for v in values.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        values.swap(i, j);
    }
    Tensor::vector(values, Precision::P64).unwrap()
}

type BuildFn = Box<dyn Fn(&mut ComputationRecord, &[ValueId]) -> Result<ValueId>>;
type GenFn = Box<dyn Fn(&mut ChaCha8Rng) -> Tensor>;

struct OpSpec {
    name: &'static str,
    generators: Vec<GenFn>,
    build: BuildFn,
}

fn loss_value(
    spec: &OpSpec,
    inputs: &[Tensor],
    weights: &Tensor,
) -> Result<(f64, ComputationRecord, Vec<ValueId>)> {
    let mut rec = ComputationRecord::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| rec.constant(t.clone())).collect();
    let out = (spec.build)(&mut rec, &ids)?;
    let w = rec.constant(weights.clone());
    let prod = rec.mul_elem(out, w)?;
    let loss = rec.sum_all(prod)?;
    let v = rec.value(loss).scalar_value();
    rec.backward(loss)?;
    Ok((v, rec, ids))
}

fn check_op(spec: &OpSpec, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut passed = true;
    for instance in 0..INSTANCES_PER_OP {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, instance as u64]));
        let inputs: Vec<Tensor> = spec.generators.iter().map(|g| g(&mut rng)).collect();
        // Shape probe to size the loss weights.
        let out_extents = {
            let mut rec = ComputationRecord::new();
            let ids: Vec<ValueId> = inputs.iter().map(|t| rec.constant(t.clone())).collect();
            let out = (spec.build)(&mut rec, &ids)?;
            rec.value(out).extents().to_vec()
        };
        let weights = randn(out_extents, &mut rng);
        let (_, rec, ids) = loss_value(spec, &inputs, &weights)?;
        for (i, &id) in ids.iter().enumerate() {
            let analytic = rec
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            let numeric = finite_diff_grad(
                &mut |x| {
                    let mut probe = inputs.clone();
                    probe[i] = x.clone();
                    Ok(loss_value(spec, &probe, &weights)?.0)
                },
                &inputs[i],
                FD_STEP,
            )?;
            let r = check_result(spec.name, &analytic, &numeric);
            worst = worst.max(r.max_rel_err);
            passed &= r.passed;
        }
    }
    Ok(CheckResult {
        name: spec.name.to_string(),
        max_rel_err: worst,
        passed,
    })
}

fn op_specs() -> Vec<OpSpec> {
    fn m34() -> GenFn {
        Box::new(|rng| randn(vec![3, 4], rng))
    }
    let mut specs: Vec<OpSpec> = Vec::new();

    specs.push(OpSpec {
        name: "op.matmul",
        generators: vec![m34(), Box::new(|rng| randn(vec![4, 2], rng))],
        build: Box::new(|rec, ids| rec.matmul(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "op.transpose",
        generators: vec![m34()],
        build: Box::new(|rec, ids| rec.transpose(ids[0])),
    });
    specs.push(OpSpec {
        name: "op.add",
        generators: vec![m34(), m34()],
        build: Box::new(|rec, ids| rec.add(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "op.sub",
        generators: vec![m34(), m34()],
        build: Box::new(|rec, ids| rec.sub(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "op.mul_elem",
        generators: vec![m34(), m34()],
        build: Box::new(|rec, ids| rec.mul_elem(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "op.scale",
        generators: vec![m34()],
        build: Box::new(|rec, ids| rec.scale(ids[0], 1.7)),
    });
    specs.push(OpSpec {
        name: "op.add_bias",
        generators: vec![m34(), Box::new(|rng| randn(vec![4], rng))],
        build: Box::new(|rec, ids| rec.add_bias(ids[0], ids[1])),
    });
    for (name, f) in [
        ("op.sigmoid", crate::numerics::record::UnaryFn::Sigmoid),
        ("op.exp", crate::numerics::record::UnaryFn::Exp),
        ("op.relu", crate::numerics::record::UnaryFn::Relu),
        ("op.gelu", crate::numerics::record::UnaryFn::Gelu),
        ("op.smooth_l1", crate::numerics::record::UnaryFn::SmoothL1),
    ] {
        specs.push(OpSpec {
            name,
            generators: vec![Box::new(|rng| {
                // Scaled down so exp stays tame and kinks stay far from the
                // finite-difference step.
                let t = randn(vec![3, 4], rng);
                let data = t.data().iter().map(|&v| v * 0.6 + 0.11).collect();
                Tensor::matrix(3, 4, data, Precision::P64).unwrap()
            })],
            build: Box::new(move |rec, ids| rec.unary(ids[0], f)),
        });
    }
    specs.push(OpSpec {
        name: "op.softmax_rows",
        generators: vec![Box::new(|rng| randn(vec![4, 5], rng))],
        build: Box::new(|rec, ids| rec.softmax_rows(ids[0], None)),
    });
    specs.push(OpSpec {
        name: "op.softmax_rows.masked",
        generators: vec![Box::new(|rng| randn(vec![2, 4], rng))],
        build: Box::new(|rec, ids| {
            let mask = [true, true, false, true, false, true, true, true];
            rec.softmax_rows(ids[0], Some(&mask))
        }),
    });
    specs.push(OpSpec {
        name: "op.layer_norm",
        generators: vec![
            Box::new(|rng| randn(vec![3, 5], rng)),
            Box::new(|rng| randn(vec![5], rng)),
            Box::new(|rng| randn(vec![5], rng)),
        ],
        build: Box::new(|rec, ids| rec.layer_norm(ids[0], ids[1], ids[2])),
    });
    specs.push(OpSpec {
        name: "op.slice_rows",
        generators: vec![Box::new(|rng| randn(vec![5, 3], rng))],
        build: Box::new(|rec, ids| rec.slice_rows(ids[0], 1, 4)),
    });
    specs.push(OpSpec {
        name: "op.slice_cols",
        generators: vec![Box::new(|rng| randn(vec![3, 6], rng))],
        build: Box::new(|rec, ids| rec.slice_cols(ids[0], 2, 5)),
    });
    specs.push(OpSpec {
        name: "op.concat_rows",
        generators: vec![Box::new(|rng| randn(vec![2, 4], rng)), Box::new(|rng| randn(vec![3, 4], rng))],
        build: Box::new(|rec, ids| rec.concat_rows(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "op.concat_cols",
        generators: vec![
            Box::new(|rng| randn(vec![3, 2], rng)),
            Box::new(|rng| randn(vec![3, 3], rng)),
            Box::new(|rng| randn(vec![3, 1], rng)),
        ],
        build: Box::new(|rec, ids| rec.concat_cols(ids)),
    });
    specs.push(OpSpec {
        name: "op.reshape",
        generators: vec![m34()],
        build: Box::new(|rec, ids| rec.reshape(ids[0], vec![12])),
    });
    specs.push(OpSpec {
        name: "op.sum_all",
        generators: vec![m34()],
        build: Box::new(|rec, ids| rec.sum_all(ids[0])),
    });
    specs.push(OpSpec {
        name: "op.min_all",
        generators: vec![Box::new(|rng| gapped_vector(10, rng))],
        build: Box::new(|rec, ids| rec.min_all(ids[0])),
    });
    specs.push(OpSpec {
        name: "op.max_all",
        generators: vec![Box::new(|rng| gapped_vector(10, rng))],
        build: Box::new(|rec, ids| rec.max_all(ids[0])),
    });
    specs.push(OpSpec {
        name: "op.gather_elems",
        generators: vec![Box::new(|rng| randn(vec![12], rng))],
        build: Box::new(|rec, ids| {
            rec.gather_elems(ids[0], vec![0, 3, 3, 7, 11, 5], vec![6])
        }),
    });
    specs.push(OpSpec {
        name: "op.l2_normalize_rows",
        generators: vec![Box::new(|rng| randn(vec![4, 5], rng))],
        build: Box::new(|rec, ids| rec.l2_normalize_rows(ids[0])),
    });
    specs.push(OpSpec {
        name: "op.log_sum_exp_rows",
        generators: vec![Box::new(|rng| randn(vec![4, 5], rng))],
        build: Box::new(|rec, ids| rec.log_sum_exp_rows(ids[0])),
    });
    specs.push(OpSpec {
        name: "op.sub_scalar",
        generators: vec![m34(), Box::new(|rng| randn(vec![], rng))],
        build: Box::new(|rec, ids| rec.sub_scalar(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "op.div_scalar",
        generators: vec![
            m34(),
            Box::new(|rng| {
                let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
                Tensor::scalar(v.signum() * (0.5 + v.abs()), Precision::P64).unwrap()
            }),
        ],
        build: Box::new(|rec, ids| rec.div_scalar(ids[0], ids[1])),
    });
    specs.push(OpSpec {
        name: "objective.regression",
        generators: vec![Box::new(|rng| {
            let data = vec![
                0.1 + rng.gen_range(-0.02..0.02),
                0.5 + rng.gen_range(-0.02..0.02),
                0.85 + rng.gen_range(-0.02..0.02),
            ];
            Tensor::vector(data, Precision::P64).unwrap()
        })],
        build: Box::new(|rec, ids| {
            let labels = PseudoLabels(vec![2, 9, 14]);
            objectives::regression_loss(rec, ids[0], &labels, 16)
                .and_then(|l| rec.reshape(l, vec![]))
        }),
    });
    specs.push(OpSpec {
        name: "objective.info_nce",
        generators: vec![
            Box::new(|rng| randn(vec![1, 6], rng)),
            Box::new(|rng| randn(vec![2, 6], rng)),
            Box::new(|rng| randn(vec![3, 6], rng)),
        ],
        build: Box::new(|rec, ids| {
            objectives::info_nce(rec, ids[0], ids[1], Some(ids[2]), 0.1)
        }),
    });
    specs
}

fn synthetic_sample(cfg: &RunConfig, seed: u64) -> LoadedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = randn(vec![cfg.t, cfg.d_i], &mut rng);
    let question = randn(vec![4, cfg.d_i], &mut rng);
    let description = randn(vec![1, cfg.d_i], &mut rng);
    let candidates = randn(vec![5, cfg.d_i], &mut rng);
    let desc_vec = Tensor::vector(description.data().to_vec(), Precision::P64).unwrap();
    let scores = cosine_scores(&frames, &desc_vec).unwrap();
    let labels = select_pseudo_labels(&scores, cfg.k).unwrap();
    LoadedSample {
        id: format!("gradcheck-{seed}"),
        frames,
        question,
        description,
        candidates,
        answer: (seed % 5) as usize,
        labels,
        question_mask: vec![true; 4],
    }
}

/// Loss of the grounder chain (weighted sum of `p`) as a function of the
/// parameter named `target` when `replacement` is substituted for it.
fn chain_loss(
    cfg: &RunConfig,
    sample: &LoadedSample,
    weights: &Tensor,
    target: Option<(&str, &Tensor)>,
) -> Result<(f64, ComputationRecord, GrounderNodes)> {
    let mut store = init_params(cfg)?;
    if let Some((name, value)) = target {
        store.set_value(name, value.clone())?;
    }
    let dims = GrounderDims::from_config(cfg);
    let mut rec = ComputationRecord::new();
    let nodes = GrounderNodes::bind(&mut rec, &store, &dims)?;
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
    let w = rec.constant(weights.clone());
    let prod = rec.mul_elem(fwd.p, w)?;
    let loss = rec.sum_all(prod)?;
    let v = rec.value(loss).scalar_value();
    rec.backward(loss)?;
    Ok((v, rec, nodes))
}

fn grounder_chain_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x6C]));
    let sample = synthetic_sample(cfg, 42);
    let weights = randn(vec![cfg.t], &mut rng);
    let store = init_params(cfg)?;

    let mut results = Vec::new();
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("grounder."))
        .map(str::to_string)
        .collect();
    // Analytic gradients from one taped pass; parameters are re-bound inside
    // chain_loss, so grab grads by walking its record.
    let (_, rec, nodes) = chain_loss(cfg, &sample, &weights, None)?;
    let grad_of = |name: &str| -> Vec<f64> {
        // Parameter leaves were pushed in bind order; look them up by name
        // through the store-binding helper below.
        nodes_grad(&rec, &nodes, name)
    };
    for name in &names {
        let base = store.value(name)?.clone();
        let analytic = grad_of(name);
        let numeric = finite_diff_grad(
            &mut |x| Ok(chain_loss(cfg, &sample, &weights, Some((name, x)))?.0),
            &base,
            FD_STEP,
        )?;
        results.push(check_result(&format!("grounder.chain.{name}"), &analytic, &numeric));
    }
    Ok(results)
}

/// Gradient of a bound grounder parameter, by name.
fn nodes_grad(rec: &ComputationRecord, nodes: &GrounderNodes, name: &str) -> Vec<f64> {
    let id = nodes.lookup(name).expect("known grounder parameter");
    rec.grad(id).map(|g| g.to_vec()).unwrap_or_default()
}

/// Joint loss with the selection matrix frozen to the hard Top-K one-hots of
/// a base forward pass. Every deterministic path stays live: the regression
/// loss reaches the grounder through the centers and the answer loss reaches
/// the head parameters.
fn joint_detached_loss(
    cfg: &RunConfig,
    samples: &[LoadedSample],
    fixed_selections: &[Vec<usize>],
    store: &crate::numerics::optim::ParamStore,
) -> Result<(f64, ComputationRecord, GrounderNodes, HeadNodes)> {
    let dims = GrounderDims::from_config(cfg);
    let mut rec = ComputationRecord::new();
    let gnodes = GrounderNodes::bind(&mut rec, store, &dims)?;
    let hnodes = HeadNodes::bind(&mut rec, store)?;
    let mut totals = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let frames = rec.constant(sample.frames.clone());
        let question = rec.constant(sample.question.clone());
        let description = rec.constant(sample.description.clone());
        let candidates = rec.constant(sample.candidates.clone());
        let fwd = grounder::forward(
            &mut rec,
            &gnodes,
            frames,
            question,
            &sample.question_mask,
            cfg.sigma,
        )?;
        // Selection detached: constant one-hot rows at the fixed indices.
        let mut s = vec![0.0; cfg.k * cfg.t];
        for (rank, &idx) in fixed_selections[i].iter().enumerate() {
            s[rank * cfg.t + (idx - 1)] = 1.0;
        }
        let s = rec.constant(Tensor::matrix(cfg.k, cfg.t, s, Precision::P64)?);
        let selected = rec.matmul(s, frames)?;

        // Intra negatives only; deterministic lowest-weight pick.
        let p_vals = rec.value(fwd.p).data().to_vec();
        let mut neg_rng = ChaCha8Rng::seed_from_u64(7);
        let negs = crate::selection::mine_negatives(
            &p_vals,
            &fixed_selections[i],
            0,
            1,
            cfg.n_intra,
            0,
            &mut neg_rng,
        )?;
        let d_i = sample.frames.cols();
        let mut rows = Vec::new();
        for &t in &negs.intra {
            rows.extend_from_slice(sample.frames.row(t - 1));
        }
        let neg_node = if rows.is_empty() {
            None
        } else {
            Some(rec.constant(Tensor::matrix(negs.intra.len(), d_i, rows, Precision::P64)?))
        };
        let l_con = objectives::info_nce(&mut rec, description, selected, neg_node, cfg.tau)?;
        let l_reg = objectives::regression_loss(&mut rec, fwd.mu, &sample.labels, cfg.t)?;
        let (l_vqa, _) = objectives::vqa_surrogate_loss(
            &mut rec,
            &hnodes,
            selected,
            question,
            &sample.question_mask,
            candidates,
            sample.answer,
        )?;
        let (total, _) =
            objectives::joint_loss(&mut rec, l_vqa, l_reg, l_con, cfg.alpha1, cfg.alpha2)?;
        totals.push(total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = rec.add(acc, t)?;
    }
    let mean = rec.scale(acc, 1.0 / totals.len() as f64)?;
    let v = rec.value(mean).scalar_value();
    rec.backward(mean)?;
    Ok((v, rec, gnodes, hnodes))
}

fn joint_checks(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let samples = vec![synthetic_sample(cfg, 80), synthetic_sample(cfg, 81)];
    let base_store = init_params(cfg)?;

    // Fix the selections from the base parameters once, so every
    // finite-difference evaluation sees the same constant S.
    let mut fixed = Vec::new();
    for sample in &samples {
        let (p, _, _) = crate::trainer::eval::grounder_values(&base_store, cfg, sample)?;
        fixed.push(hard_topk(&p, cfg.k)?);
    }

    let eval_at = |name: &str, value: &Tensor| -> Result<f64> {
        let mut store = init_params(cfg)?;
        store.set_value(name, value.clone())?;
        Ok(joint_detached_loss(cfg, &samples, &fixed, &store)?.0)
    };

    let (_, rec, gnodes, hnodes) = joint_detached_loss(cfg, &samples, &fixed, &base_store)?;
    let mut results = Vec::new();
    let names: Vec<String> = base_store.names().map(str::to_string).collect();
    for name in &names {
        let analytic = if name.starts_with("grounder.") {
            nodes_grad(&rec, &gnodes, name)
        } else {
            let id = match name.as_str() {
                "head.l1.weight" => hnodes.l1_weight,
                "head.l1.bias" => hnodes.l1_bias,
                "head.l2.weight" => hnodes.l2_weight,
                "head.l2.bias" => hnodes.l2_bias,
                other => return Err(Error::Contract(format!("unknown parameter {other}"))),
            };
            rec.grad(id).map(|g| g.to_vec()).unwrap_or_default()
        };
        let base = base_store.value(name)?.clone();
        let analytic = if analytic.is_empty() {
            vec![0.0; base.len()]
        } else {
            analytic
        };
        let numeric = finite_diff_grad(&mut |x| eval_at(name, x), &base, FD_STEP)?;
        results.push(check_result(&format!("joint.detached.{name}"), &analytic, &numeric));
    }
    Ok(results)
}

fn perturbed_topk_check(cfg: &RunConfig) -> Result<CheckResult> {
    // Finiteness plus row-sum sanity of the estimator on the desk instance.
    let mut rec = ComputationRecord::new();
    let p_vals = gapped_vector(cfg.t, &mut ChaCha8Rng::seed_from_u64(5));
    let p = rec.constant(p_vals);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = rec.perturbed_topk(p, cfg.k, cfg.eps_p, 2000, &mut rng)?;
    let frames = randn(vec![cfg.t, 3], &mut ChaCha8Rng::seed_from_u64(9));
    let frames = rec.constant(frames);
    let sel = rec.matmul(s, frames)?;
    let loss = rec.sum_all(sel)?;
    rec.backward(loss)?;
    let grad = rec.grad(p).unwrap();
    let finite = grad.iter().all(|g| g.is_finite());
    let nonzero = grad.iter().any(|&g| g != 0.0);
    let mut rows_ok = true;
    for row in 0..cfg.k {
        let sum: f64 = rec.value(s).row(row).iter().sum();
        rows_ok &= (sum - 1.0).abs() < 1e-6;
    }
    Ok(CheckResult {
        name: "selection.perturbed_topk.estimator".to_string(),
        max_rel_err: 0.0,
        passed: finite && nonzero && rows_ok,
    })
}

/// Runs the whole suite on a 64-bit config.
pub fn run(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.precision_mode()? != Precision::P64 {
        return Err(Error::Validation(
            "the gradient-check suite requires precision \"f64\"".into(),
        ));
    }
    let start = std::time::Instant::now();
    let mut checks = Vec::new();
    for (i, spec) in op_specs().iter().enumerate() {
        checks.push(check_op(spec, mix_seed(&[cfg.seed, 0x09, i as u64]))?);
    }
    checks.extend(grounder_chain_checks(cfg)?);
    checks.extend(joint_checks(cfg)?);
    checks.push(perturbed_topk_check(cfg)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        checks,
        passed,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_default() -> Result<GradCheckReport> {
    run(&desk_config())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_reported_for_exactly_that_op() {
        let analytic = vec![1.0, 2.0, 3.0];
        let mut corrupted = analytic.clone();
        corrupted[1] += 0.5;
        let good = check_result("op.fixture", &analytic, &analytic);
        assert!(good.passed);
        assert_eq!(good.max_rel_err, 0.0);
        let bad = check_result("op.fixture", &corrupted, &analytic);
        assert!(!bad.passed);
        assert_eq!(bad.name, "op.fixture");
        assert!(bad.max_rel_err > 0.1);
    }
}
