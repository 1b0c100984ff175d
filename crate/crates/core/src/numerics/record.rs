//! Taped reverse-mode differentiation over dense tensors.
//!
//! A [`ComputationRecord`] is an append-only node sequence in topological
//! order: every operation evaluates eagerly, stores its forward value, and
//! remembers what it needs for the reverse sweep. `backward` walks the tape
//! once in reverse and accumulates gradients; parameter leaves can then be
//! flushed into a [`ParamStore`](super::optim::ParamStore).
//!
//! Scalars are rank-0 tensors, vectors rank-1, and everything sequence-shaped
//! is a rank-2 row-major matrix. Reductions that feed broadcast arithmetic
//! (`min_all`, `max_all`, `sum_all`) produce rank-0 nodes consumed by
//! `sub_scalar` / `div_scalar`.

use crate::error::{Error, Result};
use crate::numerics::optim::ParamStore;
use crate::numerics::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sigmoid,
    Exp,
    Relu,
    Gelu,
    /// Huber-style loss with the quadratic/linear switch at |x| = 1.
    SmoothL1,
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC_COEF: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    Transpose {
        a: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    MulElem {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        factor: f64,
    },
    AddBias {
        a: ValueId,
        bias: ValueId,
    },
    Unary {
        a: ValueId,
        f: UnaryFn,
    },
    SoftmaxRows {
        a: ValueId,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceRows {
        a: ValueId,
        start: usize,
    },
    SliceCols {
        a: ValueId,
        start: usize,
    },
    ConcatRows {
        a: ValueId,
        b: ValueId,
    },
    ConcatCols {
        parts: Vec<ValueId>,
    },
    Reshape {
        a: ValueId,
    },
    SumAll {
        a: ValueId,
    },
    MinAll {
        a: ValueId,
        arg: usize,
    },
    MaxAll {
        a: ValueId,
        arg: usize,
    },
    GatherElems {
        a: ValueId,
        indices: Vec<usize>,
    },
    L2NormalizeRows {
        a: ValueId,
        norms: Vec<f64>,
    },
    LogSumExpRows {
        a: ValueId,
    },
    SubScalar {
        a: ValueId,
        s: ValueId,
    },
    DivScalar {
        a: ValueId,
        s: ValueId,
    },
    /// Monte-Carlo smoothed Top-K ranking; `noise` holds `n_draws * t`
    /// standard-normal values and `picks` the chosen index per (draw, rank).
    PerturbedTopK {
        p: ValueId,
        eps: f64,
        n_draws: usize,
        noise: Vec<f64>,
        picks: Vec<u32>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    param: Option<String>,
}

#[derive(Default)]
pub struct ComputationRecord {
    nodes: Vec<Node>,
}

impl ComputationRecord {
    pub fn new() -> Self {
        ComputationRecord { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Input, value, None)
    }

    /// Inserts a named parameter leaf; `backward_into` later accumulates its
    /// gradient into the owning store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<ValueId> {
        let value = store.value(name)?.clone();
        Ok(self.push(Op::Input, value, Some(name.to_string())))
    }

    fn push(&mut self, op: Op, value: Tensor, param: Option<String>) -> ValueId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            param,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn out_precision(&self, a: ValueId, b: ValueId) -> Precision {
        Precision::promote(
            self.nodes[a.0].value.precision(),
            self.nodes[b.0].value.precision(),
        )
    }

    fn require_rank2(&self, id: ValueId, what: &str) -> Result<(usize, usize)> {
        let t = &self.nodes[id.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "{what} expects rank 2, got extents {:?}",
                t.extents()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    // ── arithmetic ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.require_rank2(a, "matmul lhs")?;
        let (kb, n) = self.require_rank2(b, "matmul rhs")?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner extents disagree: lhs is {m}x{ka}, rhs is {kb}x{n}"
            )));
        }
        let data = matmul_nn(
            self.nodes[a.0].value.data(),
            m,
            ka,
            self.nodes[b.0].value.data(),
            n,
        );
        let value = Tensor::matrix(m, n, data, self.out_precision(a, b))?;
        Ok(self.push(Op::MatMul { a, b }, value, None))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "transpose")?;
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, data, self.nodes[a.0].value.precision())?;
        Ok(self.push(Op::Transpose { a }, value, None))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.zip_elementwise(a, b, "mul_elem", |x, y| x * y, |a, b| Op::MulElem { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(ValueId, ValueId) -> Op,
    ) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.extents() != tb.extents() {
            return Err(Error::Shape(format!(
                "{what} extents disagree: {:?} vs {:?}",
                ta.extents(),
                tb.extents()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.extents().to_vec(), data, self.out_precision(a, b))?;
        Ok(self.push(op(a, b), value, None))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(t.extents().to_vec(), data, t.precision())?;
        Ok(self.push(Op::Scale { a, factor }, value, None))
    }

    /// Adds a rank-1 bias across every row of a rank-2 tensor.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "add_bias input")?;
        let tb = &self.nodes[bias.0].value;
        if tb.rank() != 1 || tb.len() != c {
            return Err(Error::Shape(format!(
                "add_bias expects bias of extents [{c}], got {:?}",
                tb.extents()
            )));
        }
        let ta = self.nodes[a.0].value.data();
        let bd = tb.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(ta[i * c + j] + bd[j]);
            }
        }
        let value = Tensor::matrix(r, c, data, self.out_precision(a, bias))?;
        Ok(self.push(Op::AddBias { a, bias }, value, None))
    }

    pub fn unary(&mut self, a: ValueId, f: UnaryFn) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let data: Vec<f64> = t.data().iter().map(|&x| unary_forward(f, x)).collect();
        let value = Tensor::new(t.extents().to_vec(), data, t.precision())?;
        Ok(self.push(Op::Unary { a, f }, value, None))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, UnaryFn::Sigmoid)
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, UnaryFn::Exp)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, UnaryFn::Relu)
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, UnaryFn::Gelu)
    }

    pub fn smooth_l1(&mut self, a: ValueId) -> Result<ValueId> {
        self.unary(a, UnaryFn::SmoothL1)
    }

    // ── row-structured operations ───────────────────────────────────

    /// Row-wise softmax with per-row max subtraction. `mask` entries set to
    /// `false` are excluded and come out exactly zero.
    pub fn softmax_rows(&mut self, a: ValueId, mask: Option<&[bool]>) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape(format!(
                    "softmax mask length {} does not match {r}x{c}",
                    m.len()
                )));
            }
        }
        let src = self.nodes[a.0].value.data();
        let keep = |i: usize, j: usize| mask.map_or(true, |m| m[i * c + j]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(i, j) {
                    max = max.max(src[i * c + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidMask(format!("row {i} is fully masked")));
            }
            let mut sum = 0.0;
            for j in 0..c {
                if keep(i, j) {
                    let e = (src[i * c + j] - max).exp();
                    data[i * c + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let value = Tensor::matrix(r, c, data, self.nodes[a.0].value.precision())?;
        Ok(self.push(
            Op::SoftmaxRows {
                a,
                mask: mask.map(|m| m.to_vec()),
            },
            value,
            None,
        ))
    }

    /// Row-wise layer normalization with epsilon fixed at 1e-5.
    pub fn layer_norm(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.require_rank2(x, "layer_norm input")?;
        if c < 2 {
            return Err(Error::Contract(format!(
                "layer_norm needs at least 2 columns, got {c}"
            )));
        }
        for (id, what) in [(gain, "gain"), (bias, "bias")] {
            let t = &self.nodes[id.0].value;
            if t.rank() != 1 || t.len() != c {
                return Err(Error::Shape(format!(
                    "layer_norm {what} expects extents [{c}], got {:?}",
                    t.extents()
                )));
            }
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let mut data = vec![0.0; r * c];
        let mut means = vec![0.0; r];
        let mut inv_stds = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..c {
                data[i * c + j] = g[j] * (row[j] - mean) * inv_std + b[j];
            }
        }
        let prec = Precision::promote(
            self.out_precision(x, gain),
            self.nodes[bias.0].value.precision(),
        );
        let value = Tensor::matrix(r, c, data, prec)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            value,
            None,
        ))
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Shape(format!(
                "slice_rows range {start}..{end} invalid for {r} rows"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let data = src[start * c..end * c].to_vec();
        let value = Tensor::matrix(end - start, c, data, self.nodes[a.0].value.precision())?;
        Ok(self.push(Op::SliceRows { a, start }, value, None))
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols range {start}..{end} invalid for {c} columns"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let value = Tensor::matrix(r, w, data, self.nodes[a.0].value.precision())?;
        Ok(self.push(Op::SliceCols { a, start }, value, None))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ra, ca) = self.require_rank2(a, "concat_rows lhs")?;
        let (rb, cb) = self.require_rank2(b, "concat_rows rhs")?;
        if ca != cb {
            return Err(Error::Shape(format!(
                "concat_rows column extents disagree: {ca} vs {cb}"
            )));
        }
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        let value = Tensor::matrix(ra + rb, ca, data, self.out_precision(a, b))?;
        Ok(self.push(Op::ConcatRows { a, b }, value, None))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let (r, _) = self.require_rank2(parts[0], "concat_cols part")?;
        let mut total_c = 0;
        let mut prec = self.nodes[parts[0].0].value.precision();
        for &p in parts {
            let (rp, cp) = self.require_rank2(p, "concat_cols part")?;
            if rp != r {
                return Err(Error::Shape(format!(
                    "concat_cols row extents disagree: {r} vs {rp}"
                )));
            }
            total_c += cp;
            prec = Precision::promote(prec, self.nodes[p.0].value.precision());
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::matrix(r, total_c, data, prec)?;
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, value, None))
    }

    pub fn reshape(&mut self, a: ValueId, extents: Vec<usize>) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let n: usize = extents.iter().product();
        if n != t.len() {
            return Err(Error::Shape(format!(
                "reshape to {:?} changes element count {} -> {n}",
                extents,
                t.len()
            )));
        }
        let value = Tensor::new(extents, t.data().to_vec(), t.precision())?;
        Ok(self.push(Op::Reshape { a }, value, None))
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum();
        let value = Tensor::scalar(s, t.precision())?;
        Ok(self.push(Op::SumAll { a }, value, None))
    }

    /// Minimum over all elements; the subgradient routes to the first
    /// minimizer in row-major order.
    pub fn min_all(&mut self, a: ValueId) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let (arg, &v) = t
            .data()
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| x.partial_cmp(y).unwrap())
            .expect("tensors are non-empty");
        let value = Tensor::scalar(v, t.precision())?;
        Ok(self.push(Op::MinAll { a, arg }, value, None))
    }

    pub fn max_all(&mut self, a: ValueId) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let (arg, &v) = t
            .data()
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.partial_cmp(y).unwrap())
            .expect("tensors are non-empty");
        let value = Tensor::scalar(v, t.precision())?;
        Ok(self.push(Op::MaxAll { a, arg }, value, None))
    }

    /// Flat-index gather: `out[i] = a[indices[i]]` with the output reshaped
    /// to `extents`.
    pub fn gather_elems(
        &mut self,
        a: ValueId,
        indices: Vec<usize>,
        extents: Vec<usize>,
    ) -> Result<ValueId> {
        let t = &self.nodes[a.0].value;
        let n: usize = extents.iter().product();
        if n != indices.len() {
            return Err(Error::Shape(format!(
                "gather extents {:?} disagree with {} indices",
                extents,
                indices.len()
            )));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in &indices {
            if i >= t.len() {
                return Err(Error::Contract(format!(
                    "gather index {i} out of range for {} elements",
                    t.len()
                )));
            }
            data.push(t.data()[i]);
        }
        let value = Tensor::new(extents, data, t.precision())?;
        Ok(self.push(Op::GatherElems { a, indices }, value, None))
    }

    pub fn l2_normalize_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "l2_normalize_rows")?;
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "zero-norm row {i} cannot be normalized"
                )));
            }
            norms[i] = norm;
            for j in 0..c {
                data[i * c + j] = row[j] / norm;
            }
        }
        let value = Tensor::matrix(r, c, data, self.nodes[a.0].value.precision())?;
        Ok(self.push(Op::L2NormalizeRows { a, norms }, value, None))
    }

    /// Stable per-row log-sum-exp of a rank-2 tensor, yielding a rank-1 result.
    pub fn log_sum_exp_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2(a, "log_sum_exp_rows")?;
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            data[i] = max + sum.ln();
        }
        let value = Tensor::vector(data, self.nodes[a.0].value.precision())?;
        Ok(self.push(Op::LogSumExpRows { a }, value, None))
    }

    /// `a - s` with `s` a rank-0 node broadcast over every element.
    pub fn sub_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        self.broadcast_scalar(a, s, "sub_scalar", |x, v| x - v, |a, s| Op::SubScalar { a, s })
    }

    /// `a / s` with `s` a rank-0 node broadcast over every element.
    pub fn div_scalar(&mut self, a: ValueId, s: ValueId) -> Result<ValueId> {
        self.broadcast_scalar(a, s, "div_scalar", |x, v| x / v, |a, s| Op::DivScalar { a, s })
    }

    fn broadcast_scalar(
        &mut self,
        a: ValueId,
        s: ValueId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(ValueId, ValueId) -> Op,
    ) -> Result<ValueId> {
        let ts = &self.nodes[s.0].value;
        if ts.rank() != 0 {
            return Err(Error::Shape(format!(
                "{what} expects a rank-0 scalar operand, got {:?}",
                ts.extents()
            )));
        }
        let v = ts.scalar_value();
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| f(x, v)).collect();
        let value = Tensor::new(ta.extents().to_vec(), data, self.out_precision(a, s))?;
        Ok(self.push(op(a, s), value, None))
    }

    // ── perturbed Top-K ────────────────────────────────────────────

    /// Monte-Carlo smoothed Top-K over a rank-1 score vector: row `k` of the
    /// K×T result is the average one-hot of the k-th largest perturbed score.
    /// The reverse sweep applies the perturbed-maximum gradient estimator.
    pub fn perturbed_topk(
        &mut self,
        p: ValueId,
        k: usize,
        eps: f64,
        n_draws: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<ValueId> {
        let t = {
            let tp = &self.nodes[p.0].value;
            if tp.rank() != 1 {
                return Err(Error::Shape(format!(
                    "perturbed_topk expects a rank-1 score vector, got {:?}",
                    tp.extents()
                )));
            }
            tp.len()
        };
        if k > t {
            return Err(Error::Contract(format!(
                "perturbed_topk K={k} exceeds T={t}"
            )));
        }
        if !(eps > 0.0) || n_draws == 0 {
            return Err(Error::Contract(
                "perturbed_topk needs eps > 0 and at least one draw".into(),
            ));
        }
        let scores = self.nodes[p.0].value.data().to_vec();
        let mut noise = vec![0.0f64; n_draws * t];
        for z in noise.iter_mut() {
            *z = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let mut picks = vec![0u32; n_draws * k];
        let mut s = vec![0.0; k * t];
        let mut order: Vec<usize> = Vec::with_capacity(t);
        let mut perturbed = vec![0.0; t];
        for d in 0..n_draws {
            for j in 0..t {
                perturbed[j] = scores[j] + eps * noise[d * t + j];
            }
            order.clear();
            order.extend(0..t);
            order.sort_unstable_by(|&x, &y| {
                perturbed[y]
                    .partial_cmp(&perturbed[x])
                    .unwrap()
                    .then(x.cmp(&y))
            });
            for rank in 0..k {
                let idx = order[rank];
                picks[d * k + rank] = idx as u32;
                s[rank * t + idx] += 1.0;
            }
        }
        let inv = 1.0 / n_draws as f64;
        for v in s.iter_mut() {
            *v *= inv;
        }
        let value = Tensor::matrix(k, t, s, self.nodes[p.0].value.precision())?;
        Ok(self.push(
            Op::PerturbedTopK {
                p,
                eps,
                n_draws,
                noise,
                picks,
            },
            value,
            None,
        ))
    }

    // ── reverse sweep ──────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    /// Gradients from a previous sweep on the same record are overwritten.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.nodes[loss.0].value.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward target must be a scalar, got extents {:?}",
                self.nodes[loss.0].value.extents()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    /// `backward` followed by flushing parameter-leaf gradients into `store`.
    /// Repeated calls without `store.zero_grads()` accumulate additively.
    pub fn backward_into(&mut self, loss: ValueId, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_param_grads(store)
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for node in &self.nodes {
            if let (Some(name), Some(grad)) = (&node.param, &node.grad) {
                store.add_grad(name, grad)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let add_into = |grads: &mut [Option<Vec<f64>>], target: ValueId, len: usize| -> () {
            if grads[target.0].is_none() {
                grads[target.0] = Some(vec![0.0; len]);
            }
        };
        macro_rules! grad_of {
            ($grads:expr, $target:expr) => {{
                let len = self.nodes[$target.0].value.len();
                add_into($grads, $target, len);
                $grads[$target.0].as_mut().unwrap()
            }};
        }

        match &self.nodes[id].op {
            Op::Input => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                let da = matmul_nt(g, m, n, self.nodes[b.0].value.data(), k);
                let db = matmul_tn(self.nodes[a.0].value.data(), m, k, g, n);
                axpy(grad_of!(grads, *a), &da);
                axpy(grad_of!(grads, *b), &db);
            }
            Op::Transpose { a } => {
                let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let da = grad_of!(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add { a, b } => {
                axpy(grad_of!(grads, *a), g);
                axpy(grad_of!(grads, *b), g);
            }
            Op::Sub { a, b } => {
                axpy(grad_of!(grads, *a), g);
                for (d, &gv) in grad_of!(grads, *b).iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::MulElem { a, b } => {
                {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let da = grad_of!(grads, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                let av = self.nodes[a.0].value.data().to_vec();
                let db = grad_of!(grads, *b);
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                let da = grad_of!(grads, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * f;
                }
            }
            Op::AddBias { a, bias } => {
                axpy(grad_of!(grads, *a), g);
                let c = self.nodes[bias.0].value.len();
                let db = grad_of!(grads, *bias);
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
            }
            Op::Unary { a, f } => {
                let f = *f;
                let xs = self.nodes[a.0].value.data().to_vec();
                let ys = self.nodes[id].value.data().to_vec();
                let da = grad_of!(grads, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * unary_derivative(f, xs[i], ys[i]);
                }
            }
            Op::SoftmaxRows { a, .. } => {
                let y = self.nodes[id].value.data().to_vec();
                let c = self.nodes[id].value.cols();
                let da = grad_of!(grads, *a);
                for (row_start, _) in y.chunks(c).enumerate().map(|(i, _)| (i * c, ())) {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[row_start + j] * y[row_start + j];
                    }
                    for j in 0..c {
                        da[row_start + j] += y[row_start + j] * (g[row_start + j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let (r, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let xs = self.nodes[x.0].value.data().to_vec();
                let gv = self.nodes[gain.0].value.data().to_vec();
                {
                    let dbias = grad_of!(grads, *bias);
                    for i in 0..r {
                        for j in 0..c {
                            dbias[j] += g[i * c + j];
                        }
                    }
                }
                {
                    let dgain = grad_of!(grads, *gain);
                    for i in 0..r {
                        for j in 0..c {
                            let xh = (xs[i * c + j] - mean[i]) * inv_std[i];
                            dgain[j] += g[i * c + j] * xh;
                        }
                    }
                }
                let dx = grad_of!(grads, *x);
                for i in 0..r {
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..c {
                        let xh = (xs[i * c + j] - mean[i]) * inv_std[i];
                        let dxh = g[i * c + j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let inv_c = 1.0 / c as f64;
                    for j in 0..c {
                        let xh = (xs[i * c + j] - mean[i]) * inv_std[i];
                        let dxh = g[i * c + j] * gv[j];
                        dx[i * c + j] +=
                            inv_std[i] * (dxh - inv_c * sum_dxh - xh * inv_c * sum_dxh_xh);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let c = self.nodes[a.0].value.cols();
                let off = start * c;
                let da = grad_of!(grads, *a);
                for (i, &gv) in g.iter().enumerate() {
                    da[off + i] += gv;
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.nodes[a.0].value.cols();
                let w = self.nodes[id].value.cols();
                let da = grad_of!(grads, *a);
                for i in 0..self.nodes[id].value.rows() {
                    for j in 0..w {
                        da[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::ConcatRows { a, b } => {
                let na = self.nodes[a.0].value.len();
                axpy(grad_of!(grads, *a), &g[..na]);
                axpy(grad_of!(grads, *b), &g[na..]);
            }
            Op::ConcatCols { parts } => {
                let r = self.nodes[id].value.rows();
                let total_c = self.nodes[id].value.cols();
                let mut col_off = 0;
                for &p in parts {
                    let cp = self.nodes[p.0].value.cols();
                    let dp = grad_of!(grads, p);
                    for i in 0..r {
                        for j in 0..cp {
                            dp[i * cp + j] += g[i * total_c + col_off + j];
                        }
                    }
                    col_off += cp;
                }
            }
            Op::Reshape { a } => {
                axpy(grad_of!(grads, *a), g);
            }
            Op::SumAll { a } => {
                let gv = g[0];
                for d in grad_of!(grads, *a).iter_mut() {
                    *d += gv;
                }
            }
            Op::MinAll { a, arg } | Op::MaxAll { a, arg } => {
                grad_of!(grads, *a)[*arg] += g[0];
            }
            Op::GatherElems { a, indices } => {
                let da = grad_of!(grads, *a);
                for (i, &idx) in indices.iter().enumerate() {
                    da[idx] += g[i];
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let c = self.nodes[id].value.cols();
                let y = self.nodes[id].value.data().to_vec();
                let da = grad_of!(grads, *a);
                for i in 0..norms.len() {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        da[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                    }
                }
            }
            Op::LogSumExpRows { a } => {
                let c = self.nodes[a.0].value.cols();
                let xs = self.nodes[a.0].value.data().to_vec();
                let out = self.nodes[id].value.data().to_vec();
                let da = grad_of!(grads, *a);
                for i in 0..out.len() {
                    for j in 0..c {
                        da[i * c + j] += g[i] * (xs[i * c + j] - out[i]).exp();
                    }
                }
            }
            Op::SubScalar { a, s } => {
                axpy(grad_of!(grads, *a), g);
                grad_of!(grads, *s)[0] -= g.iter().sum::<f64>();
            }
            Op::DivScalar { a, s } => {
                let sv = self.nodes[s.0].value.scalar_value();
                {
                    let da = grad_of!(grads, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] / sv;
                    }
                }
                let av = self.nodes[a.0].value.data().to_vec();
                let mut acc = 0.0;
                for i in 0..g.len() {
                    acc += g[i] * av[i];
                }
                grad_of!(grads, *s)[0] -= acc / (sv * sv);
            }
            Op::PerturbedTopK {
                p,
                eps,
                n_draws,
                noise,
                picks,
            } => {
                let t = self.nodes[p.0].value.len();
                let k = self.nodes[id].value.rows();
                let scale = 1.0 / (*n_draws as f64 * *eps);
                let dp = grad_of!(grads, *p);
                for d in 0..*n_draws {
                    let mut coeff = 0.0;
                    for rank in 0..k {
                        let idx = picks[d * k + rank] as usize;
                        coeff += g[rank * t + idx];
                    }
                    if coeff != 0.0 {
                        for j in 0..t {
                            dp[j] += scale * coeff * noise[d * t + j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn unary_forward(f: UnaryFn, x: f64) -> f64 {
    match f {
        UnaryFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryFn::Exp => x.exp(),
        UnaryFn::Relu => x.max(0.0),
        UnaryFn::Gelu => {
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
        UnaryFn::SmoothL1 => {
            if x.abs() < 1.0 {
                0.5 * x * x
            } else {
                x.abs() - 0.5
            }
        }
    }
}

fn unary_derivative(f: UnaryFn, x: f64, y: f64) -> f64 {
    match f {
        UnaryFn::Sigmoid => y * (1.0 - y),
        UnaryFn::Exp => y,
        UnaryFn::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryFn::Gelu => {
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC_COEF * x * x * x);
            let th = u.tanh();
            let sech2 = 1.0 - th * th;
            0.5 * (1.0 + th)
                + 0.5 * x * sech2 * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEF * x * x)
        }
        UnaryFn::SmoothL1 => {
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        }
    }
}

// ── matrix kernels ─────────────────────────────────────────────────
// ikj loop order keeps the inner loops contiguous so LLVM vectorizes them.

pub(crate) fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `A (m×n) · Bᵀ` with `B` given as k×n; result is m×k.
pub(crate) fn matmul_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// `Aᵀ (k×m) · B (m×n)` with `A` given as m×k.
pub(crate) fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}
