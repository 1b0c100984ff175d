//! The Gaussian generator: fuse frame and question embeddings through a
//! small transformer encoder, predict K Gaussian centers, expand them to
//! temporal masks, and combine the masks into a per-frame weight
//! distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::optim::ParamStore;
use crate::numerics::record::{ComputationRecord, ValueId};
use crate::numerics::tensor::{Precision, Tensor};

/// Architecture extents of the grounder, lifted out of a [`RunConfig`].
#[derive(Debug, Clone, Copy)]
pub struct GrounderDims {
    pub d_i: usize,
    pub d_g: usize,
    pub k: usize,
    pub layers: usize,
    pub heads: usize,
    pub t_max: usize,
}

impl GrounderDims {
    pub fn from_config(cfg: &RunConfig) -> Self {
        GrounderDims {
            d_i: cfg.d_i,
            d_g: cfg.d_g,
            k: cfg.k,
            layers: cfg.layers,
            heads: cfg.heads,
            t_max: cfg.t_max,
        }
    }

    pub fn ff_width(&self) -> usize {
        4 * self.d_g
    }

    pub fn head_dim(&self) -> usize {
        self.d_g / self.heads
    }
}

fn randn(extents: Vec<usize>, std: f64, precision: Precision, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = extents.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
        .collect();
    Tensor::new(extents, data, precision).expect("finite init")
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-scaled normal init for a rank-2 weight of the given extents.
pub fn xavier_init_std(
    extents: Vec<usize>,
    precision: Precision,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let std = xavier_std(extents[0], extents[1]);
    randn(extents, std, precision, rng)
}

/// Inserts every grounder parameter into the store under `grounder.*` names.
pub fn init_grounder_params(
    store: &mut ParamStore,
    dims: &GrounderDims,
    precision: Precision,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d_g = dims.d_g;
    store.insert(
        "grounder.proj.weight",
        randn(vec![dims.d_i, d_g], xavier_std(dims.d_i, d_g), precision, rng),
    )?;
    store.insert("grounder.proj.bias", Tensor::zeros(vec![d_g], precision))?;
    store.insert("grounder.type_visual", randn(vec![d_g], 0.02, precision, rng))?;
    store.insert("grounder.type_textual", randn(vec![d_g], 0.02, precision, rng))?;
    store.insert(
        "grounder.pos_table",
        randn(vec![dims.t_max, d_g], 0.02, precision, rng),
    )?;
    for layer in 0..dims.layers {
        let p = |suffix: &str| format!("grounder.layer{layer}.{suffix}");
        for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            store.insert(&p(name), randn(vec![d_g, d_g], xavier_std(d_g, d_g), precision, rng))?;
        }
        for name in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
            store.insert(&p(name), Tensor::zeros(vec![d_g], precision))?;
        }
        for name in ["ln1.gain", "ln2.gain"] {
            store.insert(&p(name), Tensor::full(vec![d_g], 1.0, precision)?)?;
        }
        for name in ["ln1.bias", "ln2.bias"] {
            store.insert(&p(name), Tensor::zeros(vec![d_g], precision))?;
        }
        let ff = dims.ff_width();
        store.insert(&p("ff.w1"), randn(vec![d_g, ff], xavier_std(d_g, ff), precision, rng))?;
        store.insert(&p("ff.b1"), Tensor::zeros(vec![ff], precision))?;
        store.insert(&p("ff.w2"), randn(vec![ff, d_g], xavier_std(ff, d_g), precision, rng))?;
        store.insert(&p("ff.b2"), Tensor::zeros(vec![d_g], precision))?;
    }
    store.insert("grounder.pool.query", randn(vec![d_g], xavier_std(d_g, 1), precision, rng))?;
    store.insert(
        "grounder.center.weight",
        randn(vec![d_g, dims.k], xavier_std(d_g, dims.k), precision, rng),
    )?;
    store.insert("grounder.center.bias", Tensor::zeros(vec![dims.k], precision))?;
    Ok(())
}

struct LayerNodes {
    wq: ValueId,
    wk: ValueId,
    wv: ValueId,
    wo: ValueId,
    bq: ValueId,
    bk: ValueId,
    bv: ValueId,
    bo: ValueId,
    ln1_gain: ValueId,
    ln1_bias: ValueId,
    ln2_gain: ValueId,
    ln2_bias: ValueId,
    ff_w1: ValueId,
    ff_b1: ValueId,
    ff_w2: ValueId,
    ff_b2: ValueId,
}

/// Grounder parameters bound into one computation record.
pub struct GrounderNodes {
    dims: GrounderDims,
    proj_weight: ValueId,
    proj_bias: ValueId,
    type_visual: ValueId,
    type_textual: ValueId,
    pos_table: ValueId,
    layers: Vec<LayerNodes>,
    pool_query: ValueId,
    center_weight: ValueId,
    center_bias: ValueId,
}

impl GrounderNodes {
    pub fn bind(
        rec: &mut ComputationRecord,
        store: &ParamStore,
        dims: &GrounderDims,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.layers);
        for layer in 0..dims.layers {
            let p = |suffix: &str| format!("grounder.layer{layer}.{suffix}");
            layers.push(LayerNodes {
                wq: rec.param(store, &p("attn.wq"))?,
                wk: rec.param(store, &p("attn.wk"))?,
                wv: rec.param(store, &p("attn.wv"))?,
                wo: rec.param(store, &p("attn.wo"))?,
                bq: rec.param(store, &p("attn.bq"))?,
                bk: rec.param(store, &p("attn.bk"))?,
                bv: rec.param(store, &p("attn.bv"))?,
                bo: rec.param(store, &p("attn.bo"))?,
                ln1_gain: rec.param(store, &p("ln1.gain"))?,
                ln1_bias: rec.param(store, &p("ln1.bias"))?,
                ln2_gain: rec.param(store, &p("ln2.gain"))?,
                ln2_bias: rec.param(store, &p("ln2.bias"))?,
                ff_w1: rec.param(store, &p("ff.w1"))?,
                ff_b1: rec.param(store, &p("ff.b1"))?,
                ff_w2: rec.param(store, &p("ff.w2"))?,
                ff_b2: rec.param(store, &p("ff.b2"))?,
            });
        }
        Ok(GrounderNodes {
            dims: *dims,
            proj_weight: rec.param(store, "grounder.proj.weight")?,
            proj_bias: rec.param(store, "grounder.proj.bias")?,
            type_visual: rec.param(store, "grounder.type_visual")?,
            type_textual: rec.param(store, "grounder.type_textual")?,
            pos_table: rec.param(store, "grounder.pos_table")?,
            layers,
            pool_query: rec.param(store, "grounder.pool.query")?,
            center_weight: rec.param(store, "grounder.center.weight")?,
            center_bias: rec.param(store, "grounder.center.bias")?,
        })
    }

    /// Node id of a bound parameter by its store name.
    pub fn lookup(&self, name: &str) -> Option<ValueId> {
        match name {
            "grounder.proj.weight" => return Some(self.proj_weight),
            "grounder.proj.bias" => return Some(self.proj_bias),
            "grounder.type_visual" => return Some(self.type_visual),
            "grounder.type_textual" => return Some(self.type_textual),
            "grounder.pos_table" => return Some(self.pos_table),
            "grounder.pool.query" => return Some(self.pool_query),
            "grounder.center.weight" => return Some(self.center_weight),
            "grounder.center.bias" => return Some(self.center_bias),
            _ => {}
        }
        let rest = name.strip_prefix("grounder.layer")?;
        let (index, suffix) = rest.split_once('.')?;
        let layer = self.layers.get(index.parse::<usize>().ok()?)?;
        match suffix {
            "attn.wq" => Some(layer.wq),
            "attn.wk" => Some(layer.wk),
            "attn.wv" => Some(layer.wv),
            "attn.wo" => Some(layer.wo),
            "attn.bq" => Some(layer.bq),
            "attn.bk" => Some(layer.bk),
            "attn.bv" => Some(layer.bv),
            "attn.bo" => Some(layer.bo),
            "ln1.gain" => Some(layer.ln1_gain),
            "ln1.bias" => Some(layer.ln1_bias),
            "ln2.gain" => Some(layer.ln2_gain),
            "ln2.bias" => Some(layer.ln2_bias),
            "ff.w1" => Some(layer.ff_w1),
            "ff.b1" => Some(layer.ff_b1),
            "ff.w2" => Some(layer.ff_w2),
            "ff.b2" => Some(layer.ff_b2),
            _ => None,
        }
    }
}

/// Output handles of a grounder forward pass.
pub struct GrounderForward {
    /// K predicted centers in (0, 1), rank-1.
    pub mu: ValueId,
    /// K x T Gaussian masks.
    pub masks: ValueId,
    /// T frame weights in [0, 1], rank-1.
    pub p: ValueId,
}

/// Projects `[frames; question]` to D_G and adds modal-type embeddings; the
/// visual rows also receive positional embeddings by frame index, textual
/// rows do not.
pub fn embed_inputs(
    rec: &mut ComputationRecord,
    nodes: &GrounderNodes,
    frames: ValueId,
    question: ValueId,
) -> Result<ValueId> {
    let t = rec.value(frames).rows();
    let l_q = rec.value(question).rows();
    if l_q < 1 {
        return Err(Error::Contract("question must have at least one token".into()));
    }
    if t > nodes.dims.t_max {
        return Err(Error::Capacity(format!(
            "T={t} exceeds the positional table capacity T_max={}",
            nodes.dims.t_max
        )));
    }
    let x = rec.concat_rows(frames, question)?;
    let projected = rec.matmul(x, nodes.proj_weight)?;
    let projected = rec.add_bias(projected, nodes.proj_bias)?;

    let visual = rec.slice_rows(projected, 0, t)?;
    let visual = rec.add_bias(visual, nodes.type_visual)?;
    let pos = rec.slice_rows(nodes.pos_table, 0, t)?;
    let visual = rec.add(visual, pos)?;

    let textual = rec.slice_rows(projected, t, t + l_q)?;
    let textual = rec.add_bias(textual, nodes.type_textual)?;

    rec.concat_rows(visual, textual)
}

fn attention_mask(t: usize, question_mask: &[bool]) -> Vec<bool> {
    // Key mask broadcast across every query row: visual keys always visible,
    // padded question keys never.
    let total = t + question_mask.len();
    let mut key_row = vec![true; total];
    for (i, &m) in question_mask.iter().enumerate() {
        key_row[t + i] = m;
    }
    let mut mask = Vec::with_capacity(total * total);
    for _ in 0..total {
        mask.extend_from_slice(&key_row);
    }
    mask
}

/// Pre-normalization transformer encoder over the embedded sequence,
/// truncated to the first T rows. Padded question positions contribute zero
/// attention weight.
pub fn encode(
    rec: &mut ComputationRecord,
    nodes: &GrounderNodes,
    embedded: ValueId,
    t: usize,
    question_mask: &[bool],
) -> Result<ValueId> {
    let total = rec.value(embedded).rows();
    if total != t + question_mask.len() {
        return Err(Error::Shape(format!(
            "encode expects {t}+{} rows, got {total}",
            question_mask.len()
        )));
    }
    let heads = nodes.dims.heads;
    let dh = nodes.dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = attention_mask(t, question_mask);

    let mut x = embedded;
    for layer in &nodes.layers {
        let normed = rec.layer_norm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = rec.matmul(normed, layer.wq)?;
        let q = rec.add_bias(q, layer.bq)?;
        let k = rec.matmul(normed, layer.wk)?;
        let k = rec.add_bias(k, layer.bk)?;
        let v = rec.matmul(normed, layer.wv)?;
        let v = rec.add_bias(v, layer.bv)?;

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = rec.slice_cols(q, lo, hi)?;
            let kh = rec.slice_cols(k, lo, hi)?;
            let vh = rec.slice_cols(v, lo, hi)?;
            let kt = rec.transpose(kh)?;
            let scores = rec.matmul(qh, kt)?;
            let scores = rec.scale(scores, scale)?;
            let probs = rec.softmax_rows(scores, Some(&mask))?;
            head_outputs.push(rec.matmul(probs, vh)?);
        }
        let ctx = rec.concat_cols(&head_outputs)?;
        let attn_out = rec.matmul(ctx, layer.wo)?;
        let attn_out = rec.add_bias(attn_out, layer.bo)?;
        x = rec.add(x, attn_out)?;

        let normed = rec.layer_norm(x, layer.ln2_gain, layer.ln2_bias)?;
        let hidden = rec.matmul(normed, layer.ff_w1)?;
        let hidden = rec.add_bias(hidden, layer.ff_b1)?;
        let hidden = rec.gelu(hidden)?;
        let ff_out = rec.matmul(hidden, layer.ff_w2)?;
        let ff_out = rec.add_bias(ff_out, layer.ff_b2)?;
        x = rec.add(x, ff_out)?;
    }
    rec.slice_rows(x, 0, t)
}

/// Attention pooling over the encoder outputs followed by the sigmoid center
/// head; every predicted center lies strictly inside (0, 1).
pub fn pool_and_predict_centers(
    rec: &mut ComputationRecord,
    nodes: &GrounderNodes,
    encoded: ValueId,
) -> Result<ValueId> {
    let d_g = nodes.dims.d_g;
    let query = rec.reshape(nodes.pool_query, vec![d_g, 1])?;
    let logits = rec.matmul(encoded, query)?;
    let logits = rec.scale(logits, 1.0 / (d_g as f64).sqrt())?;
    let logits = rec.transpose(logits)?;
    let weights = rec.softmax_rows(logits, None)?;
    let pooled = rec.matmul(weights, encoded)?;
    let mu = rec.matmul(pooled, nodes.center_weight)?;
    let mu = rec.add_bias(mu, nodes.center_bias)?;
    let mu = rec.sigmoid(mu)?;
    rec.reshape(mu, vec![nodes.dims.k])
}

/// Expands K centers into K x T Gaussian masks over the normalized frame
/// grid t/T, t = 1..T.
pub fn gaussian_masks(
    rec: &mut ComputationRecord,
    mu: ValueId,
    sigma: f64,
    t: usize,
) -> Result<ValueId> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("sigma must be > 0, got {sigma}")));
    }
    let k = rec.value(mu).len();
    let precision = rec.value(mu).precision();
    let mu_col = rec.reshape(mu, vec![k, 1])?;
    let ones_row = rec.constant(Tensor::matrix(1, t, vec![1.0; t], precision)?);
    let mu_mat = rec.matmul(mu_col, ones_row)?;
    let grid_row: Vec<f64> = (1..=t).map(|i| i as f64 / t as f64).collect();
    let mut grid = Vec::with_capacity(k * t);
    for _ in 0..k {
        grid.extend_from_slice(&grid_row);
    }
    let grid = rec.constant(Tensor::matrix(k, t, grid, precision)?);
    let diff = rec.sub(grid, mu_mat)?;
    let sq = rec.mul_elem(diff, diff)?;
    let scaled = rec.scale(sq, -1.0 / (2.0 * sigma * sigma))?;
    let exp = rec.exp(scaled)?;
    rec.scale(exp, 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma))
}

/// Sums the masks over K and min-max normalizes into [0, 1]. Gradients flow
/// through the min and max terms; a constant raw distribution falls back to
/// 0.5 everywhere.
pub fn combine_masks(rec: &mut ComputationRecord, masks: ValueId) -> Result<ValueId> {
    let k = rec.value(masks).rows();
    let t = rec.value(masks).cols();
    if k < 1 {
        return Err(Error::Contract("combine_masks needs at least one mask".into()));
    }
    let precision = rec.value(masks).precision();
    let ones = rec.constant(Tensor::matrix(1, k, vec![1.0; k], precision)?);
    let raw = rec.matmul(ones, masks)?;
    let raw = rec.reshape(raw, vec![t])?;
    let mn = rec.min_all(raw)?;
    let mx = rec.max_all(raw)?;
    let span = rec.value(mx).scalar_value() - rec.value(mn).scalar_value();
    if span < 1e-12 {
        return Ok(rec.constant(Tensor::full(vec![t], 0.5, precision)?));
    }
    let shifted = rec.sub_scalar(raw, mn)?;
    let den = rec.sub(mx, mn)?;
    rec.div_scalar(shifted, den)
}

/// The full grounder chain: embed, encode, pool, predict centers, expand to
/// masks, and combine into the frame-weight distribution.
pub fn forward(
    rec: &mut ComputationRecord,
    nodes: &GrounderNodes,
    frames: ValueId,
    question: ValueId,
    question_mask: &[bool],
    sigma: f64,
) -> Result<GrounderForward> {
    let t = rec.value(frames).rows();
    let embedded = embed_inputs(rec, nodes, frames, question)?;
    let encoded = encode(rec, nodes, embedded, t, question_mask)?;
    let mu = pool_and_predict_centers(rec, nodes, encoded)?;
    let masks = gaussian_masks(rec, mu, sigma, t)?;
    let p = combine_masks(rec, masks)?;
    Ok(GrounderForward { mu, masks, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn dims(d_i: usize, d_g: usize, k: usize, layers: usize, t_max: usize) -> GrounderDims {
        GrounderDims {
            d_i,
            d_g,
            k,
            layers,
            heads: 4,
            t_max,
        }
    }

    fn store_for(dims: &GrounderDims, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_grounder_params(&mut store, dims, Precision::P64, &mut rng).unwrap();
        store
    }

    fn random_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..r * c)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor::matrix(r, c, data, Precision::P64).unwrap()
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let dims = dims(8, 16, 2, 0, 8);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_grounder_params(&mut store, &dims, Precision::P64, &mut rng).unwrap();
        // Zero out everything the embedding touches.
        for name in [
            "grounder.proj.weight",
            "grounder.type_visual",
            "grounder.type_textual",
            "grounder.pos_table",
        ] {
            let extents = store.value(name).unwrap().extents().to_vec();
            store
                .set_value(name, Tensor::zeros(extents, Precision::P64))
                .unwrap();
        }
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let frames = rec.constant(random_matrix(4, 8, 1));
        let question = rec.constant(random_matrix(3, 8, 2));
        let m = embed_inputs(&mut rec, &nodes, frames, question).unwrap();
        assert_eq!(rec.value(m).extents(), &[7, 16]);
        assert!(rec.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_shape_contract() {
        let dims = dims(32, 256, 4, 0, 64);
        let store = store_for(&dims, 3);
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let frames = rec.constant(random_matrix(32, 32, 4));
        let question = rec.constant(random_matrix(10, 32, 5));
        let m = embed_inputs(&mut rec, &nodes, frames, question).unwrap();
        assert_eq!(rec.value(m).extents(), &[42, 256]);
    }

    #[test]
    fn positional_vectors_stay_with_frame_slots() {
        // Swapping two frames permutes the projected content but each row
        // keeps the positional vector of its slot.
        let dims = dims(4, 8, 2, 0, 8);
        let store = store_for(&dims, 7);
        let frames = random_matrix(3, 4, 8);
        let mut swapped_data = frames.data().to_vec();
        for j in 0..4 {
            swapped_data.swap(j, 4 + j);
        }
        let swapped = Tensor::matrix(3, 4, swapped_data, Precision::P64).unwrap();
        let question = random_matrix(2, 4, 9);

        let embed_of = |fr: &Tensor| {
            let mut rec = ComputationRecord::new();
            let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
            let f = rec.constant(fr.clone());
            let q = rec.constant(question.clone());
            let m = embed_inputs(&mut rec, &nodes, f, q).unwrap();
            rec.value(m).clone()
        };
        let base = embed_of(&frames);
        let perm = embed_of(&swapped);

        // Row 0 of the swapped embedding equals row 1's content with row 0's
        // positional vector: base_row1 - pos1 + pos0 = perm_row0.
        let pos = store.value("grounder.pos_table").unwrap();
        for j in 0..8 {
            let expected = base.at2(1, j) - pos.at2(1, j) + pos.at2(0, j);
            assert!((perm.at2(0, j) - expected).abs() < 1e-12);
        }
        // Question rows are untouched.
        for i in 3..5 {
            for j in 0..8 {
                assert_eq!(base.at2(i, j), perm.at2(i, j));
            }
        }
    }

    #[test]
    fn capacity_error_when_t_exceeds_table() {
        let dims = dims(4, 8, 2, 0, 2);
        let store = store_for(&dims, 11);
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let frames = rec.constant(random_matrix(3, 4, 12));
        let question = rec.constant(random_matrix(2, 4, 13));
        assert!(matches!(
            embed_inputs(&mut rec, &nodes, frames, question),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn zero_layers_is_identity_on_first_t_rows() {
        let dims = dims(4, 8, 2, 0, 8);
        let store = store_for(&dims, 21);
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let frames = rec.constant(random_matrix(5, 4, 22));
        let question = rec.constant(random_matrix(3, 4, 23));
        let m = embed_inputs(&mut rec, &nodes, frames, question).unwrap();
        let encoded = encode(&mut rec, &nodes, m, 5, &[true, true, true]).unwrap();
        assert_eq!(rec.value(encoded).extents(), &[5, 8]);
        for i in 0..5 {
            assert_eq!(rec.value(encoded).row(i), rec.value(m).row(i));
        }
    }

    #[test]
    fn padded_positions_do_not_affect_output() {
        let dims = dims(4, 8, 2, 2, 8);
        let store = store_for(&dims, 31);
        let frames = random_matrix(4, 4, 32);
        let question = random_matrix(3, 4, 33);
        let qmask = [true, true, false];

        let run = |q: &Tensor| {
            let mut rec = ComputationRecord::new();
            let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
            let f = rec.constant(frames.clone());
            let qid = rec.constant(q.clone());
            let fwd = forward(&mut rec, &nodes, f, qid, &qmask, 0.2).unwrap();
            rec.value(fwd.p).data().to_vec()
        };
        let base = run(&question);

        // Overwrite the padded token with arbitrary values.
        let mut poisoned = question.data().to_vec();
        for j in 0..4 {
            poisoned[2 * 4 + j] = 1234.5 + j as f64;
        }
        let poisoned = Tensor::matrix(3, 4, poisoned, Precision::P64).unwrap();
        let other = run(&poisoned);
        for (a, b) in base.iter().zip(&other) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_center_head_predicts_half() {
        let dims = dims(4, 8, 3, 1, 8);
        let mut store = store_for(&dims, 41);
        store
            .set_value(
                "grounder.center.weight",
                Tensor::zeros(vec![8, 3], Precision::P64),
            )
            .unwrap();
        store
            .set_value("grounder.center.bias", Tensor::zeros(vec![3], Precision::P64))
            .unwrap();
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let encoded = rec.constant(random_matrix(4, 8, 42));
        let mu = pool_and_predict_centers(&mut rec, &nodes, encoded).unwrap();
        for &m in rec.value(mu).data() {
            assert_eq!(m, 0.5);
        }
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let dims = dims(4, 8, 2, 1, 8);
        let store = store_for(&dims, 43);
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let row: Vec<f64> = (0..8).map(|j| 0.3 * j as f64 - 1.0).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let encoded = rec.constant(Tensor::matrix(5, 8, data, Precision::P64).unwrap());
        // Pull out the pooled vector by reconstructing the pooling steps.
        let d_g = 8usize;
        let query = rec.reshape(nodes.pool_query, vec![d_g, 1]).unwrap();
        let logits = rec.matmul(encoded, query).unwrap();
        let logits = rec.scale(logits, 1.0 / (d_g as f64).sqrt()).unwrap();
        let logits = rec.transpose(logits).unwrap();
        let weights = rec.softmax_rows(logits, None).unwrap();
        let pooled = rec.matmul(weights, encoded).unwrap();
        for (got, want) in rec.value(pooled).data().iter().zip(&row) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_head_bias_stays_below_one() {
        let dims = dims(4, 8, 2, 1, 8);
        let mut store = store_for(&dims, 44);
        store
            .set_value(
                "grounder.center.bias",
                Tensor::vector(vec![20.0, 20.0], Precision::P64).unwrap(),
            )
            .unwrap();
        store
            .set_value(
                "grounder.center.weight",
                Tensor::zeros(vec![8, 2], Precision::P64),
            )
            .unwrap();
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let encoded = rec.constant(random_matrix(4, 8, 45));
        let mu = pool_and_predict_centers(&mut rec, &nodes, encoded).unwrap();
        for &m in rec.value(mu).data() {
            assert!(m >= 1.0 - 1e-8);
            assert!(m < 1.0);
        }
    }

    #[test]
    fn gaussian_peak_value_at_center() {
        let mut rec = ComputationRecord::new();
        // mu = 0.5 lands exactly on t = 16 of 32.
        let mu = rec.constant(Tensor::vector(vec![0.5], Precision::P64).unwrap());
        let g = gaussian_masks(&mut rec, mu, 0.2, 32).unwrap();
        let peak = rec.value(g).at2(0, 15);
        assert!((peak - 1.994711).abs() < 1e-5, "peak {peak}");
    }

    #[test]
    fn gaussian_is_symmetric_around_center() {
        let mut rec = ComputationRecord::new();
        let mu = rec.constant(Tensor::vector(vec![0.5], Precision::P64).unwrap());
        let g = gaussian_masks(&mut rec, mu, 0.13, 32).unwrap();
        let v = rec.value(g);
        for delta in 1..8 {
            let left = v.at2(0, 15 - delta);
            let right = v.at2(0, 15 + delta);
            assert!((left - right).abs() < 1e-9);
        }
    }

    #[test]
    fn doubling_sigma_halves_peak_and_fattens_tail() {
        let eval = |sigma: f64| {
            let mut rec = ComputationRecord::new();
            let mu = rec.constant(Tensor::vector(vec![0.5], Precision::P64).unwrap());
            let g = gaussian_masks(&mut rec, mu, sigma, 32).unwrap();
            let v = rec.value(g);
            (v.at2(0, 15), v.at2(0, 31)) // center and far tail
        };
        let (peak_narrow, tail_narrow) = eval(0.2);
        let (peak_wide, tail_wide) = eval(0.4);
        assert!((peak_wide * 2.0 - peak_narrow).abs() < 1e-9);
        assert!(tail_wide / peak_wide > tail_narrow / peak_narrow);
    }

    #[test]
    fn combine_single_mask_normalizes() {
        let mut rec = ComputationRecord::new();
        let mu = rec.constant(Tensor::vector(vec![0.5], Precision::P64).unwrap());
        let g = gaussian_masks(&mut rec, mu, 0.2, 32).unwrap();
        let p = combine_masks(&mut rec, g).unwrap();
        let v = rec.value(p).data();
        let argmax = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax + 1, 16); // 1-based frame 16
        assert_eq!(v[argmax], 1.0);
        assert_eq!(v[31], 0.0); // farthest frame
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn well_separated_masks_give_two_local_maxima() {
        let mut rec = ComputationRecord::new();
        let mu = rec.constant(Tensor::vector(vec![0.25, 0.75], Precision::P64).unwrap());
        let g = gaussian_masks(&mut rec, mu, 0.05, 32).unwrap();
        let p = combine_masks(&mut rec, g).unwrap();
        let v = rec.value(p).data();
        let mut maxima = Vec::new();
        for i in 1..31 {
            if v[i] > v[i - 1] && v[i] > v[i + 1] {
                maxima.push(i + 1);
            }
        }
        assert_eq!(maxima, vec![8, 24]);
    }

    #[test]
    fn degenerate_combination_falls_back_to_half() {
        // A single huge sigma makes the raw sum numerically constant.
        let mut rec = ComputationRecord::new();
        let mu = rec.constant(Tensor::vector(vec![0.5], Precision::P64).unwrap());
        let g = gaussian_masks(&mut rec, mu, 1e6, 8).unwrap();
        let p = combine_masks(&mut rec, g).unwrap();
        for &v in rec.value(p).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn full_chain_outputs_are_in_contract_ranges() {
        let dims = dims(8, 16, 2, 2, 8);
        let store = store_for(&dims, 51);
        let mut rec = ComputationRecord::new();
        let nodes = GrounderNodes::bind(&mut rec, &store, &dims).unwrap();
        let frames = rec.constant(random_matrix(8, 8, 52));
        let question = rec.constant(random_matrix(4, 8, 53));
        let fwd = forward(&mut rec, &nodes, frames, question, &[true; 4], 0.2).unwrap();
        for &m in rec.value(fwd.mu).data() {
            assert!(m > 0.0 && m < 1.0);
        }
        let p = rec.value(fwd.p).data();
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }
}
