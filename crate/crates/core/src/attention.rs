//! Synthetic multi-head attention stacks.
//!
//! A stack is `L` attention layers with random projections. There is no
//! feed-forward sublayer and no positional encoding; causal masking is the only
//! position signal. The residual path uses RMS normalization without a gain.

use crate::error::{Error, Result};
use crate::kvcache::KvSource;
use crate::linalg::{matmul, rms_norm_rows, softmax_rows, Matrix, SeededRng};

/// Epsilon inside the residual RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

/// Model shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackShape {
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl StackShape {
    pub fn new(layers: usize, heads: usize, kv_heads: usize, head_dim: usize) -> Result<Self> {
        let shape = StackShape {
            layers,
            heads,
            kv_heads,
            head_dim,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::param(format!("all shape parameters must be positive: {self:?}")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::param(format!(
                "kv_heads ({}) must divide heads ({})",
                self.kv_heads, self.heads
            )));
        }
        Ok(())
    }

    /// `D = H * d_h`.
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Number of query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    /// KV head serving query head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    /// Query heads served by KV head `kv`.
    pub fn heads_of_group(&self, kv: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        kv * g..(kv + 1) * g
    }
}

/// Projection weights of one layer.
///
/// `w_q` is `D x (H*d_h)`, `w_k`/`w_v` are `D x (H_kv*d_h)` and `w_o` is `D x D`.
/// Head `h` owns columns `h*d_h..(h+1)*d_h` of the input projections and rows
/// `h*d_h..(h+1)*d_h` of `w_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    shape: StackShape,
    layers: Vec<LayerWeights>,
}

/// Everything one prefill pass of a layer produces.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub layer: usize,
    /// Layer input `X`, `S x D`.
    pub input: Matrix,
    /// Per KV head, `S x d_h`.
    pub keys: Vec<Matrix>,
    /// Per KV head, `S x d_h`.
    pub values: Vec<Matrix>,
    /// Per query head causal attention map, `S x S`.
    pub attention: Vec<Matrix>,
    /// Per query head `A^h V^h`, `S x d_h`.
    pub head_outputs: Vec<Matrix>,
    /// `Concat(A^1 V^1, ..., A^H V^H)`, `S x D`.
    pub concat: Matrix,
    /// Attention output `O = concat * W_O`.
    pub output: Matrix,
    /// `Y = RMSNorm(O + X)`.
    pub residual: Matrix,
}

impl LayerActivations {
    pub fn seq_len(&self) -> usize {
        self.input.rows()
    }
}

/// Result of attending one new token over a (possibly compressed) cache.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// Attention output `o`, `1 x D`.
    pub output: Matrix,
    /// `RMSNorm(o + x)`, the input to the next layer.
    pub residual: Matrix,
    /// Per KV head key of the new token, `1 x d_h`.
    pub new_keys: Vec<Matrix>,
    pub new_values: Vec<Matrix>,
    /// Per query head attention weights; the last entry is the new token itself.
    pub weights: Vec<Vec<f64>>,
}

impl AttentionStack {
    /// Random stack with i.i.d. `N(0, 1/D)` weights.
    pub fn build(shape: StackShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let d = shape.model_dim();
        let std = 1.0 / (d as f64).sqrt();
        let layers = (0..shape.layers)
            .map(|_| LayerWeights {
                w_q: rng.normal_matrix(d, d, std),
                w_k: rng.normal_matrix(d, shape.kv_dim(), std),
                w_v: rng.normal_matrix(d, shape.kv_dim(), std),
                w_o: rng.normal_matrix(d, d, std),
            })
            .collect();
        Ok(AttentionStack { shape, layers })
    }

    /// Stack from explicit weights; shapes are checked against `shape`.
    pub fn from_layers(shape: StackShape, layers: Vec<LayerWeights>) -> Result<Self> {
        shape.validate()?;
        if layers.len() != shape.layers {
            return Err(Error::param(format!(
                "expected {} layers of weights, got {}",
                shape.layers,
                layers.len()
            )));
        }
        let d = shape.model_dim();
        for (l, w) in layers.iter().enumerate() {
            let expect = [
                ("w_q", w.w_q.shape(), (d, d)),
                ("w_k", w.w_k.shape(), (d, shape.kv_dim())),
                ("w_v", w.w_v.shape(), (d, shape.kv_dim())),
                ("w_o", w.w_o.shape(), (d, d)),
            ];
            for (name, got, want) in expect {
                if got != want {
                    return Err(Error::param(format!(
                        "layer {l} {name} is {}x{}, expected {}x{}",
                        got.0, got.1, want.0, want.1
                    )));
                }
            }
        }
        Ok(AttentionStack { shape, layers })
    }

    pub fn shape(&self) -> &StackShape {
        &self.shape
    }

    pub fn layer(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    /// Rows of `W_O` owned by `head`: the `d_h x D` block `W_O^h`.
    pub fn w_o_block(&self, layer: usize, head: usize) -> Matrix {
        let dh = self.shape.head_dim;
        self.layers[layer].w_o.rows_range(head * dh, (head + 1) * dh)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.shape.layers {
            return Err(Error::Index(format!(
                "layer {layer} out of range for {} layers",
                self.shape.layers
            )));
        }
        Ok(())
    }

    /// Causal prefill of one layer over input `x` (`S x D`).
    pub fn prefill_layer(&self, layer: usize, x: &Matrix) -> Result<LayerActivations> {
        self.check_layer(layer)?;
        let d = self.shape.model_dim();
        if x.cols() != d {
            return Err(Error::Shape {
                op: "prefill_layer",
                left: x.shape(),
                right: (x.rows(), d),
            });
        }
        let w = &self.layers[layer];
        let dh = self.shape.head_dim;
        let s = x.rows();
        let scale = 1.0 / (dh as f64).sqrt();

        let q_all = matmul(x, &w.w_q)?;
        let k_all = matmul(x, &w.w_k)?;
        let v_all = matmul(x, &w.w_v)?;
        let keys: Vec<Matrix> = (0..self.shape.kv_heads)
            .map(|g| k_all.cols_range(g * dh, (g + 1) * dh))
            .collect();
        let values: Vec<Matrix> = (0..self.shape.kv_heads)
            .map(|g| v_all.cols_range(g * dh, (g + 1) * dh))
            .collect();

        let mut attention = Vec::with_capacity(self.shape.heads);
        let mut head_outputs = Vec::with_capacity(self.shape.heads);
        for h in 0..self.shape.heads {
            let kv = self.shape.kv_head_of(h);
            let q = q_all.cols_range(h * dh, (h + 1) * dh);
            let mut logits = matmul(&q, &keys[kv].transpose())?.scale(scale);
            for i in 0..s {
                for j in i + 1..s {
                    logits.set(i, j, f64::NEG_INFINITY);
                }
            }
            let a = softmax_rows(&logits)?;
            head_outputs.push(matmul(&a, &values[kv])?);
            attention.push(a);
        }
        let concat = Matrix::hstack(&head_outputs)?;
        let output = matmul(&concat, &w.w_o)?;
        let residual = rms_norm_rows(&output.add(x)?, RMS_EPS);
        Ok(LayerActivations {
            layer,
            input: x.clone(),
            keys,
            values,
            attention,
            head_outputs,
            concat,
            output,
            residual,
        })
    }

    /// Prefills every layer, feeding each layer's residual output to the next.
    pub fn prefill(&self, x: &Matrix) -> Result<Vec<LayerActivations>> {
        let mut out: Vec<LayerActivations> = Vec::with_capacity(self.shape.layers);
        for l in 0..self.shape.layers {
            let input = match out.last() {
                Some(prev) => &prev.residual,
                None => x,
            };
            let acts = self.prefill_layer(l, input)?;
            out.push(acts);
        }
        Ok(out)
    }

    /// Attends one new token `x` (`1 x D`) over the cached entries exposed by
    /// `cache`, after appending the token's own key and value.
    pub fn decode_step(&self, layer: usize, x: &Matrix, cache: &dyn KvSource) -> Result<DecodeOutput> {
        self.check_layer(layer)?;
        let d = self.shape.model_dim();
        if x.shape() != (1, d) {
            return Err(Error::Shape {
                op: "decode_step",
                left: x.shape(),
                right: (1, d),
            });
        }
        let w = &self.layers[layer];
        let dh = self.shape.head_dim;
        let scale = 1.0 / (dh as f64).sqrt();
        let q_all = matmul(x, &w.w_q)?;
        let k_all = matmul(x, &w.w_k)?;
        let v_all = matmul(x, &w.w_v)?;
        let new_keys: Vec<Matrix> = (0..self.shape.kv_heads)
            .map(|g| k_all.cols_range(g * dh, (g + 1) * dh))
            .collect();
        let new_values: Vec<Matrix> = (0..self.shape.kv_heads)
            .map(|g| v_all.cols_range(g * dh, (g + 1) * dh))
            .collect();

        let mut heads = Vec::with_capacity(self.shape.heads);
        let mut weights = Vec::with_capacity(self.shape.heads);
        for h in 0..self.shape.heads {
            let kv = self.shape.kv_head_of(h);
            let (k_cached, v_cached) = cache.head_entries(layer, h)?;
            if k_cached.rows() == 0 {
                return Err(Error::Plan(format!("layer {layer} head {h} has no retained entries")));
            }
            let keys = k_cached.vstack(&new_keys[kv])?;
            let values = v_cached.vstack(&new_values[kv])?;
            let q = q_all.cols_range(h * dh, (h + 1) * dh);
            let logits = matmul(&q, &keys.transpose())?.scale(scale);
            let a = softmax_rows(&logits)?;
            heads.push(matmul(&a, &values)?);
            weights.push(a.into_data());
        }
        let concat = Matrix::hstack(&heads)?;
        let output = matmul(&concat, &w.w_o)?;
        let residual = rms_norm_rows(&output.add(x)?, RMS_EPS);
        Ok(DecodeOutput {
            output,
            residual,
            new_keys,
            new_values,
            weights,
        })
    }
}

/// Relative Frobenius gap between `Concat(H^1..H^H) W_O` and `Σ_h H^h W_O^h`.
pub fn head_decomposition_residual(acts: &LayerActivations, stack: &AttentionStack) -> Result<f64> {
    let w_o = &stack.layer(acts.layer).w_o;
    let whole = matmul(&acts.concat, w_o)?;
    let mut blocks = Matrix::zeros(whole.rows(), whole.cols());
    for (h, head_out) in acts.head_outputs.iter().enumerate() {
        blocks.add_assign(&matmul(head_out, &stack.w_o_block(acts.layer, h))?)?;
    }
    let gap = whole.sub(&blocks)?.frobenius_norm();
    let norm = whole.frobenius_norm();
    Ok(if norm > 0.0 { gap / norm } else { gap })
}

/// Contribution of cached token `token_pos` to the attention output at
/// `query_pos`: `Σ_h A^h(i, j) V^h(j) W_O^h`, a `1 x D` row.
pub fn token_contribution(
    acts: &LayerActivations,
    stack: &AttentionStack,
    query_pos: usize,
    token_pos: usize,
) -> Result<Matrix> {
    let s = acts.seq_len();
    if query_pos >= s {
        return Err(Error::Index(format!("query {query_pos} out of range for length {s}")));
    }
    if token_pos > query_pos {
        return Err(Error::Index(format!(
            "token {token_pos} is after query {query_pos}; causal attention forbids it"
        )));
    }
    let shape = stack.shape();
    let mut total = Matrix::zeros(1, shape.model_dim());
    for h in 0..shape.heads {
        let a = acts.attention[h].get(query_pos, token_pos);
        let v = &acts.values[shape.kv_head_of(h)];
        let row = Matrix::row_vector(v.row(token_pos)).scale(a);
        total.add_assign(&matmul(&row, &stack.w_o_block(acts.layer, h))?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvcache::KvCache;

    fn stack(l: usize, h: usize, hkv: usize, dh: usize, seed: u64) -> AttentionStack {
        AttentionStack::build(StackShape::new(l, h, hkv, dh).unwrap(), &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn build_shapes() {
        let s = stack(1, 1, 1, 4, 0);
        assert_eq!(s.shape().model_dim(), 4);
        assert_eq!(s.w_o_block(0, 0), s.layer(0).w_o);

        let s = stack(2, 4, 2, 8, 0);
        assert_eq!(s.shape().model_dim(), 32);
        assert_eq!(s.shape().group_size(), 2);
        assert_eq!(s.layer(1).w_k.shape(), (32, 16));
        let rebuilt = (0..4).fold(Matrix::zeros(0, 32), |acc, h| acc.vstack(&s.w_o_block(1, h)).unwrap());
        assert_eq!(rebuilt, s.layer(1).w_o);
    }

    #[test]
    fn build_is_deterministic_and_validates() {
        assert_eq!(stack(2, 4, 2, 8, 9), stack(2, 4, 2, 8, 9));
        assert_ne!(stack(2, 4, 2, 8, 9), stack(2, 4, 2, 8, 10));
        assert!(StackShape::new(1, 4, 3, 8).unwrap_err().is_parameter());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let s = stack(1, 4, 2, 4, 1);
        let x = SeededRng::new(2).normal_matrix(1, 16, 1.0);
        let acts = s.prefill_layer(0, &x).unwrap();
        for a in &acts.attention {
            assert_eq!(a, &Matrix::filled(1, 1, 1.0));
        }
    }

    #[test]
    fn zero_values_give_zero_output() {
        let shape = StackShape::new(1, 2, 2, 4).unwrap();
        let mut rng = SeededRng::new(5);
        let base = AttentionStack::build(shape, &mut rng).unwrap();
        let mut w = base.layer(0).clone();
        w.w_v = Matrix::zeros(8, 8);
        let s = AttentionStack::from_layers(shape, vec![w]).unwrap();
        let x = rng.normal_matrix(6, 8, 1.0);
        let acts = s.prefill_layer(0, &x).unwrap();
        assert_eq!(acts.output, Matrix::zeros(6, 8));
        assert_eq!(acts.residual, rms_norm_rows(&x, RMS_EPS));
    }

    #[test]
    fn causality_and_row_sums() {
        let s = stack(2, 4, 2, 4, 3);
        let x = SeededRng::new(4).normal_matrix(12, 16, 1.0);
        for acts in s.prefill(&x).unwrap() {
            for a in &acts.attention {
                for i in 0..12 {
                    for j in i + 1..12 {
                        assert_eq!(a.get(i, j), 0.0);
                    }
                    let sum: f64 = a.row(i).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
            let o = matmul(&acts.concat, &s.layer(acts.layer).w_o).unwrap();
            assert!(o.sub(&acts.output).unwrap().frobenius_norm() <= 1e-9);
        }
    }

    #[test]
    fn gqa_heads_share_kv_states() {
        let s = stack(1, 4, 2, 4, 7);
        let x = SeededRng::new(8).normal_matrix(5, 16, 1.0);
        let acts = s.prefill_layer(0, &x).unwrap();
        assert_eq!(acts.keys.len(), 2);
        let k_all = matmul(&x, &s.layer(0).w_k).unwrap();
        // heads 0 and 1 use kv 0: columns 0..4
        assert_eq!(acts.keys[0], k_all.cols_range(0, 4));
        assert_eq!(acts.keys[1], k_all.cols_range(4, 8));
    }

    #[test]
    fn block_sum_matches_concat_projection() {
        let s = stack(1, 4, 4, 4, 21);
        let x = SeededRng::new(22).normal_matrix(16, 16, 1.0);
        let acts = s.prefill_layer(0, &x).unwrap();
        // independent route: per-head A V W_O^h from the attention maps
        let mut sum = Matrix::zeros(16, 16);
        for h in 0..4 {
            let av = matmul(&acts.attention[h], &acts.values[h]).unwrap();
            sum.add_assign(&matmul(&av, &s.w_o_block(0, h)).unwrap()).unwrap();
        }
        assert!(sum.sub(&acts.output).unwrap().frobenius_norm() <= 1e-9 * acts.output.frobenius_norm());
        assert!(head_decomposition_residual(&acts, &s).unwrap() <= 1e-9);
    }

    #[test]
    fn decomposition_residual_trivial_cases() {
        let s = stack(1, 1, 1, 4, 2);
        let x = SeededRng::new(3).normal_matrix(8, 4, 1.0);
        let acts = s.prefill_layer(0, &x).unwrap();
        assert_eq!(head_decomposition_residual(&acts, &s).unwrap(), 0.0);

        let shape = StackShape::new(1, 2, 2, 4).unwrap();
        let mut w = stack(1, 2, 2, 4, 4).layer(0).clone();
        w.w_o = Matrix::zeros(8, 8);
        let s = AttentionStack::from_layers(shape, vec![w]).unwrap();
        let acts = s.prefill_layer(0, &SeededRng::new(5).normal_matrix(8, 8, 1.0)).unwrap();
        assert_eq!(head_decomposition_residual(&acts, &s).unwrap(), 0.0);
    }

    #[test]
    fn token_contributions_sum_to_output() {
        let s = stack(1, 4, 2, 4, 31);
        let x = SeededRng::new(32).normal_matrix(10, 16, 1.0);
        let acts = s.prefill_layer(0, &x).unwrap();

        let first = token_contribution(&acts, &s, 0, 0).unwrap();
        let o0 = acts.output.rows_range(0, 1);
        assert!(first.sub(&o0).unwrap().frobenius_norm() <= 1e-12 * o0.frobenius_norm());

        let mut total = Matrix::zeros(1, 16);
        for j in 0..=7 {
            total.add_assign(&token_contribution(&acts, &s, 7, j).unwrap()).unwrap();
        }
        let o7 = acts.output.rows_range(7, 8);
        assert!(total.sub(&o7).unwrap().frobenius_norm() <= 1e-9 * o7.frobenius_norm());

        assert!(matches!(token_contribution(&acts, &s, 3, 4), Err(Error::Index(_))));
    }

    #[test]
    fn zero_attention_means_zero_contribution() {
        let shape = StackShape::new(1, 1, 1, 2).unwrap();
        let s = AttentionStack::from_layers(
            shape,
            vec![LayerWeights {
                w_q: Matrix::identity(2),
                w_k: Matrix::identity(2),
                w_v: Matrix::identity(2),
                w_o: Matrix::identity(2),
            }],
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut acts = s.prefill_layer(0, &x).unwrap();
        acts.attention[0].set(1, 0, 0.0);
        assert_eq!(token_contribution(&acts, &s, 1, 0).unwrap(), Matrix::zeros(1, 2));
    }

    #[test]
    fn decode_over_full_cache_matches_longer_prefill() {
        let s = stack(1, 4, 2, 4, 41);
        let mut rng = SeededRng::new(42);
        let x = rng.normal_matrix(9, 16, 1.0);
        let prompt = x.rows_range(0, 8);
        let next = x.rows_range(8, 9);
        let acts = s.prefill_layer(0, &prompt).unwrap();
        let cache = KvCache::from_prefill(s.shape(), std::slice::from_ref(&acts)).unwrap();
        let dec = s.decode_step(0, &next, &cache).unwrap();
        let long = s.prefill_layer(0, &x).unwrap();
        let want = long.output.rows_range(8, 9);
        assert!(dec.output.sub(&want).unwrap().frobenius_norm() <= 1e-12 * want.frobenius_norm());
    }

    #[test]
    fn decode_single_retained_token_matches_two_token_softmax() {
        // d_h = D = 2, identity projections: q = k = v = x.
        let shape = StackShape::new(1, 1, 1, 2).unwrap();
        let eye = Matrix::identity(2);
        let s = AttentionStack::from_layers(
            shape,
            vec![LayerWeights {
                w_q: eye.clone(),
                w_k: eye.clone(),
                w_v: eye.clone(),
                w_o: eye,
            }],
        )
        .unwrap();
        let prompt = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let acts = s.prefill_layer(0, &prompt).unwrap();
        let cache = KvCache::from_prefill(&shape, &[acts]).unwrap();
        let x = Matrix::row_vector(&[0.5, 2.0]);
        let dec = s.decode_step(0, &x, &cache).unwrap();

        // direct two-token oracle
        let scale = 1.0 / 2f64.sqrt();
        let l_t = 0.5 * scale;
        let l_self = (0.25 + 4.0) * scale;
        let m = l_t.max(l_self);
        let (et, es) = ((l_t - m).exp(), (l_self - m).exp());
        let (wt, ws) = (et / (et + es), es / (et + es));
        let want = [wt * 1.0 + ws * 0.5, ws * 2.0];
        assert!((dec.output.get(0, 0) - want[0]).abs() < 1e-14);
        assert!((dec.output.get(0, 1) - want[1]).abs() < 1e-14);
        assert!((dec.weights[0][0] - wt).abs() < 1e-15);
    }

    #[test]
    fn decode_rejects_bad_shape() {
        let s = stack(1, 2, 2, 4, 1);
        let acts = s.prefill_layer(0, &SeededRng::new(1).normal_matrix(4, 8, 1.0)).unwrap();
        let cache = KvCache::from_prefill(s.shape(), &[acts]).unwrap();
        assert!(s
            .decode_step(0, &Matrix::zeros(1, 7), &cache)
            .unwrap_err()
            .is_parameter());
    }
}
