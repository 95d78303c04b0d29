//! Key/value storage, selection plans and compressed views.
//!
//! Storage is per `(layer, kv_head)`. Every stored entry remembers its original
//! sequence position, so a plan always speaks in original token indices and can
//! be applied to a full cache or to an already compressed one alike.
//!
//! Selection is decided per query head. Under GQA several query heads share a
//! KV head, so the physically kept set of a KV head is the union of its query
//! heads' sets, and each query head is masked back to its own subset when it
//! attends.

use std::io::Write;

use crate::attention::{LayerActivations, StackShape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Anything that can hand a query head its visible keys and values.
pub trait KvSource {
    /// Keys and values visible to query head `head` of `layer`, in sequence
    /// order, each `n x d_h`.
    fn head_entries(&self, layer: usize, head: usize) -> Result<(Matrix, Matrix)>;
}

/// Stored entries of one `(layer, kv_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvEntries {
    pub positions: Vec<usize>,
    pub keys: Matrix,
    pub values: Matrix,
}

impl KvEntries {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn row_of(&self, position: usize) -> Option<usize> {
        self.positions.binary_search(&position).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    shape: StackShape,
    seq_len: usize,
    slots: Vec<Vec<KvEntries>>,
}

impl KvCache {
    /// Cache holding every prefilled token of every layer.
    pub fn from_prefill(shape: &StackShape, acts: &[LayerActivations]) -> Result<Self> {
        if acts.len() != shape.layers {
            return Err(Error::Consistency(format!(
                "expected activations for {} layers, got {}",
                shape.layers,
                acts.len()
            )));
        }
        let seq_len = acts.first().map_or(0, |a| a.seq_len());
        let mut slots = Vec::with_capacity(acts.len());
        for (l, a) in acts.iter().enumerate() {
            if a.layer != l {
                return Err(Error::Consistency(format!(
                    "activation {l} belongs to layer {}",
                    a.layer
                )));
            }
            if a.seq_len() != seq_len {
                return Err(Error::Consistency(format!(
                    "layer {l} has {} tokens, layer 0 has {seq_len}",
                    a.seq_len()
                )));
            }
            if a.keys.len() != shape.kv_heads || a.values.len() != shape.kv_heads {
                return Err(Error::Consistency(format!(
                    "layer {l} has {} key lists and {} value lists for {} kv heads",
                    a.keys.len(),
                    a.values.len(),
                    shape.kv_heads
                )));
            }
            slots.push(
                a.keys
                    .iter()
                    .zip(&a.values)
                    .map(|(k, v)| KvEntries {
                        positions: (0..seq_len).collect(),
                        keys: k.clone(),
                        values: v.clone(),
                    })
                    .collect(),
            );
        }
        Ok(KvCache {
            shape: *shape,
            seq_len,
            slots,
        })
    }

    pub fn shape(&self) -> &StackShape {
        &self.shape
    }

    /// One past the largest token position ever stored.
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn entries(&self, layer: usize, kv_head: usize) -> &KvEntries {
        &self.slots[layer][kv_head]
    }

    /// Appends one decoded token to every layer. `keys[layer][kv]` is `1 x d_h`.
    /// Returns the position assigned to the token.
    pub fn append_token(&mut self, keys: &[Vec<Matrix>], values: &[Vec<Matrix>]) -> Result<usize> {
        if keys.len() != self.shape.layers || values.len() != self.shape.layers {
            return Err(Error::Consistency("append needs one entry per layer".into()));
        }
        let pos = self.seq_len;
        for (l, slot) in self.slots.iter_mut().enumerate() {
            for (g, e) in slot.iter_mut().enumerate() {
                e.keys = e.keys.vstack(&keys[l][g])?;
                e.values = e.values.vstack(&values[l][g])?;
                e.positions.push(pos);
            }
        }
        self.seq_len += 1;
        Ok(pos)
    }
}

impl KvSource for KvCache {
    fn head_entries(&self, layer: usize, head: usize) -> Result<(Matrix, Matrix)> {
        if layer >= self.shape.layers || head >= self.shape.heads {
            return Err(Error::Index(format!("no slot for layer {layer} head {head}")));
        }
        let e = &self.slots[layer][self.shape.kv_head_of(head)];
        Ok((e.keys.clone(), e.values.clone()))
    }
}

/// Per `(layer, head)` sorted retained token indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    seq_len: usize,
    window: usize,
    retained: Vec<Vec<Vec<usize>>>,
}

impl SelectionPlan {
    /// Builds and validates a plan. Index lists are sorted here; duplicates and
    /// out-of-range entries are rejected.
    pub fn new(seq_len: usize, window: usize, mut retained: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        for layer in &mut retained {
            for head in layer.iter_mut() {
                head.sort_unstable();
            }
        }
        let plan = SelectionPlan {
            seq_len,
            window,
            retained,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Plan keeping every token.
    pub fn full(layers: usize, heads: usize, seq_len: usize, window: usize) -> Self {
        SelectionPlan {
            seq_len,
            window,
            retained: vec![vec![(0..seq_len).collect(); heads]; layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let heads = self.retained.first().map_or(0, Vec::len);
        let win = self.window_range();
        for (l, layer) in self.retained.iter().enumerate() {
            if layer.len() != heads {
                return Err(Error::Plan(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.len()
                )));
            }
            for (h, idx) in layer.iter().enumerate() {
                if idx.windows(2).any(|p| p[0] >= p[1]) {
                    return Err(Error::Plan(format!(
                        "layer {l} head {h}: indices not strictly increasing"
                    )));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= self.seq_len) {
                    return Err(Error::Plan(format!(
                        "layer {l} head {h}: index {bad} out of range for {} tokens",
                        self.seq_len
                    )));
                }
                let kept_window = idx.iter().filter(|i| win.contains(i)).count();
                if kept_window != win.len() {
                    return Err(Error::Plan(format!(
                        "layer {l} head {h}: only {kept_window} of {} window tokens retained",
                        win.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Token positions `[T - w, T)` that every head must keep.
    pub fn window_range(&self) -> std::ops::Range<usize> {
        self.seq_len.saturating_sub(self.window)..self.seq_len
    }

    pub fn layers(&self) -> usize {
        self.retained.len()
    }

    pub fn heads(&self) -> usize {
        self.retained.first().map_or(0, Vec::len)
    }

    pub fn head(&self, layer: usize, head: usize) -> &[usize] {
        &self.retained[layer][head]
    }

    pub fn retained(&self) -> &[Vec<Vec<usize>>] {
        &self.retained
    }

    pub fn total_retained(&self) -> usize {
        self.retained.iter().flatten().map(Vec::len).sum()
    }

    /// CSV with columns `layer,head,count,indices`; indices are `;`-separated.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "count", "indices"])?;
        for (l, layer) in self.retained.iter().enumerate() {
            for (h, idx) in layer.iter().enumerate() {
                let joined = idx.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
                w.write_record([l.to_string(), h.to_string(), idx.len().to_string(), joined])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Debug snapshot with columns `token,layer,head,retained` (`retained` is 0/1).
    pub fn write_snapshot_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["token", "layer", "head", "retained"])?;
        for (l, layer) in self.retained.iter().enumerate() {
            for (h, idx) in layer.iter().enumerate() {
                let mut next = idx.iter().peekable();
                for t in 0..self.seq_len {
                    let kept = next.peek() == Some(&&t);
                    if kept {
                        next.next();
                    }
                    w.write_record([t.to_string(), l.to_string(), h.to_string(), u8::from(kept).to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Index-based compressed view of a cache. Nothing is copied until
/// [`CacheView::materialize`] or a query head asks for its entries.
#[derive(Debug, Clone)]
pub struct CacheView<'a> {
    cache: &'a KvCache,
    plan: &'a SelectionPlan,
    /// `[layer][head]` row indices into the head's KV slot.
    rows: Vec<Vec<Vec<usize>>>,
    /// `[layer][kv_head]` union of the group's retained positions.
    physical: Vec<Vec<Vec<usize>>>,
}

/// Restricts `cache` to the tokens retained by `plan`.
pub fn apply_plan<'a>(cache: &'a KvCache, plan: &'a SelectionPlan) -> Result<CacheView<'a>> {
    let shape = cache.shape();
    if plan.layers() != shape.layers || plan.heads() != shape.heads {
        return Err(Error::Plan(format!(
            "plan covers {}x{} layer-heads, cache has {}x{}",
            plan.layers(),
            plan.heads(),
            shape.layers,
            shape.heads
        )));
    }
    plan.validate()?;
    let mut rows = Vec::with_capacity(shape.layers);
    let mut physical = Vec::with_capacity(shape.layers);
    for l in 0..shape.layers {
        let mut layer_rows = Vec::with_capacity(shape.heads);
        for h in 0..shape.heads {
            let slot = cache.entries(l, shape.kv_head_of(h));
            let r = plan
                .head(l, h)
                .iter()
                .map(|&pos| {
                    slot.row_of(pos).ok_or_else(|| {
                        Error::Plan(format!("layer {l} head {h}: token {pos} is not stored in the cache"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layer_rows.push(r);
        }
        rows.push(layer_rows);
        physical.push(
            (0..shape.kv_heads)
                .map(|g| {
                    let mut union: Vec<usize> = shape
                        .heads_of_group(g)
                        .flat_map(|h| plan.head(l, h).iter().copied())
                        .collect();
                    union.sort_unstable();
                    union.dedup();
                    union
                })
                .collect(),
        );
    }
    Ok(CacheView {
        cache,
        plan,
        rows,
        physical,
    })
}

impl<'a> CacheView<'a> {
    pub fn plan(&self) -> &SelectionPlan {
        self.plan
    }

    /// Positions a query head sees.
    pub fn head_positions(&self, layer: usize, head: usize) -> &[usize] {
        self.plan.head(layer, head)
    }

    /// Positions physically kept for a KV head (union over its query group).
    pub fn physical_positions(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.physical[layer][kv_head]
    }

    /// Copies the physically retained entries into a standalone cache.
    pub fn materialize(&self) -> Result<KvCache> {
        let shape = self.cache.shape();
        let mut slots = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let mut layer = Vec::with_capacity(shape.kv_heads);
            for g in 0..shape.kv_heads {
                let src = self.cache.entries(l, g);
                let keep: Vec<usize> = self.physical[l][g]
                    .iter()
                    .map(|&p| src.row_of(p).expect("checked in apply_plan"))
                    .collect();
                layer.push(KvEntries {
                    positions: self.physical[l][g].clone(),
                    keys: src.keys.select_rows(&keep)?,
                    values: src.values.select_rows(&keep)?,
                });
            }
            slots.push(layer);
        }
        Ok(KvCache {
            shape: *shape,
            seq_len: self.cache.seq_len,
            slots,
        })
    }
}

impl KvSource for CacheView<'_> {
    fn head_entries(&self, layer: usize, head: usize) -> Result<(Matrix, Matrix)> {
        let shape = self.cache.shape();
        if layer >= shape.layers || head >= shape.heads {
            return Err(Error::Index(format!("no slot for layer {layer} head {head}")));
        }
        let slot = self.cache.entries(layer, shape.kv_head_of(head));
        let rows = &self.rows[layer][head];
        Ok((slot.keys.select_rows(rows)?, slot.values.select_rows(rows)?))
    }
}

/// Retained-entry counts of one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionStats {
    /// `[layer][head]`.
    pub counts: Vec<Vec<usize>>,
    pub layer_totals: Vec<usize>,
    pub total: usize,
    /// Population variance of the per-head counts across all `(layer, head)`.
    pub head_variance: f64,
}

pub fn retention_stats(plan: &SelectionPlan) -> RetentionStats {
    let counts: Vec<Vec<usize>> = plan
        .retained()
        .iter()
        .map(|layer| layer.iter().map(Vec::len).collect())
        .collect();
    let layer_totals: Vec<usize> = counts.iter().map(|c| c.iter().sum()).collect();
    let total = layer_totals.iter().sum();
    let flat: Vec<f64> = counts.iter().flatten().map(|&c| c as f64).collect();
    RetentionStats {
        counts,
        layer_totals,
        total,
        head_variance: population_variance(&flat),
    }
}

/// Per-head statistics over plans from several inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRetention {
    pub layer: usize,
    pub head: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// Population variance across inputs.
    pub variance: f64,
}

impl HeadRetention {
    pub fn range(&self) -> usize {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetentionSummary {
    pub inputs: usize,
    pub heads: Vec<HeadRetention>,
    /// Mean over inputs of the cross-head variance.
    pub mean_head_variance: f64,
    /// Largest per-head range across inputs.
    pub max_range: usize,
}

/// Aggregates stats of plans computed on different inputs of the same model.
pub fn aggregate_retention(stats: &[RetentionStats]) -> Result<RetentionSummary> {
    let first = stats
        .first()
        .ok_or_else(|| Error::param("retention aggregation needs at least one plan"))?;
    if stats.iter().any(|s| {
        s.counts.len() != first.counts.len() || s.counts.iter().zip(&first.counts).any(|(a, b)| a.len() != b.len())
    }) {
        return Err(Error::Consistency(
            "retention stats come from differently shaped plans".into(),
        ));
    }
    let mut heads = Vec::new();
    for (l, layer) in first.counts.iter().enumerate() {
        for h in 0..layer.len() {
            let xs: Vec<usize> = stats.iter().map(|s| s.counts[l][h]).collect();
            let fs: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
            heads.push(HeadRetention {
                layer: l,
                head: h,
                mean: fs.iter().sum::<f64>() / fs.len() as f64,
                min: *xs.iter().min().expect("non-empty"),
                max: *xs.iter().max().expect("non-empty"),
                variance: population_variance(&fs),
            });
        }
    }
    let mean_head_variance = stats.iter().map(|s| s.head_variance).sum::<f64>() / stats.len() as f64;
    let max_range = heads.iter().map(HeadRetention::range).max().unwrap_or(0);
    Ok(RetentionSummary {
        inputs: stats.len(),
        heads,
        mean_head_variance,
        max_range,
    })
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionStack;
    use crate::linalg::SeededRng;

    fn setup(l: usize, h: usize, hkv: usize, s: usize) -> (AttentionStack, Vec<LayerActivations>, KvCache) {
        let shape = StackShape::new(l, h, hkv, 4).unwrap();
        let mut rng = SeededRng::new(17);
        let stack = AttentionStack::build(shape, &mut rng).unwrap();
        let x = rng.normal_matrix(s, shape.model_dim(), 1.0);
        let acts = stack.prefill(&x).unwrap();
        let cache = KvCache::from_prefill(&shape, &acts).unwrap();
        (stack, acts, cache)
    }

    #[test]
    fn from_prefill_shapes() {
        let (_, _, cache) = setup(2, 2, 2, 5);
        assert_eq!(cache.seq_len(), 5);
        for l in 0..2 {
            for g in 0..2 {
                assert_eq!(cache.entries(l, g).len(), 5);
                assert_eq!(cache.entries(l, g).keys.rows(), cache.entries(l, g).values.rows());
            }
        }
        let (_, _, cache) = setup(1, 1, 1, 3);
        assert_eq!(cache.slots[0].len(), 1);
        let (_, _, cache) = setup(1, 4, 2, 3);
        assert_eq!(cache.slots[0].len(), 2);
    }

    #[test]
    fn from_prefill_rejects_mismatched_lengths() {
        let (stack, mut acts, _) = setup(2, 2, 2, 5);
        acts[1] = stack.prefill_layer(1, &acts[0].residual.rows_range(0, 4)).unwrap();
        assert!(matches!(
            KvCache::from_prefill(stack.shape(), &acts),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn full_plan_view_is_the_cache() {
        let (_, _, cache) = setup(2, 4, 2, 6);
        let plan = SelectionPlan::full(2, 4, 6, 2);
        let view = apply_plan(&cache, &plan).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                assert_eq!(view.head_entries(l, h).unwrap(), cache.head_entries(l, h).unwrap());
            }
        }
        assert_eq!(view.materialize().unwrap(), cache);
    }

    #[test]
    fn window_only_plan() {
        let (_, _, cache) = setup(1, 2, 2, 8);
        let plan = SelectionPlan::new(8, 3, vec![vec![vec![5, 6, 7]; 2]]).unwrap();
        let view = apply_plan(&cache, &plan).unwrap();
        for h in 0..2 {
            let (k, v) = view.head_entries(0, h).unwrap();
            assert_eq!(k.rows(), 3);
            assert_eq!(k, cache.entries(0, h).keys.rows_range(5, 8));
            assert_eq!(v, cache.entries(0, h).values.rows_range(5, 8));
        }
    }

    #[test]
    fn gqa_physical_set_is_union() {
        let (_, _, cache) = setup(1, 2, 1, 8);
        let plan = SelectionPlan::new(8, 0, vec![vec![vec![1, 3], vec![3, 5]]]).unwrap();
        let view = apply_plan(&cache, &plan).unwrap();
        assert_eq!(view.physical_positions(0, 0), &[1, 3, 5]);
        assert_eq!(view.head_positions(0, 1), &[3, 5]);
        let m = view.materialize().unwrap();
        assert_eq!(m.entries(0, 0).positions, vec![1, 3, 5]);
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let (_, _, cache) = setup(1, 1, 1, 4);
        assert!(matches!(
            SelectionPlan::new(4, 0, vec![vec![vec![0, 4]]]),
            Err(Error::Plan(_))
        ));
        assert!(matches!(
            SelectionPlan::new(4, 0, vec![vec![vec![1, 1]]]),
            Err(Error::Plan(_))
        ));
        assert!(matches!(
            SelectionPlan::new(4, 2, vec![vec![vec![0, 3]]]),
            Err(Error::Plan(_))
        ));
        let wrong_heads = SelectionPlan::full(1, 2, 4, 0);
        assert!(apply_plan(&cache, &wrong_heads).is_err());
    }

    #[test]
    fn plan_on_compressed_cache_needs_stored_tokens() {
        let (_, _, cache) = setup(1, 1, 1, 6);
        let plan = SelectionPlan::new(6, 1, vec![vec![vec![0, 2, 5]]]).unwrap();
        let m = apply_plan(&cache, &plan).unwrap().materialize().unwrap();
        let other = SelectionPlan::new(6, 1, vec![vec![vec![1, 5]]]).unwrap();
        assert!(matches!(apply_plan(&m, &other), Err(Error::Plan(_))));
    }

    #[test]
    fn apply_plan_is_idempotent_on_materialization() {
        let (_, _, cache) = setup(2, 4, 2, 10);
        let mut rng = SeededRng::new(3);
        let retained = (0..2)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let mut idx = rng.subset(8, 3);
                        idx.extend([8, 9]);
                        idx
                    })
                    .collect()
            })
            .collect();
        let plan = SelectionPlan::new(10, 2, retained).unwrap();
        let view = apply_plan(&cache, &plan).unwrap();
        let m = view.materialize().unwrap();
        let again = apply_plan(&m, &plan).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                assert_eq!(again.head_entries(l, h).unwrap(), view.head_entries(l, h).unwrap());
            }
        }
        assert_eq!(again.materialize().unwrap(), m);
    }

    #[test]
    fn decode_with_full_plan_is_bit_identical() {
        let (stack, _, cache) = setup(2, 4, 2, 7);
        let plan = SelectionPlan::full(2, 4, 7, 2);
        let view = apply_plan(&cache, &plan).unwrap();
        let x = SeededRng::new(99).normal_matrix(1, 16, 1.0);
        for l in 0..2 {
            let a = stack.decode_step(l, &x, &cache).unwrap();
            let b = stack.decode_step(l, &x, &view).unwrap();
            assert_eq!(a.output, b.output);
        }
    }

    #[test]
    fn identical_retained_tokens_get_equal_weight() {
        let (stack, acts, _) = setup(1, 1, 1, 1);
        let mut acts = acts;
        // duplicate token 0 so two cached entries are identical
        let a = &mut acts[0];
        a.keys[0] = a.keys[0].vstack(&a.keys[0].clone()).unwrap();
        a.values[0] = a.values[0].vstack(&a.values[0].clone()).unwrap();
        a.input = a.input.vstack(&a.input.clone()).unwrap();
        let cache = KvCache::from_prefill(stack.shape(), &acts).unwrap();
        let x = SeededRng::new(5).normal_matrix(1, 4, 1.0);
        let out = stack.decode_step(0, &x, &cache).unwrap();
        assert_eq!(out.weights[0][0], out.weights[0][1]);
    }

    #[test]
    fn decode_rejects_empty_retained_set() {
        let (stack, _, cache) = setup(1, 1, 1, 4);
        let plan = SelectionPlan::new(4, 0, vec![vec![vec![]]]).unwrap();
        let view = apply_plan(&cache, &plan).unwrap();
        let x = SeededRng::new(5).normal_matrix(1, 4, 1.0);
        assert!(matches!(stack.decode_step(0, &x, &view), Err(Error::Plan(_))));
    }

    #[test]
    fn append_token_extends_every_slot() {
        let (stack, _, mut cache) = setup(2, 2, 1, 3);
        let x = SeededRng::new(1).normal_matrix(1, 8, 1.0);
        let d0 = stack.decode_step(0, &x, &cache).unwrap();
        let d1 = stack.decode_step(1, &d0.residual, &cache).unwrap();
        let pos = cache
            .append_token(&[d0.new_keys, d1.new_keys], &[d0.new_values, d1.new_values])
            .unwrap();
        assert_eq!(pos, 3);
        assert_eq!(cache.seq_len(), 4);
        assert_eq!(cache.entries(1, 0).positions, vec![0, 1, 2, 3]);
    }

    #[test]
    fn retention_stats_examples() {
        let uniform = SelectionPlan::new(6, 0, vec![vec![vec![0, 1], vec![2, 3]]]).unwrap();
        assert_eq!(retention_stats(&uniform).head_variance, 0.0);

        let retained = vec![vec![(0..10).collect(), vec![8, 9]]];
        let s = retention_stats(&SelectionPlan::new(10, 2, retained).unwrap());
        assert_eq!(s.counts, vec![vec![10, 2]]);
        assert_eq!(s.total, 12);
        assert_eq!(s.head_variance, 16.0);
    }

    #[test]
    fn aggregation_over_inputs() {
        let a = retention_stats(&SelectionPlan::new(6, 0, vec![vec![vec![0, 1, 2], vec![3]]]).unwrap());
        let b = retention_stats(&SelectionPlan::new(6, 0, vec![vec![vec![0], vec![3, 4, 5]]]).unwrap());
        let same = aggregate_retention(&[a.clone(), a.clone()]).unwrap();
        assert!(same.heads.iter().all(|h| h.variance == 0.0 && h.range() == 0));
        let mixed = aggregate_retention(&[a, b]).unwrap();
        assert_eq!(mixed.heads[0].range(), 2);
        assert_eq!(mixed.heads[0].mean, 2.0);
        assert_eq!(mixed.heads[0].variance, 1.0);
        assert_eq!(mixed.max_range, 2);
        assert!(aggregate_retention(&[]).is_err());
    }

    #[test]
    fn csv_dumps() {
        let plan = SelectionPlan::new(3, 1, vec![vec![vec![0, 2]]]).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "layer,head,count,indices\n0,0,2,0;2\n");
        let mut buf = Vec::new();
        plan.write_snapshot_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "token,layer,head,retained\n0,0,0,1\n1,0,0,0\n2,0,0,1\n"
        );
    }
}
