use kvevict::kvcache::KvSource;
use kvevict::{
    apply_plan, compress, AttentionStack, KvCache, Policy, PolicyConfig, SeededRng, SelectionPlan, StackShape,
};

fn setup(seed: u64) -> (AttentionStack, Vec<kvevict::LayerActivations>, KvCache) {
    let mut rng = SeededRng::new(seed);
    let shape = StackShape::new(2, 4, 2, 8).unwrap();
    let stack = AttentionStack::build(shape, &mut rng).unwrap();
    let x = rng.normal_matrix(48, shape.model_dim(), 1.0);
    let acts = stack.prefill(&x).unwrap();
    let cache = KvCache::from_prefill(&shape, &acts).unwrap();
    (stack, acts, cache)
}

#[test]
fn every_policy_compresses_to_a_usable_view() {
    let (stack, acts, cache) = setup(3);
    let shape = *stack.shape();
    let budget = 16;
    for policy in Policy::ALL {
        let cfg = PolicyConfig::new(policy).with_window(6);
        let plan = compress(&stack, &acts, &cfg, budget).unwrap();
        assert_eq!(plan.total_retained(), budget * shape.heads * shape.layers, "{policy}");
        let view = apply_plan(&cache, &plan).unwrap();
        for layer in 0..shape.layers {
            for kv in 0..shape.kv_heads {
                let mut union: Vec<usize> = shape
                    .heads_of_group(kv)
                    .flat_map(|h| plan.head(layer, h).to_vec())
                    .collect();
                union.sort_unstable();
                union.dedup();
                assert_eq!(view.physical_positions(layer, kv), union.as_slice(), "{policy}");
            }
            for h in 0..shape.heads {
                let (k, v) = view.head_entries(layer, h).unwrap();
                let kept = plan.head(layer, h).len();
                assert!(kept >= 6, "{policy}: window dropped");
                assert_eq!(k.shape(), (kept, shape.head_dim));
                assert_eq!(v.shape(), (kept, shape.head_dim));
            }
        }
        let token = SeededRng::new(9).normal_matrix(1, shape.model_dim(), 1.0);
        let out = stack.decode_step(0, &token, &view).unwrap();
        assert!(out.output.is_finite());
    }
}

#[test]
fn full_plan_view_decodes_like_the_cache() {
    let (stack, _, cache) = setup(4);
    let shape = *stack.shape();
    let plan = SelectionPlan::full(shape.layers, shape.heads, cache.seq_len(), 4);
    let view = apply_plan(&cache, &plan).unwrap();
    let token = SeededRng::new(1).normal_matrix(1, shape.model_dim(), 1.0);
    for layer in 0..shape.layers {
        let a = stack.decode_step(layer, &token, &cache).unwrap();
        let b = stack.decode_step(layer, &token, &view).unwrap();
        assert_eq!(a.output, b.output);
    }
}

#[test]
fn materialized_view_keeps_only_the_union() {
    let (stack, acts, cache) = setup(5);
    let shape = *stack.shape();
    let plan = compress(&stack, &acts, &PolicyConfig::new(Policy::Laprox).with_window(6), 12).unwrap();
    let compact = apply_plan(&cache, &plan).unwrap().materialize().unwrap();
    for layer in 0..shape.layers {
        for kv in 0..shape.kv_heads {
            let widest = shape
                .heads_of_group(kv)
                .map(|h| plan.head(layer, h).len())
                .max()
                .unwrap();
            let total: usize = shape.heads_of_group(kv).map(|h| plan.head(layer, h).len()).sum();
            let stored = compact.entries(layer, kv).len();
            assert!((widest..=total).contains(&stored));
        }
    }
}
