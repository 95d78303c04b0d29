//! Planted-needle construction: one token with a large projected value but
//! little attention.
//!
//! The instance is a single layer with a single head, identity projections and
//! a hand-built causal attention map. Attention to the needle and to its
//! pooling neighbourhood is suppressed so that mean-attention scoring ranks it
//! low even after pooling, while its value row is scaled until the
//! norm-product score ranks it inside the budget.

use crate::attention::{token_contribution, AttentionStack, LayerActivations, LayerWeights, StackShape, RMS_EPS};
use crate::error::{Error, Result};
use crate::kvcache::SelectionPlan;
use crate::linalg::{matmul, rms_norm_rows, softmax_rows, Matrix, SeededRng};
use crate::scoring::{Policy, PolicyConfig};
use crate::selection::compress;

const HEAD_DIM: usize = 8;
const MAX_ATTEMPTS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleSpec {
    pub seq_len: usize,
    pub window: usize,
    /// Per-head budget, window included.
    pub budget: usize,
    pub needle_pos: usize,
    pub kernel: usize,
    /// Zero the needle's value row instead of amplifying it.
    pub degenerate: bool,
}

impl NeedleSpec {
    pub fn new(seq_len: usize, window: usize, budget: usize, needle_pos: usize) -> Self {
        NeedleSpec {
            seq_len,
            window,
            budget,
            needle_pos,
            kernel: 7,
            degenerate: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let evictable = self.seq_len.saturating_sub(self.window);
        if self.needle_pos >= evictable {
            return Err(Error::param(format!(
                "needle position {} is not before the window start {evictable}",
                self.needle_pos
            )));
        }
        if self.budget <= self.window {
            return Err(Error::param(format!(
                "budget {} leaves no room beyond the {}-token window",
                self.budget, self.window
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::param(format!("pooling kernel {} must be odd", self.kernel)));
        }
        // the suppressed neighbourhood must be evictable in full
        if self.seq_len < self.budget + self.kernel {
            return Err(Error::param(format!(
                "{} tokens cannot hide a {}-token neighbourhood outside budget {}",
                self.seq_len, self.kernel, self.budget
            )));
        }
        Ok(())
    }

    fn neighbourhood(&self) -> std::ops::Range<usize> {
        let half = self.kernel / 2;
        self.needle_pos.saturating_sub(half)..self.needle_pos + half + 1
    }
}

/// Parameters the construction settled on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleParams {
    /// Logit offset applied to the suppressed columns.
    pub suppression: f64,
    /// Scale of the needle's value row relative to the others.
    pub value_gain: f64,
    pub attempts: usize,
}

#[derive(Debug, Clone)]
pub struct NeedleInstance {
    pub spec: NeedleSpec,
    pub params: NeedleParams,
    pub stack: AttentionStack,
    pub acts: LayerActivations,
}

/// Retention and output error of both policies on an instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeedleOutcome {
    pub laprox_retains: bool,
    pub snapkv_retains: bool,
    /// `‖Σ_{evicted j} Δo(i, j)‖_F` over the window queries `i`.
    pub laprox_error: f64,
    pub snapkv_error: f64,
}

fn identity_stack() -> Result<AttentionStack> {
    let shape = StackShape::new(1, 1, 1, HEAD_DIM)?;
    let eye = Matrix::identity(HEAD_DIM);
    AttentionStack::from_layers(
        shape,
        vec![LayerWeights {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
        }],
    )
}

fn build_acts(
    spec: &NeedleSpec,
    logits: &Matrix,
    base: &Matrix,
    gain: f64,
    suppression: f64,
) -> Result<LayerActivations> {
    let t = spec.seq_len;
    let hood = spec.neighbourhood();
    let mut masked = logits.clone();
    for i in 0..t {
        for j in 0..t {
            if j > i {
                masked.set(i, j, f64::NEG_INFINITY);
            } else if hood.contains(&j) && j != i {
                masked.set(i, j, logits.get(i, j) - suppression);
            }
        }
    }
    let attention = softmax_rows(&masked)?;
    let mut x = base.clone();
    x.row_mut(spec.needle_pos).iter_mut().for_each(|v| *v *= gain);
    let head = matmul(&attention, &x)?;
    let residual = rms_norm_rows(&head.add(&x)?, RMS_EPS);
    Ok(LayerActivations {
        layer: 0,
        input: x.clone(),
        keys: vec![x.clone()],
        values: vec![x],
        attention: vec![attention],
        head_outputs: vec![head.clone()],
        concat: head.clone(),
        output: head,
        residual,
    })
}

fn plan_for(
    inst_stack: &AttentionStack,
    acts: &LayerActivations,
    spec: &NeedleSpec,
    policy: Policy,
) -> Result<SelectionPlan> {
    let mut cfg = PolicyConfig::new(policy).with_window(spec.window);
    cfg.kernel = spec.kernel;
    compress(inst_stack, std::slice::from_ref(acts), &cfg, spec.budget)
}

/// Builds a needle instance; suppression and value gain grow until the
/// separation holds or the attempt limit is reached.
pub fn plant_needle(spec: NeedleSpec, rng: &mut SeededRng) -> Result<NeedleInstance> {
    spec.validate()?;
    let stack = identity_stack()?;
    let logits = rng.normal_matrix(spec.seq_len, spec.seq_len, 1.0);
    let base = rng.normal_matrix(spec.seq_len, HEAD_DIM, 1.0);
    let mut params = NeedleParams {
        suppression: 4.0,
        value_gain: if spec.degenerate { 0.0 } else { 4.0 },
        attempts: 0,
    };
    for attempt in 1..=MAX_ATTEMPTS {
        params.attempts = attempt;
        let acts = build_acts(&spec, &logits, &base, params.value_gain, params.suppression)?;
        let snap = plan_for(&stack, &acts, &spec, Policy::Snapkv)?;
        let lap = plan_for(&stack, &acts, &spec, Policy::Laprox)?;
        let snap_keeps = snap.head(0, 0).contains(&spec.needle_pos);
        let lap_keeps = lap.head(0, 0).contains(&spec.needle_pos);
        if !snap_keeps && (lap_keeps || spec.degenerate) {
            return Ok(NeedleInstance {
                spec,
                params,
                stack,
                acts,
            });
        }
        if snap_keeps {
            params.suppression += 2.0;
        }
        if !lap_keeps && !spec.degenerate {
            params.value_gain *= 2.0;
        }
    }
    Err(Error::param(format!(
        "no separating needle found for T={}, w={}, B={} after {MAX_ATTEMPTS} attempts",
        spec.seq_len, spec.window, spec.budget
    )))
}

impl NeedleInstance {
    pub fn plan(&self, policy: Policy) -> Result<SelectionPlan> {
        plan_for(&self.stack, &self.acts, &self.spec, policy)
    }

    /// Output lost by evicting everything outside `plan`, measured on the
    /// window queries through per-token contributions.
    pub fn eviction_error(&self, plan: &SelectionPlan) -> Result<f64> {
        let t = self.spec.seq_len;
        let kept = plan.head(0, 0);
        let mut sq = 0.0;
        for i in t - self.spec.window..t {
            let mut lost = Matrix::zeros(1, HEAD_DIM);
            for j in (0..=i).filter(|j| kept.binary_search(j).is_err()) {
                lost.add_assign(&token_contribution(&self.acts, &self.stack, i, j)?)?;
            }
            sq += lost.frobenius_norm().powi(2);
        }
        Ok(sq.sqrt())
    }

    pub fn evaluate(&self) -> Result<NeedleOutcome> {
        let lap = self.plan(Policy::Laprox)?;
        let snap = self.plan(Policy::Snapkv)?;
        Ok(NeedleOutcome {
            laprox_retains: lap.head(0, 0).contains(&self.spec.needle_pos),
            snapkv_retains: snap.head(0, 0).contains(&self.spec.needle_pos),
            laprox_error: self.eviction_error(&lap)?,
            snapkv_error: self.eviction_error(&snap)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NeedleSpec {
        NeedleSpec::new(96, 8, 24, 37)
    }

    #[test]
    fn separates_policies() {
        let inst = plant_needle(spec(), &mut SeededRng::new(2024)).unwrap();
        let out = inst.evaluate().unwrap();
        assert!(out.laprox_retains);
        assert!(!out.snapkv_retains);
        assert!(out.snapkv_error > out.laprox_error, "{out:?}");
    }

    #[test]
    fn construction_is_deterministic() {
        let a = plant_needle(spec(), &mut SeededRng::new(9)).unwrap();
        let b = plant_needle(spec(), &mut SeededRng::new(9)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.acts.attention, b.acts.attention);
        assert_eq!(a.acts.values, b.acts.values);
        assert_eq!(a.evaluate().unwrap(), b.evaluate().unwrap());
    }

    #[test]
    fn degenerate_needle_is_evicted_by_both() {
        let s = NeedleSpec {
            degenerate: true,
            ..spec()
        };
        let out = plant_needle(s, &mut SeededRng::new(2024)).unwrap().evaluate().unwrap();
        assert!(!out.laprox_retains && !out.snapkv_retains);
    }

    #[test]
    fn activations_are_consistent() {
        let inst = plant_needle(spec(), &mut SeededRng::new(5)).unwrap();
        let a = &inst.acts.attention[0];
        for i in 0..a.rows() {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.row(i)[i + 1..].iter().all(|&p| p == 0.0));
        }
        assert!(crate::attention::head_decomposition_residual(&inst.acts, &inst.stack).unwrap() == 0.0);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut rng = SeededRng::new(1);
        for s in [
            NeedleSpec::new(96, 8, 24, 90),
            NeedleSpec::new(96, 8, 8, 37),
            NeedleSpec::new(30, 8, 24, 10),
            NeedleSpec { kernel: 4, ..spec() },
        ] {
            assert!(plant_needle(s, &mut rng).unwrap_err().is_parameter(), "{s:?}");
        }
    }
}
