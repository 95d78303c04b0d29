//! End-to-end invariant checks shared by the `selftest` command and the
//! acceptance suite. Each check is seeded, deterministic and self-contained.

use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::attention::{head_decomposition_residual, token_contribution, AttentionStack, LayerWeights, StackShape};
use crate::error::Result;
use crate::eval::ablation::{ablation_trial, AblationSummary};
use crate::eval::crs::run_crs_trials;
use crate::eval::fidelity::{FidelityTrial, OutputSite};
use crate::eval::needle::{plant_needle, NeedleSpec};
use crate::kvcache::SelectionPlan;
use crate::linalg::{Matrix, SeededRng};
use crate::scoring::{plan_sllm, score_model, Policy, PolicyConfig, ScoreTensor};
use crate::selection::{
    allocate, budget_contract, compress, normalize_layer_scores, select_adakv, select_per_head, Allocation, BudgetSpec,
};

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {:<32} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(id: u32, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        id,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn random_stack(rng: &mut SeededRng, layers: usize, heads: usize, head_dim: usize) -> Result<AttentionStack> {
    let divisors: Vec<usize> = (1..=heads).filter(|d| heads.is_multiple_of(*d)).collect();
    let kv = divisors[rng.index(0, divisors.len())];
    AttentionStack::build(StackShape::new(layers, heads, kv, head_dim)?, rng)
}

/// `Concat(H) W_O` equals the sum of per-head block products on 100 random
/// layers, relative residual at most `1e-9`.
pub fn decomposition_identity(seed: u64) -> CheckResult {
    timed(1, "head decomposition identity", || {
        let worst = (0..100u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = SeededRng::new(seed ^ (i << 32));
                let heads = [1, 2, 4, 8][rng.index(0, 4)];
                let s = [8, 64][rng.index(0, 2)];
                let dh = [4, 16][rng.index(0, 2)];
                let stack = random_stack(&mut rng, 1, heads, dh)?;
                let x = rng.normal_matrix(s, stack.shape().model_dim(), 1.0);
                head_decomposition_residual(&stack.prefill_layer(0, &x)?, &stack)
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok((
            worst <= 1e-9,
            format!("max relative residual {worst:.3e} over 100 layers"),
        ))
    })
}

/// Per-token contributions sum to the attention output at every query
/// position of 50 random layers, relative gap at most `1e-9`.
pub fn contribution_completeness(seed: u64) -> CheckResult {
    timed(2, "token contribution completeness", || {
        let worst = (0..50u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = SeededRng::new(seed ^ (i << 32) ^ 0x5eed);
                let heads = [1, 2, 4][rng.index(0, 3)];
                let s = rng.index(4, 33);
                let dh = [4, 8][rng.index(0, 2)];
                let stack = random_stack(&mut rng, 1, heads, dh)?;
                let x = rng.normal_matrix(s, stack.shape().model_dim(), 1.0);
                let acts = stack.prefill_layer(0, &x)?;
                let mut worst = 0.0f64;
                for q in 0..s {
                    let mut sum = Matrix::zeros(1, stack.shape().model_dim());
                    for t in 0..=q {
                        sum.add_assign(&token_contribution(&acts, &stack, q, t)?)?;
                    }
                    let o = Matrix::row_vector(acts.output.row(q));
                    let gap = sum.sub(&o)?.frobenius_norm() / o.frobenius_norm().max(f64::MIN_POSITIVE);
                    worst = worst.max(gap);
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok((worst <= 1e-9, format!("max relative gap {worst:.3e} over 50 layers")))
    })
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn random_scores(rng: &mut SeededRng) -> Result<ScoreTensor> {
    let layers = rng.index(1, 5);
    let heads = rng.index(1, 6);
    let t = rng.index(2, 80);
    let window = rng.index(0, t);
    let spread = rng.uniform_range(0.0, 4.0);
    let scores = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| (0..t).map(|_| (spread * rng.normal()).exp()).collect())
                .collect()
        })
        .collect();
    ScoreTensor::new(t, window, scores)
}

/// Within-layer argsort of the evictable scores is unchanged by layer
/// normalization on 100 random score tensors.
pub fn normalization_ranking(seed: u64) -> CheckResult {
    timed(3, "normalization ranking preservation", || {
        let mut rng = SeededRng::new(seed);
        let mut violations = 0;
        for _ in 0..100 {
            let raw = random_scores(&mut rng)?;
            let norm = normalize_layer_scores(&raw)?;
            let start = raw.window_start();
            for l in 0..raw.layers() {
                let flat =
                    |s: &ScoreTensor| -> Vec<f64> { s.layer(l).iter().flat_map(|v| v[..start].to_vec()).collect() };
                if argsort(&flat(&raw)) != argsort(&flat(norm.scores())) {
                    violations += 1;
                }
            }
        }
        Ok((
            violations == 0,
            format!("{violations} layers with changed ranking over 100 tensors"),
        ))
    })
}

fn plan_violations(plan: &SelectionPlan, contract: usize, window: usize) -> Vec<String> {
    let mut v = Vec::new();
    if plan.total_retained() != contract {
        v.push(format!("retained {} != contract {contract}", plan.total_retained()));
    }
    let t = plan.seq_len();
    for layer in plan.retained() {
        for kept in layer {
            if (t.saturating_sub(window)..t).any(|i| kept.binary_search(&i).is_err()) {
                v.push("window token evicted".into());
            }
        }
    }
    v
}

/// Every policy under every allocation it supports keeps exactly its budget
/// contract and the whole window, on 50 random configurations.
pub fn budget_exactness(seed: u64) -> CheckResult {
    timed(4, "budget exactness and window safety", || {
        let results = (0..50u64)
            .into_par_iter()
            .map(|i| -> Result<(usize, Vec<String>)> {
                let mut rng = SeededRng::new(seed ^ (i << 32) ^ 0xb0d6e7);
                let layers = rng.index(1, 4);
                let heads = [1, 2, 4][rng.index(0, 3)];
                let dh = [4, 8][rng.index(0, 2)];
                let stack = random_stack(&mut rng, layers, heads, dh)?;
                let t = rng.index(8, 81);
                let window = rng.index(1, t.min(16) + 1);
                let budget = rng.index(window.max(5), t + 6);
                let x = rng.normal_matrix(t, stack.shape().model_dim(), 1.0);
                let acts = stack.prefill(&x)?;
                let contract = budget_contract(layers, heads, t, budget);
                let mut plans = 0;
                let mut bad = Vec::new();
                for policy in Policy::ALL {
                    let mut cfg = PolicyConfig::new(policy).with_window(window);
                    cfg.kernel = [1, 3, 7][rng.index(0, 3)];
                    let allocations: Vec<Option<Allocation>> = if policy == Policy::Sllm {
                        vec![None]
                    } else {
                        [
                            Allocation::PerHead,
                            Allocation::HeadFlatten,
                            Allocation::Adaptive,
                            Allocation::CakeLayers,
                            Allocation::Global,
                            Allocation::GlobalRaw,
                        ]
                        .into_iter()
                        .map(Some)
                        .collect()
                    };
                    for alloc in allocations {
                        cfg.allocation = alloc;
                        let plan = compress(&stack, &acts, &cfg, budget)?;
                        let protected = if policy == Policy::Sllm {
                            plan.window()
                        } else {
                            window.min(t)
                        };
                        plans += 1;
                        bad.extend(
                            plan_violations(&plan, contract, protected)
                                .into_iter()
                                .map(|e| format!("config {i} {policy}/{alloc:?}: {e}")),
                        );
                    }
                }
                Ok((plans, bad))
            })
            .collect::<Result<Vec<_>>>()?;
        let plans: usize = results.iter().map(|r| r.0).sum();
        let bad: Vec<String> = results.into_iter().flat_map(|r| r.1).collect();
        let mut detail = format!("{} violations over {plans} plans from 50 configs", bad.len());
        if let Some(first) = bad.first() {
            detail.push_str(&format!("; first: {first}"));
        }
        Ok((bad.is_empty(), detail))
    })
}

/// Fraction of paired trials where LaProx's mean-over-layers cosine is at
/// least the mean-attention baseline's, with both aggregate means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityDirection {
    pub trials: usize,
    pub wins: usize,
    pub laprox_mean: f64,
    pub baseline_mean: f64,
}

pub fn fidelity_direction_stats(seed: u64, trials: usize) -> Result<FidelityDirection> {
    let shape = StackShape::new(4, 4, 4, 16)?;
    let (t, budget, window) = (256, 64, 32);
    let pairs = (0..trials as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let trial = FidelityTrial::generate(shape, t, seed.wrapping_add(i))?;
            let p = trial.prefill()?;
            let lap = p.measure(
                &PolicyConfig::new(Policy::Laprox).with_window(window),
                budget,
                OutputSite::Attention,
            )?;
            let snap = p.measure(
                &PolicyConfig::new(Policy::Snapkv).with_window(window),
                budget,
                OutputSite::Attention,
            )?;
            Ok((lap.mean_cosine(), snap.mean_cosine()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    Ok(FidelityDirection {
        trials: pairs.len(),
        wins: pairs.iter().filter(|(l, s)| l >= s).count(),
        laprox_mean: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        baseline_mean: pairs.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// LaProx beats mean attention in at least 90% of 200 paired trials at a 25%
/// budget (`L=4, H=4, S=256`), and on average.
pub fn fidelity_direction(seed: u64) -> CheckResult {
    timed(5, "fidelity direction", || {
        let s = fidelity_direction_stats(seed, 200)?;
        let passed = s.wins * 10 >= s.trials * 9 && s.laprox_mean > s.baseline_mean;
        Ok((
            passed,
            format!(
                "laprox >= snapkv in {}/{} trials (need 90%); means {:.5} vs {:.5}",
                s.wins, s.trials, s.laprox_mean, s.baseline_mean
            ),
        ))
    })
}

/// Norm-product top-k beats the exhaustive median in at least 99% and a
/// uniform random subset in at least 95% of 500 instances.
pub fn crs_oracle(seed: u64) -> CheckResult {
    timed(6, "column-row selection oracle", || {
        let trials = run_crs_trials(seed, 500, 0.0)?;
        let n = trials.len();
        let med = trials.iter().filter(|t| t.norm_product <= t.exhaustive_median).count();
        let uni = trials.iter().filter(|t| t.norm_product <= t.uniform_random).count();
        Ok((
            med * 100 >= n * 99 && uni * 100 >= n * 95,
            format!("<= median in {med}/{n} (need 99%), <= random in {uni}/{n} (need 95%)"),
        ))
    })
}

/// The planted needle is kept by LaProx, evicted by mean attention, and
/// LaProx loses strictly less output.
pub fn needle_separation(seed: u64) -> CheckResult {
    timed(7, "planted needle separation", || {
        let inst = plant_needle(NeedleSpec::new(128, 16, 32, 37), &mut SeededRng::new(seed))?;
        let o = inst.evaluate()?;
        Ok((
            o.laprox_retains && !o.snapkv_retains && o.laprox_error < o.snapkv_error,
            format!(
                "laprox keeps={} snapkv keeps={} errors {:.4e} vs {:.4e}",
                o.laprox_retains, o.snapkv_retains, o.laprox_error, o.snapkv_error
            ),
        ))
    })
}

/// Mean-over-seeds cosine of the four ablation variants.
pub fn ablation_stats(seed: u64, trials: usize) -> Result<AblationSummary> {
    let shape = StackShape::new(4, 4, 4, 16)?;
    let rows = (0..trials as u64)
        .into_par_iter()
        .map(|i| ablation_trial(shape, 256, 64, 32, seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationSummary::from_rows(&rows.concat()))
}

/// Over 100 paired seeds, `L_G > L_L` and `L_G - L_L > A_G - A_L`.
pub fn ablation_ordering(seed: u64) -> CheckResult {
    timed(8, "allocation ablation ordering", || {
        let s = ablation_stats(seed, 100)?;
        let (lg, ag) = (s.laprox_gain(), s.attention_gain());
        Ok((
            lg > 0.0 && lg > ag,
            format!("L_G-L_L {lg:+.5} (need > 0), A_G-A_L {ag:+.5} (need < L_G-L_L)"),
        ))
    })
}

fn unit_value_layer(
    rng: &mut SeededRng,
    heads: usize,
    dh: usize,
    t: usize,
) -> Result<(AttentionStack, Vec<crate::attention::LayerActivations>)> {
    let shape = StackShape::new(1, heads, heads, dh)?;
    let d = shape.model_dim();
    let std = 1.0 / (d as f64).sqrt();
    let stack = AttentionStack::from_layers(
        shape,
        vec![LayerWeights {
            w_q: rng.normal_matrix(d, d, std),
            w_k: rng.normal_matrix(d, d, std),
            w_v: rng.normal_matrix(d, d, std),
            w_o: Matrix::identity(d),
        }],
    )?;
    let x = rng.normal_matrix(t, d, 1.0);
    let mut acts = stack.prefill(&x)?;
    // signed basis rows have norm exactly 1 through an identity W_O
    for v in acts[0].values.iter_mut() {
        for r in 0..t {
            let row = v.row_mut(r);
            row.iter_mut().for_each(|e| *e = 0.0);
            row[r % dh] = if r % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    Ok((stack, acts))
}

/// Baselines reduce exactly to their simpler relatives in degenerate settings.
pub fn baseline_conformance(seed: u64) -> CheckResult {
    timed(9, "baseline conformance", || {
        let mut rng = SeededRng::new(seed);
        let mut failures = Vec::new();
        for case in 0..20 {
            let t = rng.index(16, 97);
            let budget = rng.index(5, t);
            let heads = [1, 2, 4][rng.index(0, 3)];
            let window = rng.index(1, budget.min(12) + 1);

            let sllm = plan_sllm(t, 2, heads, &PolicyConfig::new(Policy::Sllm), budget)?;
            let want: Vec<usize> = (0..4).chain(t - (budget - 4)..t).collect();
            if sllm.retained().iter().flatten().any(|k| *k != want) {
                failures.push(format!("case {case}: sllm plan differs from sinks plus recent"));
            }

            let stack = random_stack(&mut rng, 2, heads, 8)?;
            let acts = stack.prefill(&rng.normal_matrix(t, stack.shape().model_dim(), 1.0))?;
            let snap_cfg = PolicyConfig::new(Policy::Snapkv).with_window(window);
            let snap = score_model(&acts, &stack, &snap_cfg)?;
            let mut cake_cfg = PolicyConfig::new(Policy::Cake).with_window(window);
            cake_cfg.gamma = 0.0;
            if score_model(&acts, &stack, &cake_cfg)? != snap {
                failures.push(format!("case {case}: cake with gamma 0 scores differ from snapkv"));
            }
            let spec = BudgetSpec::new(budget, window)?;
            if select_adakv(&snap, spec, 1.0)? != select_per_head(&snap, spec)? {
                failures.push(format!("case {case}: adakv with full safeguard differs from per-head"));
            }

            let (ustack, uacts) = unit_value_layer(&mut rng, heads, 4, t)?;
            let usnap = score_model(&uacts, &ustack, &snap_cfg)?;
            let mut crit_cfg = PolicyConfig::new(Policy::Criticalkv).with_window(window);
            crit_cfg.epsilon = 0.0;
            let crit = score_model(&uacts, &ustack, &crit_cfg)?;
            if crit != usnap {
                failures.push(format!(
                    "case {case}: criticalkv with eps 0 and unit values differs from snapkv"
                ));
            }
            let per_head = |s: &ScoreTensor, c: &PolicyConfig| allocate(s, Allocation::PerHead, spec, c, None);
            if per_head(&crit, &crit_cfg)? != per_head(&usnap, &snap_cfg)? {
                failures.push(format!("case {case}: criticalkv per-head plan differs from snapkv"));
            }
        }
        let mut detail = format!("{} mismatches over 20 cases", failures.len());
        if let Some(first) = failures.first() {
            detail.push_str(&format!("; first: {first}"));
        }
        Ok((failures.is_empty(), detail))
    })
}

/// Checks run by `selftest`: everything except the two statistical fidelity
/// experiments.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    vec![
        decomposition_identity(seed),
        contribution_completeness(seed),
        normalization_ranking(seed),
        budget_exactness(seed),
        crs_oracle(seed),
        needle_separation(seed),
        baseline_conformance(seed),
    ]
}
