//! Per-token eviction scores.
//!
//! Every scorer looks at the attention rows of the last `w` queries (the
//! observation window). Tokens inside the window are never evicted; they are
//! flagged rather than given an infinite score, and selection ranks them above
//! any finite value.
//!
//! Under GQA the attention map of a query head is replaced by the mean map of
//! its query group. Value-aware scorers still use the head's own `W_O` block,
//! so scores inside a group can differ.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionStack, LayerActivations};
use crate::error::{Error, Result};
use crate::kvcache::SelectionPlan;
use crate::linalg::{avg_pool_1d, col_l2_norms, col_means, col_variances, matmul, row_l2_norms, Matrix};
use crate::report::fmt_f64;
use crate::selection::Allocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Column-norm of attention times row-norm of `V W_O`.
    Laprox,
    /// Attention sinks plus a recent window.
    Sllm,
    /// Pooled mean attention.
    Snapkv,
    /// Pooled mean plus variance of attention, with entropy/variance layer budgets.
    Cake,
    /// Pooled mean attention with layer-flattened top-K and a per-head floor.
    Adakv,
    /// Pooled mean attention (plus epsilon) scaled by the row-norm of `V W_O`.
    Criticalkv,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::Laprox,
        Policy::Sllm,
        Policy::Snapkv,
        Policy::Cake,
        Policy::Adakv,
        Policy::Criticalkv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Laprox => "laprox",
            Policy::Sllm => "sllm",
            Policy::Snapkv => "snapkv",
            Policy::Cake => "cake",
            Policy::Adakv => "adakv",
            Policy::Criticalkv => "criticalkv",
        }
    }

    /// Budget allocation each policy uses unless overridden.
    pub fn default_allocation(self) -> Allocation {
        match self {
            Policy::Laprox => Allocation::Global,
            Policy::Sllm | Policy::Snapkv => Allocation::PerHead,
            Policy::Cake => Allocation::CakeLayers,
            Policy::Adakv | Policy::Criticalkv => Allocation::Adaptive,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::param(format!("unknown policy '{s}'")))
    }
}

fn default_window() -> usize {
    32
}
fn default_kernel() -> usize {
    7
}
fn default_sinks() -> usize {
    4
}
fn default_one() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_safeguard() -> f64 {
    0.2
}

/// Hyperparameters of one eviction policy.
///
/// `gamma`, `tau1`, `tau2`, `epsilon` and `safeguard` defaults are artifact
/// choices; the observation window (32), pooling kernel (7) and sink count (4)
/// follow the common setup of the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: Policy,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// SLLM only.
    #[serde(default = "default_sinks")]
    pub sink_count: usize,
    /// CAKE variance weight.
    #[serde(default = "default_one")]
    pub gamma: f64,
    /// CAKE entropy exponent `1/tau1`.
    #[serde(default = "default_one")]
    pub tau1: f64,
    /// CAKE variance exponent `1/tau2`.
    #[serde(default = "default_one")]
    pub tau2: f64,
    /// CriticalKV additive smoothing.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// AdaKV / CriticalKV per-head floor as a fraction of the per-head budget.
    #[serde(default = "default_safeguard")]
    pub safeguard: f64,
    /// Pool LaProx's attention factor like the baselines do (ablation only).
    #[serde(default)]
    pub pool_laprox: bool,
    /// Overrides [`Policy::default_allocation`].
    #[serde(default)]
    pub allocation: Option<Allocation>,
}

impl PolicyConfig {
    pub fn new(policy: Policy) -> Self {
        PolicyConfig {
            policy,
            window: default_window(),
            kernel: default_kernel(),
            sink_count: default_sinks(),
            gamma: 1.0,
            tau1: 1.0,
            tau2: 1.0,
            epsilon: default_epsilon(),
            safeguard: default_safeguard(),
            pool_laprox: false,
            allocation: None,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_allocation(mut self, allocation: Allocation) -> Self {
        self.allocation = Some(allocation);
        self
    }

    pub fn allocation(&self) -> Allocation {
        self.allocation.unwrap_or(self.policy.default_allocation())
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::param("observation window must be at least 1"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::param(format!("pooling kernel must be odd, got {}", self.kernel)));
        }
        if !(0.0..=1.0).contains(&self.safeguard) {
            return Err(Error::param(format!("safeguard {} outside [0, 1]", self.safeguard)));
        }
        for (name, v) in [("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scores per `(layer, head, token)`. Window tokens carry a flag and a stored
/// value of 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    seq_len: usize,
    window: usize,
    scores: Vec<Vec<Vec<f64>>>,
}

impl ScoreTensor {
    /// Validates shape and non-window values; window entries are zeroed.
    pub fn new(seq_len: usize, window: usize, mut scores: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let heads = scores.first().map_or(0, Vec::len);
        let start = seq_len.saturating_sub(window);
        for (l, layer) in scores.iter_mut().enumerate() {
            if layer.len() != heads {
                return Err(Error::param(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.len()
                )));
            }
            for (h, v) in layer.iter_mut().enumerate() {
                if v.len() != seq_len {
                    return Err(Error::param(format!(
                        "layer {l} head {h} has {} scores for {seq_len} tokens",
                        v.len()
                    )));
                }
                if let Some((t, bad)) = v[..start].iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
                    return Err(Error::param(format!(
                        "layer {l} head {h} token {t}: invalid score {bad}"
                    )));
                }
                v[start..].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(ScoreTensor {
            seq_len,
            window,
            scores,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// First window position; tokens at or after it are protected.
    pub fn window_start(&self) -> usize {
        self.seq_len.saturating_sub(self.window)
    }

    pub fn is_window(&self, token: usize) -> bool {
        token >= self.window_start()
    }

    /// Protected tokens per head, `min(w, T)`.
    pub fn window_count(&self) -> usize {
        self.seq_len - self.window_start()
    }

    pub fn layers(&self) -> usize {
        self.scores.len()
    }

    pub fn heads(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        &self.scores[layer][head]
    }

    pub fn layer(&self, layer: usize) -> &[Vec<f64>] {
        &self.scores[layer]
    }

    /// CSV with columns `layer,head,token,score,is_window`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "token", "score", "is_window"])?;
        for (l, layer) in self.scores.iter().enumerate() {
            for (h, v) in layer.iter().enumerate() {
                for (t, &s) in v.iter().enumerate() {
                    w.write_record([
                        l.to_string(),
                        h.to_string(),
                        t.to_string(),
                        fmt_f64(s),
                        u8::from(self.is_window(t)).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Observation-window attention of every query head: the last `w` rows of the
/// group-mean attention map, `w x T` (all rows when `T <= w`).
pub fn window_attention(acts: &LayerActivations, stack: &AttentionStack, window: usize) -> Vec<Matrix> {
    let shape = stack.shape();
    let t = acts.seq_len();
    let start = t.saturating_sub(window);
    let group_means: Vec<Matrix> = (0..shape.kv_heads)
        .map(|g| {
            let heads = shape.heads_of_group(g);
            let n = heads.len() as f64;
            let mut acc = Matrix::zeros(t - start, t);
            for h in heads {
                acc.add_assign(&acts.attention[h].rows_range(start, t))
                    .expect("attention maps share a shape");
            }
            if n == 1.0 {
                acc
            } else {
                acc.scale(1.0 / n)
            }
        })
        .collect();
    (0..shape.heads)
        .map(|h| group_means[shape.kv_head_of(h)].clone())
        .collect()
}

/// Row norms of `H = V W_O^h` for every query head.
pub fn projected_value_norms(acts: &LayerActivations, stack: &AttentionStack) -> Result<Vec<Vec<f64>>> {
    let shape = stack.shape();
    (0..shape.heads)
        .map(|h| {
            let v = &acts.values[shape.kv_head_of(h)];
            let projected = matmul(v, &stack.w_o_block(acts.layer, h))?;
            Ok(row_l2_norms(&projected))
        })
        .collect()
}

fn warn_if_unevictable(t: usize, window: usize, layer: usize) {
    if t <= window {
        log::warn!("layer {layer}: {t} tokens fit inside the {window}-token window; nothing is evictable");
    }
}

/// Pools `v` over the evictable prefix `[0, start)` only.
fn pool_prefix(v: &mut [f64], start: usize, kernel: usize) -> Result<()> {
    let pooled = avg_pool_1d(&v[..start], kernel)?;
    v[..start].copy_from_slice(&pooled);
    Ok(())
}

fn zero_window(v: &mut [f64], start: usize) {
    v[start..].iter_mut().for_each(|x| *x = 0.0);
}

/// `‖A[:, i]‖₂ · ‖V W_O^h [i, :]‖₂` per token.
pub fn laprox_head_scores(
    window_attn: &Matrix,
    value_norms: &[f64],
    window: usize,
    pool: Option<usize>,
) -> Result<Vec<f64>> {
    let t = window_attn.cols();
    let start = t.saturating_sub(window);
    let mut attn = col_l2_norms(window_attn);
    if let Some(k) = pool {
        pool_prefix(&mut attn, start, k)?;
    }
    let mut out: Vec<f64> = attn.iter().zip(value_norms).map(|(a, h)| a * h).collect();
    zero_window(&mut out, start);
    Ok(out)
}

/// Pooled column mean of the window attention.
pub fn mean_attention_head_scores(window_attn: &Matrix, window: usize, kernel: usize) -> Result<Vec<f64>> {
    let start = window_attn.cols().saturating_sub(window);
    let mut out = col_means(window_attn);
    pool_prefix(&mut out, start, kernel)?;
    zero_window(&mut out, start);
    Ok(out)
}

/// Pooled `mean + gamma * var` of each window-attention column (population variance).
pub fn cake_head_scores(window_attn: &Matrix, window: usize, kernel: usize, gamma: f64) -> Result<Vec<f64>> {
    let start = window_attn.cols().saturating_sub(window);
    let mut out: Vec<f64> = col_means(window_attn)
        .into_iter()
        .zip(col_variances(window_attn))
        .map(|(m, v)| m + gamma * v)
        .collect();
    pool_prefix(&mut out, start, kernel)?;
    zero_window(&mut out, start);
    Ok(out)
}

/// `(pooled mean + epsilon) · ‖V W_O^h [i, :]‖₂`.
pub fn criticalkv_head_scores(
    window_attn: &Matrix,
    value_norms: &[f64],
    window: usize,
    kernel: usize,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let start = window_attn.cols().saturating_sub(window);
    let mut out = mean_attention_head_scores(window_attn, window, kernel)?;
    for (s, h) in out.iter_mut().zip(value_norms) {
        *s = (*s + epsilon) * h;
    }
    zero_window(&mut out, start);
    Ok(out)
}

pub fn score_laprox(acts: &LayerActivations, stack: &AttentionStack, cfg: &PolicyConfig) -> Result<Vec<Vec<f64>>> {
    warn_if_unevictable(acts.seq_len(), cfg.window, acts.layer);
    let attn = window_attention(acts, stack, cfg.window);
    let norms = projected_value_norms(acts, stack)?;
    let pool = cfg.pool_laprox.then_some(cfg.kernel);
    attn.iter()
        .zip(&norms)
        .map(|(a, h)| laprox_head_scores(a, h, cfg.window, pool))
        .collect()
}

pub fn score_snapkv(acts: &LayerActivations, stack: &AttentionStack, cfg: &PolicyConfig) -> Result<Vec<Vec<f64>>> {
    warn_if_unevictable(acts.seq_len(), cfg.window, acts.layer);
    window_attention(acts, stack, cfg.window)
        .iter()
        .map(|a| mean_attention_head_scores(a, cfg.window, cfg.kernel))
        .collect()
}

pub fn score_cake(acts: &LayerActivations, stack: &AttentionStack, cfg: &PolicyConfig) -> Result<Vec<Vec<f64>>> {
    warn_if_unevictable(acts.seq_len(), cfg.window, acts.layer);
    window_attention(acts, stack, cfg.window)
        .iter()
        .map(|a| cake_head_scores(a, cfg.window, cfg.kernel, cfg.gamma))
        .collect()
}

pub fn score_criticalkv(acts: &LayerActivations, stack: &AttentionStack, cfg: &PolicyConfig) -> Result<Vec<Vec<f64>>> {
    warn_if_unevictable(acts.seq_len(), cfg.window, acts.layer);
    let attn = window_attention(acts, stack, cfg.window);
    let norms = projected_value_norms(acts, stack)?;
    attn.iter()
        .zip(&norms)
        .map(|(a, h)| criticalkv_head_scores(a, h, cfg.window, cfg.kernel, cfg.epsilon))
        .collect()
}

/// Scores one layer with the configured policy. SLLM has no scores.
pub fn score_layer(acts: &LayerActivations, stack: &AttentionStack, cfg: &PolicyConfig) -> Result<Vec<Vec<f64>>> {
    match cfg.policy {
        Policy::Laprox => score_laprox(acts, stack, cfg),
        Policy::Snapkv | Policy::Adakv => score_snapkv(acts, stack, cfg),
        Policy::Cake => score_cake(acts, stack, cfg),
        Policy::Criticalkv => score_criticalkv(acts, stack, cfg),
        Policy::Sllm => Err(Error::param("sllm evicts by fixed indices and has no scores")),
    }
}

/// Scores every layer into a [`ScoreTensor`].
pub fn score_model(acts: &[LayerActivations], stack: &AttentionStack, cfg: &PolicyConfig) -> Result<ScoreTensor> {
    cfg.validate()?;
    let t = acts.first().map_or(0, LayerActivations::seq_len);
    let scores = acts
        .iter()
        .map(|a| score_layer(a, stack, cfg))
        .collect::<Result<Vec<_>>>()?;
    ScoreTensor::new(t, cfg.window, scores)
}

/// Sinks plus recent tokens, identical for every head.
///
/// The plan's protected window is the recent block of `B - sink_count` tokens.
pub fn plan_sllm(
    seq_len: usize,
    layers: usize,
    heads: usize,
    cfg: &PolicyConfig,
    per_head_budget: usize,
) -> Result<SelectionPlan> {
    if per_head_budget < cfg.sink_count + 1 {
        return Err(Error::param(format!(
            "sllm budget {per_head_budget} must exceed the {} sink tokens",
            cfg.sink_count
        )));
    }
    let recent = per_head_budget - cfg.sink_count;
    let keep: Vec<usize> = if per_head_budget >= seq_len {
        (0..seq_len).collect()
    } else {
        (0..cfg.sink_count).chain(seq_len - recent..seq_len).collect()
    };
    SelectionPlan::new(seq_len, recent.min(seq_len), vec![vec![keep; heads]; layers])
}
