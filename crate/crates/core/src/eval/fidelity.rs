//! First-decode-token fidelity of a compressed cache.
//!
//! The decode token runs through the full stack once with the full cache. At
//! every layer the same input is also attended over the compressed cache, so
//! the per-layer comparison never compounds earlier layers' drift.

use std::io::Write;

use crate::attention::{AttentionStack, LayerActivations, StackShape};
use crate::error::{Error, Result};
use crate::kvcache::{apply_plan, KvCache, SelectionPlan};
use crate::linalg::{cosine_similarity, relative_frobenius, Matrix, SeededRng};
use crate::report::fmt_f64;
use crate::scoring::PolicyConfig;
use crate::selection::compress;

/// Which per-layer output is compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputSite {
    /// Attention output `O` before the residual connection.
    #[default]
    Attention,
    /// `RMSNorm(O + x)`.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerFidelity {
    pub layer: usize,
    /// Cosine between full and compressed outputs, in `[-1, 1]`.
    pub cosine: f64,
    /// `‖full - compressed‖_F / ‖full‖_F`.
    pub frob_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub label: String,
    pub budget: usize,
    pub layers: Vec<LayerFidelity>,
}

impl FidelityReport {
    pub fn mean_cosine(&self) -> f64 {
        self.layers.iter().map(|l| l.cosine).sum::<f64>() / self.layers.len() as f64
    }

    pub fn mean_frob_err(&self) -> f64 {
        self.layers.iter().map(|l| l.frob_err).sum::<f64>() / self.layers.len() as f64
    }
}

/// One synthetic trial: a random stack, a standard-normal prompt and a
/// standard-normal decode token, all drawn from `seed`.
#[derive(Debug, Clone)]
pub struct FidelityTrial {
    pub seed: u64,
    pub stack: AttentionStack,
    pub prompt: Matrix,
    pub decode_token: Matrix,
}

impl FidelityTrial {
    pub fn generate(shape: StackShape, seq_len: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::param("sequence length must be positive"));
        }
        let mut rng = SeededRng::new(seed);
        let stack = AttentionStack::build(shape, &mut rng)?;
        let d = shape.model_dim();
        let prompt = rng.normal_matrix(seq_len, d, 1.0);
        let decode_token = rng.normal_matrix(1, d, 1.0);
        Ok(FidelityTrial {
            seed,
            stack,
            prompt,
            decode_token,
        })
    }

    pub fn prefill(&self) -> Result<Prefilled<'_>> {
        let acts = self.stack.prefill(&self.prompt)?;
        let cache = KvCache::from_prefill(self.stack.shape(), &acts)?;
        Ok(Prefilled {
            trial: self,
            acts,
            cache,
        })
    }
}

/// A trial after prefill, reusable across policies and budgets.
#[derive(Debug)]
pub struct Prefilled<'a> {
    trial: &'a FidelityTrial,
    pub acts: Vec<LayerActivations>,
    pub cache: KvCache,
}

impl Prefilled<'_> {
    pub fn stack(&self) -> &AttentionStack {
        &self.trial.stack
    }

    pub fn plan(&self, cfg: &PolicyConfig, budget: usize) -> Result<SelectionPlan> {
        compress(&self.trial.stack, &self.acts, cfg, budget)
    }

    /// Compares full and compressed decoding of the trial's decode token.
    pub fn compare(
        &self,
        plan: &SelectionPlan,
        label: &str,
        budget: usize,
        site: OutputSite,
    ) -> Result<FidelityReport> {
        compare_decode(
            &self.trial.stack,
            &self.cache,
            plan,
            &self.trial.decode_token,
            label,
            budget,
            site,
        )
    }

    pub fn measure(&self, cfg: &PolicyConfig, budget: usize, site: OutputSite) -> Result<FidelityReport> {
        let plan = self.plan(cfg, budget)?;
        self.compare(&plan, cfg.policy.name(), budget, site)
    }
}

fn compare_decode(
    stack: &AttentionStack,
    cache: &KvCache,
    plan: &SelectionPlan,
    token: &Matrix,
    label: &str,
    budget: usize,
    site: OutputSite,
) -> Result<FidelityReport> {
    let view = apply_plan(cache, plan)?;
    let mut input = token.clone();
    let mut layers = Vec::with_capacity(stack.shape().layers);
    for l in 0..stack.shape().layers {
        let full = stack.decode_step(l, &input, cache)?;
        let comp = stack.decode_step(l, &input, &view)?;
        let (a, b) = match site {
            OutputSite::Attention => (&full.output, &comp.output),
            OutputSite::Residual => (&full.residual, &comp.residual),
        };
        layers.push(LayerFidelity {
            layer: l,
            cosine: cosine_similarity(a, b)?,
            frob_err: relative_frobenius(b, a)?,
        });
        input = full.residual;
    }
    Ok(FidelityReport {
        label: label.to_string(),
        budget,
        layers,
    })
}

/// Prefills `prompt`, compresses with `cfg` at per-head budget `budget`, and
/// compares the first decode step on full and compressed caches.
pub fn measure_fidelity(
    stack: &AttentionStack,
    prompt: &Matrix,
    decode_token: &Matrix,
    cfg: &PolicyConfig,
    budget: usize,
    site: OutputSite,
) -> Result<FidelityReport> {
    let acts = stack.prefill(prompt)?;
    let cache = KvCache::from_prefill(stack.shape(), &acts)?;
    let plan = compress(stack, &acts, cfg, budget)?;
    compare_decode(stack, &cache, &plan, decode_token, cfg.policy.name(), budget, site)
}

/// Writes `seed,layer,policy,budget,cosine,frob_err`, one row per
/// `(report, layer)` in the given order.
pub fn write_fidelity_csv<W: Write>(out: W, rows: &[(u64, FidelityReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "layer", "policy", "budget", "cosine", "frob_err"])?;
    for (seed, report) in rows {
        for l in &report.layers {
            w.write_record([
                seed.to_string(),
                l.layer.to_string(),
                report.label.clone(),
                report.budget.to_string(),
                fmt_f64(l.cosine),
                fmt_f64(l.frob_err),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
