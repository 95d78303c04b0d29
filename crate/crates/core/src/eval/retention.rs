//! Retained-count distributions over several inputs of one model.

use std::io::Write;

use crate::attention::AttentionStack;
use crate::error::{Error, Result};
use crate::kvcache::{aggregate_retention, retention_stats, RetentionSummary, SelectionPlan};
use crate::linalg::{Matrix, SeededRng};
use crate::scoring::PolicyConfig;
use crate::selection::compress;

/// `count` prompts of `seq_len x dim` standard-normal rows, each row scaled by
/// `exp(spread * z)` with `z` standard normal. `spread = 0` draws no scales.
pub fn synthetic_prompts(rng: &mut SeededRng, count: usize, seq_len: usize, dim: usize, spread: f64) -> Vec<Matrix> {
    (0..count)
        .map(|_| {
            let mut x = rng.normal_matrix(seq_len, dim, 1.0);
            if spread != 0.0 {
                for r in 0..seq_len {
                    let s = (spread * rng.normal()).exp();
                    x.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
            }
            x
        })
        .collect()
}

/// One plan per prompt under the same policy and budget.
pub fn retention_plans(
    stack: &AttentionStack,
    prompts: &[Matrix],
    cfg: &PolicyConfig,
    budget: usize,
) -> Result<Vec<SelectionPlan>> {
    prompts
        .iter()
        .map(|x| compress(stack, &stack.prefill(x)?, cfg, budget))
        .collect()
}

/// Per-head mean and range of retained counts across inputs.
pub fn retention_report(plans: &[SelectionPlan]) -> Result<RetentionSummary> {
    if plans.len() < 2 {
        return Err(Error::param(format!(
            "retention report needs at least 2 input plans, got {}",
            plans.len()
        )));
    }
    let stats: Vec<_> = plans.iter().map(retention_stats).collect();
    aggregate_retention(&stats)
}

/// Writes `input,layer,head,count`.
pub fn write_retention_csv<W: Write>(out: W, plans: &[SelectionPlan]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["input", "layer", "head", "count"])?;
    for (i, plan) in plans.iter().enumerate() {
        for (l, layer) in plan.retained().iter().enumerate() {
            for (h, kept) in layer.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string(), h.to_string(), kept.len().to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `layer,head,mean,min,max,range,variance`.
pub fn write_retention_summary_csv<W: Write>(out: W, summary: &RetentionSummary) -> Result<()> {
    use crate::report::fmt_f64;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "mean", "min", "max", "range", "variance"])?;
    for h in &summary.heads {
        w.write_record([
            h.layer.to_string(),
            h.head.to_string(),
            fmt_f64(h.mean),
            h.min.to_string(),
            h.max.to_string(),
            h.range().to_string(),
            fmt_f64(h.variance),
        ])?;
    }
    w.flush()?;
    Ok(())
}
