//! Score source crossed with allocation: attention-only or norm-product
//! scores, each selected per head or globally over normalized scores.

use std::fmt;

use crate::attention::StackShape;
use crate::error::Result;
use crate::eval::fidelity::{FidelityReport, FidelityTrial, OutputSite};
use crate::scoring::{Policy, PolicyConfig};
use crate::selection::Allocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    /// Mean attention, per-head top-B.
    AttentionLocal,
    /// Mean attention, global top-K over layer-normalized scores.
    AttentionGlobal,
    /// Norm product, per-head top-B.
    LaproxLocal,
    /// Norm product, global top-K over layer-normalized scores.
    LaproxGlobal,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::AttentionLocal,
        AblationVariant::AttentionGlobal,
        AblationVariant::LaproxLocal,
        AblationVariant::LaproxGlobal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::AttentionLocal => "A_L",
            AblationVariant::AttentionGlobal => "A_G",
            AblationVariant::LaproxLocal => "L_L",
            AblationVariant::LaproxGlobal => "L_G",
        }
    }

    pub fn config(self, window: usize) -> PolicyConfig {
        let (policy, allocation) = match self {
            AblationVariant::AttentionLocal => (Policy::Snapkv, Allocation::PerHead),
            AblationVariant::AttentionGlobal => (Policy::Snapkv, Allocation::Global),
            AblationVariant::LaproxLocal => (Policy::Laprox, Allocation::PerHead),
            AblationVariant::LaproxGlobal => (Policy::Laprox, Allocation::Global),
        };
        PolicyConfig::new(policy)
            .with_window(window)
            .with_allocation(allocation)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: AblationVariant,
    pub report: FidelityReport,
}

/// All four variants on one seeded trial.
pub fn ablation_trial(
    shape: StackShape,
    seq_len: usize,
    budget: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let trial = FidelityTrial::generate(shape, seq_len, seed)?;
    let prefilled = trial.prefill()?;
    AblationVariant::ALL
        .iter()
        .map(|&v| {
            let plan = prefilled.plan(&v.config(window), budget)?;
            Ok(AblationRow {
                seed,
                variant: v,
                report: prefilled.compare(&plan, v.label(), budget, OutputSite::Attention)?,
            })
        })
        .collect()
}

pub fn run_ablation(
    shape: StackShape,
    seq_len: usize,
    budget: usize,
    window: usize,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4 * seeds.len());
    for &seed in seeds {
        rows.extend(ablation_trial(shape, seq_len, budget, window, seed)?);
    }
    Ok(rows)
}

/// Mean over rows of the per-trial mean-over-layers cosine, per variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationSummary {
    pub trials: usize,
    /// Indexed like [`AblationVariant::ALL`].
    pub mean_cosine: [f64; 4],
    pub mean_frob_err: [f64; 4],
}

impl AblationSummary {
    pub fn from_rows(rows: &[AblationRow]) -> Self {
        let mut cos = [0.0; 4];
        let mut err = [0.0; 4];
        let mut n = [0usize; 4];
        for r in rows {
            let i = r.variant as usize;
            cos[i] += r.report.mean_cosine();
            err[i] += r.report.mean_frob_err();
            n[i] += 1;
        }
        for i in 0..4 {
            if n[i] > 0 {
                cos[i] /= n[i] as f64;
                err[i] /= n[i] as f64;
            }
        }
        AblationSummary {
            trials: n.into_iter().max().unwrap_or(0),
            mean_cosine: cos,
            mean_frob_err: err,
        }
    }

    pub fn cosine(&self, v: AblationVariant) -> f64 {
        self.mean_cosine[v as usize]
    }

    /// `L_G - L_L`.
    pub fn laprox_gain(&self) -> f64 {
        self.cosine(AblationVariant::LaproxGlobal) - self.cosine(AblationVariant::LaproxLocal)
    }

    /// `A_G - A_L`.
    pub fn attention_gain(&self) -> f64 {
        self.cosine(AblationVariant::AttentionGlobal) - self.cosine(AblationVariant::AttentionLocal)
    }

    /// Writes `variant,trials,mean_cosine,mean_frob_err`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        use crate::report::fmt_f64;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "trials", "mean_cosine", "mean_frob_err"])?;
        for v in AblationVariant::ALL {
            w.write_record([
                v.label().to_string(),
                self.trials.to_string(),
                fmt_f64(self.cosine(v)),
                fmt_f64(self.mean_frob_err[v as usize]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_has_four_rows() {
        let shape = StackShape::new(2, 2, 2, 8).unwrap();
        let rows = run_ablation(shape, 64, 16, 8, &[5]).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.variant.label()).collect();
        assert_eq!(labels, ["A_L", "A_G", "L_L", "L_G"]);
        let s = AblationSummary::from_rows(&rows);
        assert_eq!(s.trials, 1);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn one_layer_one_head_variants_coincide_per_score() {
        let shape = StackShape::new(1, 1, 1, 8).unwrap();
        let rows = run_ablation(shape, 48, 12, 4, &[3]).unwrap();
        assert_eq!(rows[0].report.layers, rows[1].report.layers);
        assert_eq!(rows[2].report.layers, rows[3].report.layers);
    }
}
