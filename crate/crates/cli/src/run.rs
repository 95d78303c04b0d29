//! Experiment drivers. Each returns its rendered files, a JSON summary for
//! the manifest and human-readable lines for stdout.

use kvevict::checks::run_selftest;
use kvevict::eval::ablation::{ablation_trial, AblationSummary, AblationVariant};
use kvevict::eval::crs::{run_crs_trials, write_crs_csv};
use kvevict::eval::fidelity::{write_fidelity_csv, FidelityReport, FidelityTrial, OutputSite};
use kvevict::eval::needle::{plant_needle, NeedleSpec};
use kvevict::eval::retention::{
    retention_plans, retention_report, synthetic_prompts, write_retention_csv, write_retention_summary_csv,
};
use kvevict::report::fmt_f64;
use kvevict::scoring::{Policy, PolicyConfig};
use kvevict::selection::budget_contract;
use kvevict::{AttentionStack, SeededRng, SelectionPlan};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Experiment, ExperimentConfig, Site};
use crate::error::CliError;
use crate::output::Outputs;

pub struct Report {
    pub outputs: Outputs,
    pub summary: serde_json::Value,
    pub lines: Vec<String>,
    /// Set when the experiment itself detected a failed check.
    pub failure: Option<String>,
}

impl Report {
    fn new(outputs: Outputs, summary: serde_json::Value, lines: Vec<String>) -> Self {
        Report {
            outputs,
            summary,
            lines,
            failure: None,
        }
    }
}

pub fn run(experiment: Experiment, cfg: &ExperimentConfig) -> Result<Report, CliError> {
    match experiment {
        Experiment::Fidelity => fidelity(cfg),
        Experiment::Crs => crs(cfg),
        Experiment::Needle => needle(cfg),
        Experiment::Retention => retention(cfg),
        Experiment::Ablation => ablation(cfg),
        Experiment::Selftest => selftest(cfg),
    }
}

/// Policy name, suffixed with the allocation when it overrides the default.
pub fn policy_label(p: &PolicyConfig) -> String {
    match p.allocation {
        Some(a) if a != p.policy.default_allocation() => format!("{}+{}", p.policy, a.name()),
        _ => p.policy.to_string(),
    }
}

fn check_plan(plan: &SelectionPlan, cfg: &ExperimentConfig, budget: usize, label: &str) -> Result<(), CliError> {
    let m = &cfg.model;
    let contract = budget_contract(m.layers, m.heads, m.seq_len, budget);
    if plan.total_retained() != contract {
        return Err(CliError::Invariant(format!(
            "{label} at budget {budget} retained {} entries, contract is {contract}",
            plan.total_retained()
        )));
    }
    Ok(())
}

fn check_fidelity(r: &FidelityReport, seq_len: usize) -> Result<(), CliError> {
    for l in &r.layers {
        if !(-1.0..=1.0).contains(&l.cosine) || !l.frob_err.is_finite() {
            return Err(CliError::Invariant(format!(
                "{} layer {}: cosine {} out of range",
                r.label, l.layer, l.cosine
            )));
        }
        if r.budget >= seq_len && (l.cosine - 1.0).abs() > 1e-9 {
            return Err(CliError::Invariant(format!(
                "{} layer {}: full budget gave cosine {}",
                r.label, l.layer, l.cosine
            )));
        }
    }
    Ok(())
}

fn site(cfg: &ExperimentConfig) -> OutputSite {
    match cfg.site {
        Site::Attention => OutputSite::Attention,
        Site::Residual => OutputSite::Residual,
    }
}

fn fidelity(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let shape = cfg.model.shape()?;
    let seq_len = cfg.model.seq_len;
    let per_seed = cfg
        .seeds()
        .par_iter()
        .map(|&seed| -> Result<Vec<(u64, FidelityReport)>, CliError> {
            let trial = FidelityTrial::generate(shape, seq_len, seed)?;
            let prefilled = trial.prefill()?;
            let mut out = Vec::new();
            for p in &cfg.policies {
                let label = policy_label(p);
                for &b in &cfg.budgets {
                    let plan = prefilled.plan(p, b)?;
                    check_plan(&plan, cfg, b, &label)?;
                    let r = prefilled.compare(&plan, &label, b, site(cfg))?;
                    check_fidelity(&r, seq_len)?;
                    out.push((seed, r));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<(u64, FidelityReport)> = per_seed.into_iter().flatten().collect();

    let mut summary = Vec::new();
    let mut lines = Vec::new();
    for p in &cfg.policies {
        let label = policy_label(p);
        for &b in &cfg.budgets {
            let sel: Vec<&FidelityReport> = rows
                .iter()
                .map(|r| &r.1)
                .filter(|r| r.label == label && r.budget == b)
                .collect();
            let mean = sel.iter().map(|r| r.mean_cosine()).sum::<f64>() / sel.len() as f64;
            lines.push(format!("{label:<24} budget {b:>5}  mean cosine {mean:.6}"));
            summary.push(json!({"policy": label, "budget": b, "mean_cosine": fmt_f64(mean)}));
        }
    }
    let mut outputs = Outputs::default();
    outputs.render("fidelity.csv", |w| write_fidelity_csv(w, &rows))?;
    Ok(Report::new(outputs, json!({ "groups": summary }), lines))
}

fn crs(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let trials = run_crs_trials(cfg.seed, cfg.crs.trials, cfg.crs.spread)?;
    let n = trials.len();
    let med = trials.iter().filter(|t| t.norm_product <= t.exhaustive_median).count();
    let uni = trials.iter().filter(|t| t.norm_product <= t.uniform_random).count();
    let best = trials.iter().filter(|t| t.norm_product <= t.exhaustive_best).count();
    let mut outputs = Outputs::default();
    outputs.render("crs.csv", |w| write_crs_csv(w, &trials))?;
    Ok(Report::new(
        outputs,
        json!({"trials": n, "at_most_median": med, "at_most_random": uni, "optimal": best}),
        vec![
            format!("norm-product top-k <= exhaustive median: {med}/{n}"),
            format!("norm-product top-k <= uniform random:    {uni}/{n}"),
            format!("norm-product top-k is optimal:           {best}/{n}"),
        ],
    ))
}

fn needle(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let n = &cfg.needle;
    let spec = NeedleSpec {
        seq_len: n.seq_len,
        window: n.window,
        budget: n.budget,
        needle_pos: n.needle_pos,
        kernel: n.kernel,
        degenerate: n.degenerate,
    };
    let inst = plant_needle(spec, &mut SeededRng::new(cfg.seed))?;
    let outcome = inst.evaluate()?;
    let mut outputs = Outputs::default();
    outputs.render("needle.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["policy", "retains_needle", "eviction_error"])?;
        c.write_record([
            "laprox",
            &outcome.laprox_retains.to_string(),
            &fmt_f64(outcome.laprox_error),
        ])?;
        c.write_record([
            "snapkv",
            &outcome.snapkv_retains.to_string(),
            &fmt_f64(outcome.snapkv_error),
        ])?;
        c.flush()?;
        Ok(())
    })?;
    for policy in [Policy::Laprox, Policy::Snapkv] {
        let plan = inst.plan(policy)?;
        outputs.render(format!("plan_{policy}.csv"), |w| plan.write_csv(w))?;
    }
    let p = inst.params;
    Ok(Report::new(
        outputs,
        json!({
            "suppression": fmt_f64(p.suppression),
            "value_gain": fmt_f64(p.value_gain),
            "attempts": p.attempts,
            "laprox_retains": outcome.laprox_retains,
            "snapkv_retains": outcome.snapkv_retains,
        }),
        vec![
            format!(
                "needle at {} (suppression {}, value gain {})",
                n.needle_pos, p.suppression, p.value_gain
            ),
            format!(
                "laprox retains: {:<5}  error {:.6e}",
                outcome.laprox_retains, outcome.laprox_error
            ),
            format!(
                "snapkv retains: {:<5}  error {:.6e}",
                outcome.snapkv_retains, outcome.snapkv_error
            ),
        ],
    ))
}

fn retention(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let shape = cfg.model.shape()?;
    let mut rng = SeededRng::new(cfg.seed);
    let stack = AttentionStack::build(shape, &mut rng)?;
    let prompts = synthetic_prompts(
        &mut rng,
        cfg.retention.inputs,
        cfg.model.seq_len,
        shape.model_dim(),
        cfg.retention.spread,
    );
    let mut outputs = Outputs::default();
    let mut summary = Vec::new();
    let mut lines = Vec::new();
    for p in &cfg.policies {
        let label = policy_label(p);
        for &b in &cfg.budgets {
            let plans = retention_plans(&stack, &prompts, p, b)?;
            for plan in &plans {
                check_plan(plan, cfg, b, &label)?;
            }
            let s = retention_report(&plans)?;
            outputs.render(format!("retention_{label}_b{b}.csv"), |w| {
                write_retention_csv(w, &plans)
            })?;
            outputs.render(format!("retention_summary_{label}_b{b}.csv"), |w| {
                write_retention_summary_csv(w, &s)
            })?;
            lines.push(format!(
                "{label:<24} budget {b:>5}  cross-head variance {:.3}  max per-head range {}",
                s.mean_head_variance, s.max_range
            ));
            summary.push(json!({
                "policy": label,
                "budget": b,
                "mean_head_variance": fmt_f64(s.mean_head_variance),
                "max_range": s.max_range,
            }));
        }
    }
    Ok(Report::new(outputs, json!({ "groups": summary }), lines))
}

fn ablation(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let shape = cfg.model.shape()?;
    let mut outputs = Outputs::default();
    let mut all = Vec::new();
    let mut summary = Vec::new();
    let mut lines = Vec::new();
    for &b in &cfg.budgets {
        let rows: Vec<_> = cfg
            .seeds()
            .par_iter()
            .map(|&seed| ablation_trial(shape, cfg.model.seq_len, b, cfg.ablation.window, seed))
            .collect::<kvevict::Result<Vec<_>>>()?
            .concat();
        for r in &rows {
            check_fidelity(&r.report, cfg.model.seq_len)?;
        }
        let s = AblationSummary::from_rows(&rows);
        outputs.render(format!("ablation_summary_b{b}.csv"), |w| s.write_csv(w))?;
        for v in AblationVariant::ALL {
            lines.push(format!(
                "budget {b:>5}  {:<4} mean cosine {:.6}",
                v.label(),
                s.cosine(v)
            ));
        }
        lines.push(format!(
            "budget {b:>5}  L_G-L_L {:+.6}  A_G-A_L {:+.6}",
            s.laprox_gain(),
            s.attention_gain()
        ));
        summary.push(json!({
            "budget": b,
            "laprox_gain": fmt_f64(s.laprox_gain()),
            "attention_gain": fmt_f64(s.attention_gain()),
        }));
        all.extend(rows.into_iter().map(|r| (r.seed, r.report)));
    }
    outputs.render("ablation.csv", |w| write_fidelity_csv(w, &all))?;
    Ok(Report::new(outputs, json!({ "budgets": summary }), lines))
}

fn selftest(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let results = run_selftest(cfg.seed);
    let lines: Vec<String> = results.iter().map(ToString::to_string).collect();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.to_string())
        .collect();
    let mut outputs = Outputs::default();
    outputs.render("selftest.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["check", "name", "passed", "detail"])?;
        for r in &results {
            c.write_record([
                r.id.to_string(),
                r.name.to_string(),
                r.passed.to_string(),
                r.detail.clone(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let mut report = Report::new(outputs, json!({"checks": results.len(), "failed": failed}), lines);
    if !failed.is_empty() {
        report.failure = Some(format!("failed checks: {}", failed.join(", ")));
    }
    Ok(report)
}
