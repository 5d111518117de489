use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use qac_core::archive::load_model;
use qac_core::complete::{build_mpc_index, BeamConfig, DEFAULT_MIN_COUNT};
use qac_core::corpus::{load_splits, most_frequent_queries};
use qac_core::eval::{
    evaluate_model, evaluate_mpc, improvement_curve, likelihood_ratio_case_study, mrr_by_length,
    CaseStudyReport, EvalConfig, EvalContext, EvalResult, ImprovementCurve, LengthTable,
    TraceEvent, DEFAULT_CASE_STUDY_POOL, DEFAULT_CURVE_WINDOW,
};
use qac_core::model::Variant;
use qac_core::train::{tune_online_lr, AdadeltaConfig, TuneResult};

/// Candidate online learning rates tried when none is given.
const ONLINE_LR_CANDIDATES: [f64; 8] = [0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0];
/// Online rate used when there is no validation split to tune on.
const FALLBACK_ONLINE_LR: f64 = 1.0;

pub struct EvalRequest {
    pub model: Option<PathBuf>,
    pub data: PathBuf,
    pub variant: String,
    pub online_lr: Option<f64>,
    pub baseline: Option<PathBuf>,
    pub probes: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub beam: BeamConfig,
}

#[derive(Debug, Serialize)]
pub struct TraceSummary {
    pub events: usize,
    pub users: usize,
    pub mean_prefix_len: f64,
    pub mean_query_len: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub variant: String,
    pub seed: u64,
    pub online_lr: Option<f64>,
    pub tuning: Option<TuneResult>,
    pub result: EvalResult,
    pub baseline: Option<EvalResult>,
    pub curve: Option<ImprovementCurve>,
    pub lengths: LengthTable,
    pub trace_summary: TraceSummary,
    pub case_study: Option<CaseStudyReport>,
}

fn summarize(trace: &[TraceEvent]) -> TraceSummary {
    let n = trace.len().max(1) as f64;
    TraceSummary {
        events: trace.len(),
        users: trace
            .iter()
            .map(|e| e.user.as_str())
            .collect::<HashSet<_>>()
            .len(),
        mean_prefix_len: trace.iter().map(|e| e.prefix_len as f64).sum::<f64>() / n,
        mean_query_len: trace.iter().map(|e| e.query_len as f64).sum::<f64>() / n,
    }
}

pub fn run_eval(req: &EvalRequest) -> Result<Report> {
    let split = load_splits(&req.data)?;
    if split.test.is_empty() {
        bail!("test split in {} is empty", req.data.display());
    }
    let ctx = EvalContext::new(&split.train);

    if req.variant == "mpc" {
        let index = build_mpc_index(&split.train, DEFAULT_MIN_COUNT);
        let (result, trace) = evaluate_mpc(&ctx, &index, &split.test, req.seed)?;
        return Ok(Report {
            variant: req.variant.clone(),
            seed: req.seed,
            online_lr: None,
            tuning: None,
            result,
            baseline: None,
            curve: None,
            lengths: mrr_by_length(&trace)?,
            trace_summary: summarize(&trace),
            case_study: None,
        });
    }

    let variant: Variant = req.variant.parse().map_err(anyhow::Error::msg)?;
    let path = req
        .model
        .as_ref()
        .context("--model is required for model variants")?;
    let model = load_model(path)?;
    if model.params.config.variant != variant {
        bail!(
            "{} holds a {} model, not {}",
            path.display(),
            model.params.config.variant.name(),
            variant.name()
        );
    }

    let (online_lr, tuning) = match req.online_lr {
        Some(lr) => (lr, None),
        None if split.valid.is_empty() => (FALLBACK_ONLINE_LR, None),
        None => {
            let tuned = tune_online_lr(
                &model.params,
                &model.users,
                &model.vocab,
                &ONLINE_LR_CANDIDATES,
                &split.valid,
                AdadeltaConfig::default(),
            )?;
            (tuned.best_lr, Some(tuned))
        }
    };
    let cfg = EvalConfig {
        beam: req.beam.clone(),
        online: AdadeltaConfig {
            lr: online_lr,
            ..Default::default()
        },
        seed: req.seed,
        threads: req.threads,
    };
    let (result, trace) = evaluate_model(
        &ctx,
        &model.params,
        &model.users,
        &model.vocab,
        &split.test,
        &cfg,
    )?;

    let frozen = EvalConfig {
        online: AdadeltaConfig {
            lr: 0.0,
            ..Default::default()
        },
        ..cfg.clone()
    };
    let (baseline, base_trace) = match &req.baseline {
        Some(path) => {
            let base = load_model(path)?;
            evaluate_model(
                &ctx,
                &base.params,
                &base.users,
                &base.vocab,
                &split.test,
                &frozen,
            )?
        }
        None => evaluate_model(
            &ctx,
            &model.params,
            &model.users,
            &model.vocab,
            &split.test,
            &frozen,
        )?,
    };
    let curve = improvement_curve(&trace, &base_trace, DEFAULT_CURVE_WINDOW)?;

    let case_study = if req.probes.is_empty() {
        None
    } else {
        let pool = most_frequent_queries(&split.train, DEFAULT_CASE_STUDY_POOL);
        let probes: Vec<&str> = req.probes.iter().map(String::as_str).collect();
        Some(likelihood_ratio_case_study(
            &model.params,
            &model.users,
            &model.vocab,
            &probes,
            &pool,
            cfg.online,
        )?)
    };

    Ok(Report {
        variant: variant.name().to_string(),
        seed: req.seed,
        online_lr: Some(online_lr),
        tuning,
        result,
        baseline: Some(baseline),
        curve: Some(curve),
        lengths: mrr_by_length(&trace)?,
        trace_summary: summarize(&trace),
        case_study,
    })
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}.{suffix}.csv"))
}

/// Writes the JSON report and CSV point lists next to it.
pub fn write(report: &Report, out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(out, json).with_context(|| format!("writing {}", out.display()))?;

    if let Some(curve) = &report.curve {
        let mut w = csv::Writer::from_path(sibling(out, "curve"))?;
        w.write_record(["queries_seen", "relative_improvement"])?;
        for (x, y) in &curve.points {
            w.write_record([x.to_string(), y.to_string()])?;
        }
        w.flush()?;
    }
    for (suffix, buckets) in [
        ("prefix_length", &report.lengths.by_prefix_length),
        ("query_length", &report.lengths.by_query_length),
    ] {
        let mut w = csv::Writer::from_path(sibling(out, suffix))?;
        w.write_record(["length", "mrr", "count"])?;
        for b in buckets {
            w.write_record([b.length.to_string(), b.mrr.to_string(), b.count.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}
