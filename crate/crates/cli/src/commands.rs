//! Subcommand implementations. Every command validates its inputs and does
//! all computation before touching any output path.

use anyhow::{bail, Context, Result};
use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use optiguide::datagen::{generate_region, GenerationReport};
use optiguide::dataset::Dataset;
use optiguide::dynamics::{min_terminal_time, min_turn_radius, EngagementState, FullState, ItcgParams};
use optiguide::eds_filter::{select, sweep_thresholds, Prepared, RemovalPath};
use optiguide::gpr::{squared_errors, train, Provenance, TrainedGpModel};
use optiguide::guidance_sim::{
    calibrate_sigma_ref, evaluate_batch, sigma_ref_from_training, BatchResult, BlendConfig, SimConfig, SimResult,
};
use optiguide::plot::trace_svg;

use crate::config::{CaseSpec, DataSource, Loaded, SigmaRefPolicy};

/// Raised when simulated cases do not meet their expected outcome.
#[derive(Debug)]
pub struct AcceptanceFailure(pub String);

impl std::fmt::Display for AcceptanceFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AcceptanceFailure {}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub jobs: usize,
    pub emit_svg: bool,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn provenance(cfg: &Loaded) -> Provenance {
    Provenance { config_hash: cfg.hash.clone(), seed: cfg.config.seed }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn file_entry(path: &Path) -> Result<Value> {
    Ok(json!({
        "file": path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "sha256": sha256_file(path)?,
    }))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if ds.is_empty() {
        bail!(optiguide::Error::EmptyDataset);
    }
    Ok(ds)
}

pub fn generate(cfg: &Loaded) -> Result<()> {
    let out = generate_region(&cfg.config.generation)?;
    let GenerationReport { node_count, converged, sample_count, ref skipped, .. } = out.report;
    info!("generated {sample_count} samples from {converged}/{node_count} nodes ({} skipped)", skipped.len());

    std::fs::create_dir_all(cfg.out_dir())?;
    let path = cfg.out("dataset.csv");
    out.dataset.save(&path)?;
    let sidecar = json!({
        "provenance": provenance(cfg),
        "generation": cfg.config.generation,
        "dataset": file_entry(&path)?,
        "trajectories": out.dataset.trajectory_count(),
        "report": out.report,
    });
    write_json(&cfg.out("generation.json"), &sidecar)
}

pub fn filter(cfg: &Loaded) -> Result<()> {
    let input = cfg.dataset_path();
    let ds = load_dataset(&input)?;
    let section = &cfg.config.filter;
    let prep = Prepared::new(&ds, &section.params)?;
    let path = RemovalPath::compute(&prep, &section.params);
    let outcome = select(&prep, &path, &section.params, section.params.epsilon);
    let (lo, hi) = path.statistic_range();
    let initial = path.initial.statistic(path.z);
    info!(
        "retained {} of {} samples ({:.1}% reduction)",
        outcome.report.final_size,
        outcome.report.initial_size,
        100.0 * outcome.report.reduction()
    );
    let sweep: Vec<_> = sweep_thresholds(&path, section.sweep_points)
        .into_iter()
        .map(|eps| select(&prep, &path, &section.params, eps).report)
        .collect();

    std::fs::create_dir_all(cfg.out_dir())?;
    let out_path = cfg.out("filtered.csv");
    let filtered = ds.subset(&outcome.retained);
    filtered.save(&out_path)?;
    let mut report = json!({
        "provenance": provenance(cfg),
        "input": file_entry(&input)?,
        "output": file_entry(&out_path)?,
        "initial_statistic": initial,
        "statistic_range": [lo, hi],
        "report": outcome.report,
    });
    if !sweep.is_empty() {
        let sweep_path = cfg.out("filter_sweep.csv");
        let mut w = csv_writer(&sweep_path)?;
        w.write_record(["epsilon", "retained", "reduction", "mu_rho", "sigma_rho", "infeasible"])?;
        for r in &sweep {
            w.write_record([
                r.epsilon.to_string(),
                r.final_size.to_string(),
                r.reduction().to_string(),
                r.mu_rho_after.to_string(),
                r.sigma_rho_after.to_string(),
                r.infeasible.to_string(),
            ])?;
        }
        w.flush()?;
        report["sweep"] = file_entry(&sweep_path)?;
    }
    write_json(&cfg.out("filter_report.json"), &report)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

/// Deterministic split of `n` indices into (train, held-out).
fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = ((n as f64) * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut held = vec![false; n];
    if k > 0 && k < n {
        for i in sample(&mut rng, n, k).into_iter() {
            held[i] = true;
        }
    }
    let train = (0..n).filter(|&i| !held[i]).collect();
    let test = (0..n).filter(|&i| held[i]).collect();
    (train, test)
}

pub fn train_model(cfg: &Loaded) -> Result<()> {
    let gp = &cfg.config.gp;
    let source = match gp.source {
        DataSource::Dataset => cfg.dataset_path(),
        DataSource::Filtered => cfg.out("filtered.csv"),
    };
    let ds = load_dataset(&source)?;
    let seed = cfg.config.seed;
    let (train_idx, test_idx) = split(ds.len(), gp.holdout_fraction, seed);
    let train_set = ds.subset(&train_idx);
    let (mut model, trace) = train(&train_set, &gp.train, seed)?;
    model.provenance = Some(provenance(cfg));
    for (k, lml) in trace.accepted_lml.iter().enumerate() {
        info!("accepted step {k}: log marginal likelihood {lml:.6}");
    }
    let eval_idx: Vec<usize> = test_idx.iter().copied().take(gp.holdout_eval_max).collect();
    let holdout = if eval_idx.is_empty() {
        Value::Null
    } else {
        let test = ds.subset(&eval_idx);
        let (mse, max_sq) = squared_errors(&model, &test);
        let mean = train_set.samples.iter().map(|s| s.u).sum::<f64>() / train_set.len() as f64;
        let baseline = test.samples.iter().map(|s| (s.u - mean).powi(2)).sum::<f64>() / test.len() as f64;
        info!("held-out mse {mse:.3e} (constant-mean baseline {baseline:.3e}) on {} samples", test.len());
        json!({ "samples": test.len(), "mse": mse, "max_squared_error": max_sq, "constant_mean_mse": baseline })
    };

    std::fs::create_dir_all(cfg.out_dir())?;
    let model_path = cfg.out("model.json");
    model.save(&model_path)?;
    let log = json!({
        "provenance": provenance(cfg),
        "source": file_entry(&source)?,
        "model": file_entry(&model_path)?,
        "train_pool": train_set.len(),
        "conditioned_on": model.len(),
        "jitter": model.jitter,
        "hyper": model.hyper,
        "accepted_lml": trace.accepted_lml,
        "rejected_steps": trace.rejected,
        "final_grad_norm": trace.final_grad_norm,
        "holdout": holdout,
    });
    write_json(&cfg.out("training_log.json"), &log)
}

fn load_model(cfg: &Loaded) -> Result<TrainedGpModel> {
    let path = cfg.model_path();
    TrainedGpModel::load(&path).with_context(|| format!("loading model {}", path.display()))
}

fn resolve_sigma_ref(cfg: &Loaded, model: &TrainedGpModel) -> Result<f64> {
    let s = match &cfg.config.sim.sigma_ref {
        SigmaRefPolicy::Fixed { value } => *value,
        SigmaRefPolicy::TrainingMedian => sigma_ref_from_training(model),
        SigmaRefPolicy::Probe { quantile, rho, store_stride } => {
            let probe_cfg = optiguide::datagen::GenerationConfig {
                store_stride: *store_stride,
                ..cfg.config.generation.staggered()
            };
            let probe = generate_region(&probe_cfg)?.dataset;
            calibrate_sigma_ref(model, &probe, *quantile, *rho)?
        }
    };
    if !(s > 0.0) {
        bail!(optiguide::Error::InvalidConfig(format!("resolved sigma_ref {s} is not positive")));
    }
    Ok(s)
}

fn sim_config(cfg: &Loaded, case: &CaseSpec, sigma_ref: f64) -> Result<SimConfig> {
    let sim = &cfg.config.sim;
    let t_min = min_terminal_time(EngagementState::new(case.r0, case.sigma0), min_turn_radius(sim.u_m))?;
    Ok(SimConfig {
        initial: FullState::new(case.r0, case.lambda0, case.sigma0),
        t_f: case.t_mult * t_min,
        dt: sim.dt,
        u_m: sim.u_m,
        itcg: ItcgParams { u_m: sim.u_m, ..sim.itcg },
        blend: BlendConfig { mode: case.mode.unwrap_or(sim.mode), sigma_ref },
        r_hit: sim.r_hit,
        timeout: sim.timeout,
    })
}

/// Runs `cases`, writing traces and metrics under `dir`.
fn run_cases(cfg: &Loaded, cases: &[CaseSpec], dir: &Path, opts: RunOptions) -> Result<()> {
    let model = load_model(cfg)?;
    let sigma_ref = resolve_sigma_ref(cfg, &model)?;
    info!("sigma_ref = {sigma_ref:.4e}");
    let configs = cases.iter().map(|c| sim_config(cfg, c, sigma_ref)).collect::<Result<Vec<_>>>()?;
    for c in &configs {
        c.validate()?;
    }
    let (batch, results) = evaluate_batch(&model, &configs, opts.jobs);
    info!(
        "{} of {} cases hit; max miss {:.3e}, max impact-time error {:.3e}",
        batch.summary.hits, batch.summary.cases, batch.summary.max_miss_distance, batch.summary.max_impact_time_error
    );

    let traces_dir = dir.join("traces");
    std::fs::create_dir_all(&traces_dir)?;
    let mut trace_files = Vec::new();
    for (k, res) in results.iter().enumerate() {
        let Ok(res) = res else {
            trace_files.push(Value::Null);
            continue;
        };
        let path = traces_dir.join(format!("case_{k:03}.csv"));
        res.save_trace(&path)?;
        trace_files.push(file_entry(&path)?);
        if opts.emit_svg {
            let svg_dir = dir.join("svg");
            std::fs::create_dir_all(&svg_dir)?;
            let c = &cases[k];
            let title = format!("case {k}: r0={} sigma0={} t_f={}T", c.r0, c.sigma0, c.t_mult);
            std::fs::write(svg_dir.join(format!("case_{k:03}.svg")), trace_svg(res, &title))?;
        }
    }
    let metrics_csv = dir.join("metrics.csv");
    batch.write_csv(std::io::BufWriter::new(std::fs::File::create(&metrics_csv)?))?;
    let failures = check_expectations(cases, &batch, &results);
    let summary = json!({
        "provenance": provenance(cfg),
        "model": file_entry(&cfg.model_path())?,
        "sigma_ref": sigma_ref,
        "cases": cases,
        "summary": batch.summary,
        "rows": batch.rows,
        "metrics_csv": file_entry(&metrics_csv)?,
        "traces": trace_files,
        "unexpected": failures,
    });
    write_json(&dir.join("metrics.json"), &summary)?;
    if !failures.is_empty() {
        return Err(AcceptanceFailure(format!("{} case(s) failed: {}", failures.len(), failures.join("; "))).into());
    }
    Ok(())
}

fn check_expectations(cases: &[CaseSpec], batch: &BatchResult, results: &[optiguide::Result<SimResult>]) -> Vec<String> {
    let mut out = Vec::new();
    for ((k, c), (row, res)) in cases.iter().enumerate().zip(batch.rows.iter().zip(results)) {
        match res {
            Err(e) => out.push(format!("case {k} (r0={}, sigma0={}, t_mult={}): {e}", c.r0, c.sigma0, c.t_mult)),
            Ok(_) if row.hit != c.expect_hit => out.push(format!(
                "case {k} (r0={}, sigma0={}, t_mult={}): expected hit={}, got hit={} (miss {:.3e})",
                c.r0, c.sigma0, c.t_mult, c.expect_hit, row.hit, row.miss_distance
            )),
            Ok(_) => {}
        }
    }
    out
}

pub fn simulate(cfg: &Loaded, opts: RunOptions) -> Result<()> {
    let cases = cfg.config.sim.cases.clone();
    run_cases(cfg, &cases, &cfg.out("simulate"), opts)
}

pub fn sweep(cfg: &Loaded, opts: RunOptions) -> Result<()> {
    let cases = cfg.config.sim.grid.cases();
    run_cases(cfg, &cases, &cfg.out("sweep"), opts)
}

fn read_json(path: &Path) -> Result<Option<Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

/// Collects the artifacts present in the output directory into one summary.
pub fn report(cfg: &Loaded) -> Result<()> {
    let sources: [(&str, PathBuf); 5] = [
        ("generation", cfg.out("generation.json")),
        ("filter", cfg.out("filter_report.json")),
        ("training", cfg.out("training_log.json")),
        ("simulate", cfg.out("simulate/metrics.json")),
        ("sweep", cfg.out("sweep/metrics.json")),
    ];
    let mut found = serde_json::Map::new();
    for (name, path) in &sources {
        if let Some(v) = read_json(path)? {
            found.insert((*name).to_string(), v);
        }
    }
    if found.is_empty() {
        bail!(optiguide::Error::InvalidConfig(format!("no artifacts found in {}", cfg.out_dir().display())));
    }
    let mut md = String::from("# optiguide report\n\n");
    md.push_str(&format!("- config hash: `{}`\n- seed: {}\n\n", cfg.hash, cfg.config.seed));
    let get = |v: &Value, p: &str| v.pointer(p).map(|x| x.to_string()).unwrap_or_else(|| "-".into());
    if let Some(g) = found.get("generation") {
        md.push_str(&format!(
            "## Generation\n\n- nodes: {} converged of {}\n- samples: {}\n- mean Newton iterations: {}\n\n",
            get(g, "/report/converged"),
            get(g, "/report/node_count"),
            get(g, "/report/sample_count"),
            get(g, "/report/newton/mean_iterations"),
        ));
    }
    if let Some(f) = found.get("filter") {
        md.push_str(&format!(
            "## Filter\n\n- epsilon: {}\n- size: {} -> {}\n- infeasible: {}\n- attainable statistic range: {}\n\n",
            get(f, "/report/epsilon"),
            get(f, "/report/initial_size"),
            get(f, "/report/final_size"),
            get(f, "/report/infeasible"),
            get(f, "/statistic_range"),
        ));
    }
    if let Some(t) = found.get("training") {
        md.push_str(&format!(
            "## Training\n\n- conditioned on: {}\n- held-out mse: {}\n- constant-mean mse: {}\n\n",
            get(t, "/conditioned_on"),
            get(t, "/holdout/mse"),
            get(t, "/holdout/constant_mean_mse"),
        ));
    }
    for name in ["simulate", "sweep"] {
        if let Some(s) = found.get(name) {
            md.push_str(&format!(
                "## {name}\n\n- hits: {} of {}\n- max miss distance: {}\n- max impact-time error: {}\n- mean effort: {}\n- sigma_ref: {}\n\n",
                get(s, "/summary/hits"),
                get(s, "/summary/cases"),
                get(s, "/summary/max_miss_distance"),
                get(s, "/summary/max_impact_time_error"),
                get(s, "/summary/mean_effort"),
                get(s, "/sigma_ref"),
            ));
        }
    }
    let report = json!({ "provenance": provenance(cfg), "artifacts": found });
    write_json(&cfg.out("report.json"), &report)?;
    std::fs::write(cfg.out("report.md"), md)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split(100, 0.1, 3);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert!(b.iter().all(|i| !a.contains(i)));
        assert_eq!(split(100, 0.1, 3), (a, b));
        assert_eq!(split(10, 0.0, 3).1.len(), 0);
    }
}
