//! Subcommand definitions and their implementations.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sqdm_core::data::{load_samples, save_tensor};
use sqdm_core::denoiser::DenoiserParams;
use sqdm_core::metrics::{precision_recall_knn, random_directions, sliced_wasserstein2_with};
use sqdm_core::squeeze::SqueezeSpec;
use sqdm_core::verify::{run_checks, Fault, VerifyOptions};
use sqdm_core::{rng, PrincipalDirection};

use crate::config::{resolve, Overrides, ResolvedConfig};
use crate::manifest::{fmt_f64, write_file, DirectionRecord, RunManifest};
use crate::pipeline::{self, Prepared, Scores, CHECKPOINT_FILE, TRAIN_MANIFEST_FILE};
use crate::{CliError, EXIT_FAILURE, EXIT_OK};

#[derive(Debug, Parser)]
#[command(name = "sqdm", version, about = "Squeezed diffusion models: checks, training, sampling and sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat JSON file of config keys; flags take precedence over it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub flags: Overrides,
}

impl Common {
    fn resolve(&self) -> Result<ResolvedConfig, CliError> {
        resolve(self.config.as_deref(), &self.flags)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    FlipApplySign,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the built-in property checks and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Estimate the principal colour/feature direction of a dataset.
    Pca {
        #[command(flatten)]
        common: Common,
    },
    /// Train a denoiser and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint (its sibling manifest supplies the base config).
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Also dump the chain state every K steps.
        #[arg(long, value_name = "K")]
        dump_every: Option<usize>,
    },
    /// Train, sample and score one model per (s0, seed) grid cell.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Per-timestep deviation of the whitened-forward drift from the identity.
    DriftReport {
        #[command(flatten)]
        common: Common,
    },
    /// Sliced W2 and k-NN precision/recall between two sample files.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        real: PathBuf,
        #[arg(long, value_name = "PATH")]
        generated: PathBuf,
    },
}

pub fn run(command: Command) -> Result<i32, CliError> {
    match command {
        Command::Verify { common, inject_fault } => cmd_verify(&common.resolve()?, inject_fault),
        Command::Pca { common } => cmd_pca(&common.resolve()?),
        Command::Train { common, resume } => cmd_train(&common, resume.as_deref()),
        Command::Sample { common, checkpoint, dump_every } => cmd_sample(&common, &checkpoint, dump_every),
        Command::Sweep { common } => cmd_sweep(&common.resolve()?),
        Command::DriftReport { common } => cmd_drift_report(&common.resolve()?),
        Command::Metrics { common, real, generated } => cmd_metrics(&common.resolve()?, &real, &generated),
    }
}

fn cmd_verify(cfg: &ResolvedConfig, fault: Option<FaultArg>) -> Result<i32, CliError> {
    let opts = VerifyOptions {
        filter: cfg.filter.clone(),
        fault: fault.map(|f| match f {
            FaultArg::FlipApplySign => Fault::FlipApplySign,
        }),
    };
    let outcomes = run_checks(&opts);
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!("no check matches filter {:?}", cfg.filter.as_deref().unwrap_or(""))));
    }
    println!("{:<36} {:<6} {:>24} {:>24}", "check", "result", "observed", "threshold");
    let mut failed = 0;
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        if !o.passed {
            failed += 1;
        }
        let name = format!("{}/{}", o.group, o.name);
        println!("{name:<36} {status:<6} {:>24} {:>24}", fmt_f64(o.observed), fmt_f64(o.threshold));
    }
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_pca(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let path = cfg.dataset.as_deref().ok_or_else(|| CliError::Usage("pca needs --dataset".into()))?;
    let data = load_samples(path)?;
    let n = cfg.feature_dim_for(data.cols());
    let (_, record) = pipeline::estimate_direction(&data, n)?;
    println!("n {}", record.n);
    println!("direction {}", record.components.join(" "));
    println!("explained_variance_ratio {}", record.explained_variance_ratio);
    println!("mean {}", record.mean.join(" "));
    let mut m = RunManifest::new("pca", format!("pca-seed{}", cfg.seed), cfg);
    m.direction = Some(record);
    m.metric("rows", (data.rows() * data.cols() / n) as f64);
    m.artifact("dataset", path);
    m.save(&cfg.out.join("pca.manifest.json"))?;
    Ok(EXIT_OK)
}

/// Config for a command that continues from a checkpoint: the manifest next
/// to the checkpoint replaces the built-in defaults, then file and flags apply.
fn resolve_from_checkpoint(common: &Common, checkpoint: &Path) -> Result<(ResolvedConfig, RunManifest), CliError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let base = RunManifest::load(&dir.join(TRAIN_MANIFEST_FILE))?;
    let mut cfg = ResolvedConfig::default();
    base.config_overrides().apply(&mut cfg)?;
    if let Some(path) = &common.config {
        Overrides::from_file(path)?.apply(&mut cfg)?;
    }
    common.flags.apply(&mut cfg)?;
    cfg.validate()?;
    Ok((cfg, base))
}

fn train_run_id(cfg: &ResolvedConfig) -> String {
    format!("{}-s0_{}-seed{}", cfg.variant, cfg.s0, cfg.seed)
}

fn cmd_train(common: &Common, resume: Option<&Path>) -> Result<i32, CliError> {
    let (cfg, start) = match resume {
        Some(ckpt) => {
            let (cfg, _) = resolve_from_checkpoint(common, ckpt)?;
            (cfg, Some(DenoiserParams::load(ckpt)?))
        }
        None => (common.resolve()?, None),
    };
    let prep = pipeline::prepare(&cfg)?;
    let from_step = start.as_ref().map_or(0, |p| p.step());
    let outcome = pipeline::train_model(&cfg, &prep, start)?.map_err(CliError::Core)?;
    let mut m = train_manifest("train", train_run_id(&cfg), &cfg, &prep);
    if let Some(ckpt) = resume {
        m.artifact("resumed_from", ckpt);
    }
    m.metric("resumed_at_step", from_step as f64);
    if let Some(&(_, loss)) = outcome.trace.last() {
        m.metric("final_loss", loss);
    }
    write_training_artifacts(&cfg.out, &mut m, &outcome.params, &outcome.trace)?;
    m.save(&cfg.out.join(TRAIN_MANIFEST_FILE))?;
    println!("trained {} steps, checkpoint {}", outcome.params.step(), cfg.out.join(CHECKPOINT_FILE).display());
    Ok(EXIT_OK)
}

fn train_manifest(command: &str, run_id: String, cfg: &ResolvedConfig, prep: &Prepared) -> RunManifest {
    let mut m = RunManifest::new(command, run_id, cfg);
    m.direction = Some(prep.record.clone());
    m.metric_text("dataset", prep.dataset_label.clone());
    m
}

fn write_training_artifacts(
    dir: &Path,
    m: &mut RunManifest,
    params: &DenoiserParams,
    trace: &[(u64, f64)],
) -> Result<(), CliError> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    write_file(&ckpt, &params.to_bytes())?;
    let loss = dir.join("loss.csv");
    pipeline::write_loss_csv(&loss, trace)?;
    m.artifact("checkpoint", &ckpt);
    m.artifact("loss", &loss);
    Ok(())
}

fn cmd_sample(common: &Common, checkpoint: &Path, dump_every: Option<usize>) -> Result<i32, CliError> {
    let (cfg, base) = resolve_from_checkpoint(common, checkpoint)?;
    let params = DenoiserParams::load(checkpoint)?;
    let record = base
        .direction
        .clone()
        .ok_or_else(|| CliError::Parse("checkpoint manifest has no direction record".into()))?;
    let diffusion = pipeline::diffusion_config(&cfg, record.to_direction()?, params.config().input_dim)?;

    let chain_dir = cfg.out.join("chain");
    let dump_error = RefCell::new(None);
    let samples = pipeline::sample_with(&cfg, &diffusion, &params, |t, states| {
        if let Some(k) = dump_every.filter(|&k| k > 0) {
            if t % k == 0 && dump_error.borrow().is_none() {
                if let Err(e) = save_chain(&chain_dir, t, states) {
                    *dump_error.borrow_mut() = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = dump_error.into_inner() {
        return Err(e);
    }
    let out = cfg.out.join("samples.sqt");
    save_samples(&out, &samples)?;
    let mut m = RunManifest::new("sample", train_run_id(&cfg), &cfg);
    m.direction = Some(record);
    m.artifact("checkpoint", checkpoint);
    m.artifact("samples", &out);
    m.metric_text("weights", if cfg.ema { "ema" } else { "live" });
    if dump_every.is_some() {
        m.artifact("chain", &chain_dir);
    }
    m.save(&cfg.out.join("sample.manifest.json"))?;
    println!("wrote {} samples to {}", samples.rows(), out.display());
    Ok(EXIT_OK)
}

fn save_samples(path: &Path, samples: &sqdm_core::Matrix) -> Result<(), CliError> {
    write_file(path, &sqdm_core::data::encode_tensor(samples))
}

fn save_chain(dir: &Path, t: usize, states: &sqdm_core::Matrix) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(save_tensor(&dir.join(format!("step_{t:04}.sqt")), states)?)
}

/// One sweep row. `scores` is `None` when training diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub run_id: String,
    pub s0: f64,
    pub seed: u64,
    pub scores: Option<Scores>,
    pub status: String,
}

pub const SWEEP_CSV_HEADER: &str = "run_id,s0,variant,seed,sw2,precision,recall,f_score,status";

fn csv_row(r: &CellResult, variant: &str) -> String {
    let (sw2, p, rc, f) = match r.scores {
        Some(s) => (s.sw2, s.pr.precision, s.pr.recall, s.pr.f_score),
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    format!(
        "{},{},{variant},{},{},{},{},{},{}",
        r.run_id,
        fmt_f64(r.s0),
        r.seed,
        fmt_f64(sw2),
        fmt_f64(p),
        fmt_f64(rc),
        fmt_f64(f),
        r.status
    )
}

/// Trains, samples and scores one (s0, seed) cell, writing its checkpoint,
/// loss trace, samples and manifest under `dir`.
pub fn run_cell(base: &ResolvedConfig, s0: f64, seed: u64, dir: &Path) -> Result<CellResult, CliError> {
    let mut cfg = base.clone();
    cfg.s0 = s0;
    cfg.seed = seed;
    cfg.out = dir.to_path_buf();
    let run_id = train_run_id(&cfg);
    let prep = pipeline::prepare(&cfg)?;
    let mut m = train_manifest("sweep-cell", run_id.clone(), &cfg, &prep);
    let result = match pipeline::train_model(&cfg, &prep, None)? {
        Ok(outcome) => {
            write_training_artifacts(dir, &mut m, &outcome.params, &outcome.trace)?;
            let samples = pipeline::sample_with(&cfg, &prep.diffusion, &outcome.params, |_, _| {})?;
            let path = dir.join("samples.sqt");
            save_samples(&path, &samples)?;
            m.artifact("samples", &path);
            let reference = pipeline::reference_set(&cfg, &prep.data)?;
            let scores = pipeline::score(&cfg, &reference, &samples)?;
            record_scores(&mut m, &scores);
            CellResult { run_id, s0, seed, scores: Some(scores), status: "ok".into() }
        }
        Err(sqdm_core::Error::Diverged { step, loss, trace }) => {
            pipeline::write_loss_csv(&dir.join("loss.csv"), &trace)?;
            m.artifact("loss", &dir.join("loss.csv"));
            m.metric("diverged_at_step", step as f64);
            m.metric("diverged_loss", loss);
            CellResult { run_id, s0, seed, scores: None, status: format!("diverged@{step}") }
        }
        Err(e) => return Err(e.into()),
    };
    m.metric_text("status", result.status.clone());
    m.save(&dir.join(TRAIN_MANIFEST_FILE))?;
    Ok(result)
}

/// Scores the freshly initialized, untrained network (s0 = 0) for `seed`.
pub fn run_untrained(base: &ResolvedConfig, seed: u64) -> Result<CellResult, CliError> {
    let mut cfg = base.clone();
    cfg.s0 = 0.0;
    cfg.seed = seed;
    let prep = pipeline::prepare(&cfg)?;
    let params = DenoiserParams::init(cfg.denoiser_config(prep.data.cols())?, seed)?;
    let samples = pipeline::sample_with(&cfg, &prep.diffusion, &params, |_, _| {})?;
    let reference = pipeline::reference_set(&cfg, &prep.data)?;
    let scores = pipeline::score(&cfg, &reference, &samples)?;
    Ok(CellResult { run_id: format!("untrained-seed{seed}"), s0: 0.0, seed, scores: Some(scores), status: "ok".into() })
}

fn record_scores(m: &mut RunManifest, s: &Scores) {
    m.metric("sw2", s.sw2);
    m.metric("precision", s.pr.precision);
    m.metric("recall", s.pr.recall);
    m.metric("f_score", s.pr.f_score);
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub untrained: Vec<CellResult>,
}

impl SweepReport {
    /// Mean sliced W2 over the seeds of grid value `s0` that did not diverge.
    pub fn mean_sw2(&self, s0: f64) -> Option<f64> {
        mean(self.cells.iter().filter(|c| c.s0 == s0).filter_map(|c| c.scores.map(|s| s.sw2)))
    }

    pub fn mean_untrained_sw2(&self) -> Option<f64> {
        mean(self.untrained.iter().filter_map(|c| c.scores.map(|s| s.sw2)))
    }

    pub fn diverged(&self) -> usize {
        self.cells.iter().filter(|c| c.scores.is_none()).count()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every (s0, seed) cell plus one untrained baseline per seed, in
/// parallel, and writes `sweep.csv`, `untrained.csv` and the manifests.
pub fn run_sweep(cfg: &ResolvedConfig) -> Result<SweepReport, CliError> {
    if cfg.grid.is_empty() || cfg.seeds.is_empty() {
        return Err(CliError::Usage("sweep needs a non-empty grid and seed list".into()));
    }
    let jobs: Vec<(f64, u64)> = cfg.grid.iter().flat_map(|&s0| cfg.seeds.iter().map(move |&seed| (s0, seed))).collect();
    let cells_dir = cfg.out.join("cells");
    let cells = jobs
        .par_iter()
        .map(|&(s0, seed)| {
            let mut probe = cfg.clone();
            probe.s0 = s0;
            probe.seed = seed;
            run_cell(cfg, s0, seed, &cells_dir.join(train_run_id(&probe)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let untrained = cfg.seeds.par_iter().map(|&seed| run_untrained(cfg, seed)).collect::<Result<Vec<_>, _>>()?;

    // Rows are written by this thread alone, in grid order.
    let write_csv = |name: &str, rows: &[CellResult]| -> Result<PathBuf, CliError> {
        let mut text = format!("{SWEEP_CSV_HEADER}\n");
        for r in rows {
            text.push_str(&csv_row(r, &cfg.variant));
            text.push('\n');
        }
        let path = cfg.out.join(name);
        write_file(&path, text.as_bytes())?;
        Ok(path)
    };
    let sweep_csv = write_csv("sweep.csv", &cells)?;
    let untrained_csv = write_csv("untrained.csv", &untrained)?;

    let report = SweepReport { cells, untrained };
    let mut m = RunManifest::new("sweep", format!("sweep-{}-seed{}", cfg.variant, cfg.seed), cfg);
    m.artifact("sweep_csv", &sweep_csv);
    m.artifact("untrained_csv", &untrained_csv);
    m.artifact("cells", &cells_dir);
    for &s0 in &cfg.grid {
        if let Some(v) = report.mean_sw2(s0) {
            m.metric(&format!("mean_sw2[s0={s0}]"), v);
        }
    }
    if let Some(v) = report.mean_untrained_sw2() {
        m.metric("mean_sw2[untrained]", v);
    }
    m.metric("diverged_cells", report.diverged() as f64);
    m.save(&cfg.out.join("sweep.manifest.json"))?;
    Ok(report)
}

fn cmd_sweep(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let report = run_sweep(cfg)?;
    println!("{:>8} {:>24}", "s0", "mean sw2");
    for &s0 in &cfg.grid {
        let v = report.mean_sw2(s0).map_or("diverged".into(), fmt_f64);
        println!("{s0:>8} {v:>24}");
    }
    if let Some(v) = report.mean_untrained_sw2() {
        println!("{:>8} {:>24}", "untrained", fmt_f64(v));
    }
    if let Some(best) = cfg
        .grid
        .iter()
        .filter_map(|&s0| report.mean_sw2(s0).map(|v| (s0, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
    {
        println!("lowest mean sw2 at s0 = {}", best.0);
    }
    let diverged = report.diverged();
    if diverged > 0 {
        println!("{diverged} cell(s) diverged");
        return Ok(EXIT_FAILURE);
    }
    Ok(EXIT_OK)
}

/// Per-timestep drift row: (t, Δs, ‖R_t − I‖₂).
pub fn drift_table(spec: &SqueezeSpec, schedule: &sqdm_core::NoiseSchedule) -> Result<Vec<(usize, f64, f64)>, CliError> {
    (2..=schedule.len())
        .map(|t| Ok((t, spec.strength_step(schedule, t)?, spec.drift_deviation(schedule, t)?)))
        .collect()
}

fn cmd_drift_report(cfg: &ResolvedConfig) -> Result<i32, CliError> {
    let schedule = cfg.train_schedule()?;
    let (direction, n) = match &cfg.dataset {
        Some(path) => {
            let data = load_samples(path)?;
            let n = cfg.feature_dim_for(data.cols());
            (pipeline::estimate_direction(&data, n)?.0, n)
        }
        None => {
            let n = cfg.feature_dim.unwrap_or(3);
            (PrincipalDirection::axis(n, 0)?, n)
        }
    };
    let spec = SqueezeSpec::new(cfg.variant()?, cfg.s0, direction.clone(), cfg.time_dependent)?;
    let rows = drift_table(&spec, &schedule)?;
    let mut csv = String::from("t,strength_step,deviation\n");
    println!("{:>6} {:>24} {:>24}", "t", "strength_step", "deviation");
    for (t, ds, dev) in &rows {
        println!("{t:>6} {:>24} {:>24}", fmt_f64(*ds), fmt_f64(*dev));
        csv.push_str(&format!("{t},{},{}\n", fmt_f64(*ds), fmt_f64(*dev)));
    }
    let max = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    let avg = mean(rows.iter().map(|r| r.2)).unwrap_or(0.0);
    println!("max {}", fmt_f64(max));
    println!("mean {}", fmt_f64(avg));
    let path = cfg.out.join("drift.csv");
    write_file(&path, csv.as_bytes())?;
    let mut m = RunManifest::new("drift-report", format!("drift-{}-s0_{}-T{}", cfg.variant, cfg.s0, cfg.timesteps), cfg);
    m.direction = Some(DirectionRecord::from_direction(&direction));
    m.metric("max_deviation", max);
    m.metric("mean_deviation", avg);
    m.metric("n", n as f64);
    m.artifact("drift_csv", &path);
    m.save(&cfg.out.join("drift-report.manifest.json"))?;
    Ok(EXIT_OK)
}

fn cmd_metrics(cfg: &ResolvedConfig, real: &Path, generated: &Path) -> Result<i32, CliError> {
    let a = load_samples(real)?;
    let b = load_samples(generated)?;
    let mut r = rng::stream(cfg.seed, pipeline::METRIC_STREAM);
    let dirs = random_directions(a.cols(), cfg.num_projections, &mut r);
    let sw2 = sliced_wasserstein2_with(&a, &b, &dirs)?;
    let pr = precision_recall_knn(&a, &b, cfg.k)?;
    println!("sw2 {}", fmt_f64(sw2));
    println!("precision {}", fmt_f64(pr.precision));
    println!("recall {}", fmt_f64(pr.recall));
    println!("f_score {}", fmt_f64(pr.f_score));
    let mut m = RunManifest::new("metrics", format!("metrics-seed{}", cfg.seed), cfg);
    record_scores(&mut m, &Scores { sw2, pr });
    m.artifact("real", real);
    m.artifact("generated", generated);
    m.save(&cfg.out.join("metrics.manifest.json"))?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sqdm_core::squeeze::Variant;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["sqdm", "sample", "--checkpoint", "c.bin", "--ema", "false", "--s0", "-0.4"]).unwrap();
        match cli.command {
            Command::Sample { common, checkpoint, .. } => {
                assert_eq!(checkpoint, PathBuf::from("c.bin"));
                assert_eq!(common.flags.ema, Some(false));
                assert_eq!(common.flags.s0, Some(-0.4));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Cli::try_parse_from(["sqdm", "verify", "--bogus"]).is_err());
    }

    #[test]
    fn drift_table_zero_strength_is_zero() {
        let cfg = ResolvedConfig { timesteps: 50, ..Default::default() };
        let spec = SqueezeSpec::new(Variant::Sdm, 0.0, PrincipalDirection::axis(3, 0).unwrap(), true).unwrap();
        let rows = drift_table(&spec, &cfg.train_schedule().unwrap()).unwrap();
        assert_eq!(rows.len(), 49);
        assert!(rows.iter().all(|r| r.2 == 0.0));
    }
}
