//! Experiment orchestration: run a configured method across seeds and
//! persist samples, traces, metrics, and plots; aggregate run summaries
//! into comparison tables; train network denoisers; dump exact posteriors;
//! and verify core invariants quickly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{self, BlendedConfig, DpsConfig, RedDiffConfig, RepaintConfig};
use crate::config::{self, hash_hex, LoadedConfig, MethodKind};
use crate::denoiser::mlp::MlpDenoiser;
use crate::denoiser::{CountingDenoiser, Denoiser};
use crate::diffusion::{forward_marginal, kl_diag, DiagGaussian};
use crate::error::{ensure, Error, Result};
use crate::gmm::{exact_posterior, GmmPosterior, GmmPrior};
use crate::metrics;
use crate::operators::{fill_observation, LinearOp, MeasurementOp, ObsModel};
use crate::plot;
use crate::rng;
use crate::sampleio;
use crate::schedule::{NoiseSchedule, DEFAULT_RHO};
use crate::vipaint;

/// Root directory for run outputs: the VIPAINT_OUT environment variable if
/// set, otherwise ./runs.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("VIPAINT_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's seed list.
    pub seeds: Option<Vec<u64>>,
    /// Overrides the default output root.
    pub out: Option<PathBuf>,
    /// Worker threads for the per-seed jobs (0 or 1 = sequential).
    pub threads: usize,
    /// Overwrite an existing run directory.
    pub force: bool,
}

/// Per-seed results. Posterior-fidelity fields are present only when the
/// exact posterior is available (mixture prior, Gaussian noise, σ_v > 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub sample_file: String,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_distance: Option<f64>,
    pub observed_mse: f64,
    pub denoiser_forwards: u64,
    pub denoiser_vjps: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub method: String,
    pub samples_per_seed: usize,
    pub records: Vec<SeedRecord>,
}

/// Number of exact-posterior draws used as the reference side of the
/// energy distance.
const ORACLE_REFERENCE_SAMPLES: usize = 500;

struct Problem {
    schedule: NoiseSchedule,
    op: MeasurementOp,
    dim: usize,
    method: MethodKind,
    n_samples: usize,
    vipaint: Option<vipaint::VipaintConfig>,
    blended: BlendedConfig,
    repaint: RepaintConfig,
    dps: DpsConfig,
    reddiff: RedDiffConfig,
    prior: Option<GmmPrior>,
}

impl Problem {
    fn build(loaded: &LoadedConfig) -> Result<Problem> {
        let m = &loaded.config.methods;
        Ok(Problem {
            schedule: loaded.schedule()?,
            op: loaded.operator()?,
            dim: loaded.dim()?,
            method: loaded.config.run.method,
            n_samples: loaded.config.run.samples,
            vipaint: m.vipaint.clone(),
            blended: m.blended.clone().unwrap_or_default(),
            repaint: m.repaint.clone().unwrap_or_default(),
            dps: m.dps.clone().unwrap_or_default(),
            reddiff: m.reddiff.clone().unwrap_or_default(),
            prior: loaded.gmm_prior()?,
        })
    }

    /// The exact posterior, when the configuration admits one.
    fn oracle(&self, y: &[f64]) -> Result<Option<GmmPosterior>> {
        match &self.prior {
            Some(prior) if self.op.sigma_v > 0.0 && self.op.obs_model == ObsModel::Gaussian => {
                Ok(Some(exact_posterior(prior, &self.op, y)?))
            }
            _ => Ok(None),
        }
    }
}

/// Trace rows serialized as CSV next to the samples.
enum MethodTrace {
    None,
    Vipaint(Vec<vipaint::TraceRow>),
    RedDiff(Vec<baselines::RedDiffTrace>),
}

fn run_method(
    problem: &Problem,
    den: &dyn Denoiser,
    y: &[f64],
    seed: u64,
) -> Result<(Vec<Vec<f64>>, MethodTrace)> {
    match problem.method {
        MethodKind::Vipaint => {
            let vc = problem
                .vipaint
                .as_ref()
                .ok_or_else(|| Error::Config("missing [methods.vipaint] table".into()))?;
            let y_filled = fill_observation(&problem.op, y, problem.dim)?;
            let params = vipaint::init_params(vc, &problem.schedule, &y_filled, seed)?;
            let (fitted, trace) = vipaint::optimize(
                &params,
                vc,
                &problem.schedule,
                den,
                &problem.op,
                y,
                seed,
            )?;
            let samples = vipaint::phase2_sample(
                &fitted,
                vc,
                &problem.schedule,
                den,
                &problem.op,
                y,
                problem.n_samples,
                seed,
            )?;
            Ok((samples, MethodTrace::Vipaint(trace)))
        }
        MethodKind::Blended => Ok((
            baselines::blended_sample(
                &problem.schedule,
                den,
                &problem.op,
                y,
                problem.n_samples,
                &problem.blended,
                seed,
            )?,
            MethodTrace::None,
        )),
        MethodKind::Repaint => Ok((
            baselines::repaint_sample(
                &problem.schedule,
                den,
                &problem.op,
                y,
                problem.n_samples,
                &problem.repaint,
                seed,
            )?,
            MethodTrace::None,
        )),
        MethodKind::Dps => Ok((
            baselines::dps_sample(
                &problem.schedule,
                den,
                &problem.op,
                y,
                problem.n_samples,
                &problem.dps,
                seed,
            )?,
            MethodTrace::None,
        )),
        MethodKind::Reddiff => {
            // One optimization per requested sample, each on its own
            // derived seed, so a "sample set" is a set of point estimates.
            let mut samples = Vec::with_capacity(problem.n_samples);
            let mut first_trace = Vec::new();
            for i in 0..problem.n_samples {
                let sub = rng::derive_seed(seed, "reddiff-sample", i as u64);
                let (mu, trace) =
                    baselines::reddiff(&problem.schedule, den, &problem.op, y, &problem.reddiff, sub)?;
                if i == 0 {
                    first_trace = trace;
                }
                samples.push(mu);
            }
            Ok((samples, MethodTrace::RedDiff(first_trace)))
        }
    }
}

fn write_trace(path: &Path, trace: &MethodTrace) -> Result<()> {
    let body = match trace {
        MethodTrace::None => return Ok(()),
        MethodTrace::Vipaint(rows) => {
            let mut s = String::from("step,total,recon,hier_kl,diff_kl\n");
            for r in rows {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.step, r.total, r.recon, r.hier_kl, r.diff_kl
                ));
            }
            s
        }
        MethodTrace::RedDiff(rows) => {
            let mut s = String::from("step,t,loss\n");
            for r in rows {
                s.push_str(&format!("{},{},{}\n", r.step, r.t, r.loss));
            }
            s
        }
    };
    fs::write(path, body)?;
    Ok(())
}

fn write_scatter(
    path: &Path,
    problem: &Problem,
    oracle: Option<&GmmPosterior>,
    samples: &[Vec<f64>],
    y: &[f64],
    seed: u64,
) -> Result<()> {
    if problem.dim != 2 {
        return Ok(());
    }
    let mut series = Vec::new();
    if let Some(post) = oracle {
        series.push(plot::Series {
            label: "exact posterior".into(),
            color: "#9e9e9e".into(),
            points: post
                .sample(200, rng::derive_seed(seed, "plot-oracle", 0))
                .iter()
                .map(|p| (p[0], p[1]))
                .collect(),
        });
    }
    series.push(plot::Series {
        label: problem.method.name().into(),
        color: "#d62728".into(),
        points: samples.iter().map(|p| (p[0], p[1])).collect(),
    });
    // The observation constraint is a line only for one-dimensional
    // observations of a 2-D state.
    let mut lines = Vec::new();
    if problem.op.obs_dim(2)? == 1 {
        let a = (
            problem.op.apply(&[1.0, 0.0])?[0],
            problem.op.apply(&[0.0, 1.0])?[0],
        );
        let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.clone()).collect();
        let xs = all.iter().map(|p| p.0);
        let ys = all.iter().map(|p| p.1);
        let x_range = (
            xs.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
        );
        let y_range = (
            ys.clone().fold(f64::INFINITY, f64::min),
            ys.fold(f64::NEG_INFINITY, f64::max),
        );
        if let Some((from, to)) = plot::clip_constraint(a, y[0], x_range, y_range) {
            lines.push(plot::Line {
                label: "observation".into(),
                color: "#2ca02c".into(),
                from,
                to,
            });
        }
    }
    let svg = plot::scatter_svg(
        &format!("{} seed {seed}", problem.method.name()),
        &series,
        &lines,
    )?;
    fs::write(path, svg)?;
    Ok(())
}

fn run_seed(
    loaded: &LoadedConfig,
    problem: &Problem,
    den: &dyn Denoiser,
    seed: u64,
    seed_dir: &Path,
) -> Result<SeedRecord> {
    fs::create_dir_all(seed_dir)?;
    let counter = CountingDenoiser::new(den);
    let y = loaded.observation(&problem.op, seed)?;
    let (samples, trace) = run_method(problem, &counter, &y, seed)?;
    ensure!(!samples.is_empty(), "method produced no samples");

    let sample_path = seed_dir.join("samples.bin");
    sampleio::write_samples(&sample_path, &samples, &loaded.hash)?;
    write_trace(&seed_dir.join("trace.csv"), &trace)?;

    let oracle = problem.oracle(&y)?;
    let (mut mode_tv, mut mean_err, mut cov_err, mut energy) = (None, None, None, None);
    if let Some(post) = &oracle {
        let (_, tv) = metrics::mode_coverage(&samples, post)?;
        let (me, ce) = metrics::moment_error(&samples, post)?;
        let reference = post.sample(
            ORACLE_REFERENCE_SAMPLES,
            rng::derive_seed(seed, "oracle", 0),
        );
        energy = Some(metrics::energy_distance(&samples, &reference)?);
        mode_tv = Some(tv);
        mean_err = Some(me);
        cov_err = Some(ce);
    }
    let observed_mse = metrics::observed_mse(&samples, &problem.op, &y)?;
    write_scatter(
        &seed_dir.join("scatter.svg"),
        problem,
        oracle.as_ref(),
        &samples,
        &y,
        seed,
    )?;

    Ok(SeedRecord {
        seed,
        sample_file: format!("seed-{seed}/samples.bin"),
        n_samples: samples.len(),
        mode_tv,
        mean_err,
        cov_err,
        energy_distance: energy,
        observed_mse,
        denoiser_forwards: counter.forwards(),
        denoiser_vjps: counter.vjps(),
    })
}

/// Execute the configured method for every seed; returns the run directory.
///
/// Layout: `<out>/<config stem>-<method>-<hash prefix>/seed-<n>/` holds the
/// sample file, optional trace CSV, and (for 2-D problems) a scatter SVG.
/// `summary.json` aggregates the deterministic per-seed metrics;
/// `timing.json` holds wall-clock seconds separately so summaries stay
/// byte-identical across reruns.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<PathBuf> {
    let loaded = config::load(config_path)?;
    let problem = Problem::build(&loaded)?;
    let den = loaded.denoiser()?;
    let seeds = opts
        .seeds
        .clone()
        .unwrap_or_else(|| loaded.config.run.seeds.clone());
    ensure!(!seeds.is_empty(), "need at least one seed");

    let stem = config_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run");
    let out_root = opts.out.clone().unwrap_or_else(default_out_root);
    let run_dir = out_root.join(format!(
        "{stem}-{}-{}",
        problem.method.name(),
        &hash_hex(&loaded.hash)[..8]
    ));
    if run_dir.exists() {
        if opts.force {
            fs::remove_dir_all(&run_dir)?;
        } else {
            return Err(Error::InvalidArgument(format!(
                "{} already exists (pass --force to overwrite)",
                run_dir.display()
            )));
        }
    }
    fs::create_dir_all(&run_dir)?;

    let threads = opts.threads.max(1).min(seeds.len());
    let mut slots: Vec<Option<Result<(SeedRecord, f64)>>> = Vec::new();
    slots.resize_with(seeds.len(), || None);
    let den_ref: &(dyn Denoiser + Sync) = &*den;
    std::thread::scope(|scope| {
        let mut pending: Vec<(usize, &mut Option<Result<(SeedRecord, f64)>>)> =
            slots.iter_mut().enumerate().collect();
        let mut workers = Vec::new();
        let chunk = pending.len().div_ceil(threads);
        while !pending.is_empty() {
            let batch: Vec<_> = pending
                .drain(..chunk.min(pending.len()))
                .collect();
            let loaded = &loaded;
            let problem = &problem;
            let seeds = &seeds;
            let run_dir = &run_dir;
            workers.push(scope.spawn(move || {
                for (idx, slot) in batch {
                    let seed = seeds[idx];
                    let started = Instant::now();
                    let result = run_seed(
                        loaded,
                        problem,
                        den_ref,
                        seed,
                        &run_dir.join(format!("seed-{seed}")),
                    );
                    *slot = Some(result.map(|r| (r, started.elapsed().as_secs_f64())));
                }
            }));
        }
        for w in workers {
            let _ = w.join();
        }
    });

    let mut records = Vec::with_capacity(seeds.len());
    let mut timings = Vec::with_capacity(seeds.len());
    for (idx, slot) in slots.into_iter().enumerate() {
        let outcome = slot.expect("every seed slot is filled");
        match outcome {
            Ok((record, secs)) => {
                timings.push(json!({"seed": seeds[idx], "wall_seconds": secs}));
                records.push(record);
            }
            Err(e) => {
                return Err(Error::Config(format!(
                    "method {} seed {}: {e}",
                    problem.method.name(),
                    seeds[idx]
                )))
            }
        }
    }

    let summary = RunSummary {
        schema_version: config::SCHEMA_VERSION,
        config_hash: hash_hex(&loaded.hash),
        method: problem.method.name().to_string(),
        samples_per_seed: problem.n_samples,
        records,
    };
    let mut summary_text = serde_json::to_string_pretty(&summary)?;
    summary_text.push('\n');
    fs::write(run_dir.join("summary.json"), summary_text)?;
    let mut timing_text = serde_json::to_string_pretty(&json!({"seeds": timings}))?;
    timing_text.push('\n');
    fs::write(run_dir.join("timing.json"), timing_text)?;
    Ok(run_dir)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate run summaries into a CSV table (mean ± std over seeds per
/// method). Returns the table and the list of directories that were
/// skipped because they held no readable summary. Mixing runs produced by
/// different configs is refused unless `force` is set.
pub fn compare(run_dirs: &[PathBuf], force: bool) -> Result<(String, Vec<String>)> {
    ensure!(!run_dirs.is_empty(), "need at least one run directory");
    let mut summaries: Vec<RunSummary> = Vec::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        match fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str::<RunSummary>(&text) {
                Ok(s) => summaries.push(s),
                Err(e) => skipped.push(format!("{}: {e}", path.display())),
            },
            Err(e) => skipped.push(format!("{}: {e}", path.display())),
        }
    }
    ensure!(
        !summaries.is_empty(),
        "no readable summaries among the given run directories"
    );
    if !force {
        let first = &summaries[0].config_hash;
        ensure!(
            summaries.iter().all(|s| &s.config_hash == first),
            "run directories come from different configs (pass --force to aggregate anyway)"
        );
    }

    let mut csv = String::from(
        "method,config_hash,n_seeds,samples_per_seed,\
         mode_tv_mean,mode_tv_std,mean_err_mean,mean_err_std,\
         cov_err_mean,cov_err_std,energy_distance_mean,energy_distance_std,\
         observed_mse_mean,observed_mse_std,denoiser_forwards_mean\n",
    );
    for s in &summaries {
        let col = |f: &dyn Fn(&SeedRecord) -> Option<f64>| -> String {
            let vals: Vec<f64> = s.records.iter().filter_map(f).collect();
            if vals.len() == s.records.len() && !vals.is_empty() {
                let (m, sd) = mean_std(&vals);
                format!("{m:.6},{sd:.6}")
            } else {
                ",".into()
            }
        };
        let forwards =
            s.records.iter().map(|r| r.denoiser_forwards as f64).sum::<f64>()
                / s.records.len() as f64;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.1}\n",
            s.method,
            &s.config_hash[..8.min(s.config_hash.len())],
            s.records.len(),
            s.samples_per_seed,
            col(&|r| r.mode_tv),
            col(&|r| r.mean_err),
            col(&|r| r.cov_err),
            col(&|r| r.energy_distance),
            col(&|r| Some(r.observed_mse)),
            forwards
        ));
    }
    Ok((csv, skipped))
}

/// Train the network denoiser described by the config's [train] table on
/// draws from its mixture prior; saves the weights and returns the loss
/// trace alongside the output path.
pub fn train_denoiser(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: u64,
) -> Result<(PathBuf, Vec<f64>)> {
    let loaded = config::load(config_path)?;
    let prior = loaded.gmm_prior()?.ok_or_else(|| {
        Error::Config("train-denoiser needs a mixture prior as the data source".into())
    })?;
    let spec = loaded.config.train.clone().unwrap_or_default();
    let schedule = loaded.schedule()?;
    let data = prior.sample(spec.data, rng::derive_seed(seed, "train-data", 0));
    let mut net = MlpDenoiser::with_hidden(prior.dim(), schedule, &spec.hidden, seed)?;
    let trace = net.train(&data, spec.steps, spec.lr, spec.batch, seed)?;
    let out_path = out.unwrap_or_else(|| {
        default_out_root().join(format!(
            "denoiser-{}.bin",
            &hash_hex(&loaded.hash)[..8]
        ))
    });
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    net.save(&out_path)?;
    Ok((out_path, trace))
}

/// Dump exact-posterior samples and moments for the configured problem.
pub fn oracle(
    config_path: &Path,
    out: Option<PathBuf>,
    n_samples: usize,
    seed: u64,
) -> Result<PathBuf> {
    let loaded = config::load(config_path)?;
    let problem = Problem::build(&loaded)?;
    let y = loaded.observation(&problem.op, seed)?;
    let post = problem.oracle(&y)?.ok_or_else(|| {
        Error::Config(
            "oracle needs a mixture prior with Gaussian observation noise (sigma_v > 0)".into(),
        )
    })?;
    let dir = out.unwrap_or_else(|| {
        default_out_root().join(format!("oracle-{}", &hash_hex(&loaded.hash)[..8]))
    });
    fs::create_dir_all(&dir)?;
    let samples = post.sample(n_samples, rng::derive_seed(seed, "oracle", 0));
    sampleio::write_samples(&dir.join("samples.bin"), &samples, &loaded.hash)?;
    let (mean, cov) = post.mixture_moments();
    let components: Vec<_> = (0..post.n_components())
        .map(|k| {
            json!({
                "weight": post.weights()[k],
                "mean": post.mean_of(k),
                "cov": post.cov_of(k),
            })
        })
        .collect();
    let doc = json!({
        "config_hash": hash_hex(&loaded.hash),
        "observation": y,
        "mixture_mean": mean,
        "mixture_cov": cov,
        "components": components,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(dir.join("oracle.json"), text)?;
    Ok(dir)
}

/// One line of the self-check report.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<String>) -> CheckLine {
    match run() {
        Ok(detail) => CheckLine {
            name,
            pass: true,
            detail,
        },
        Err(e) => CheckLine {
            name,
            pass: false,
            detail: e.to_string(),
        },
    }
}

/// Fast invariant suite covering schedules, Gaussian algebra, the exact
/// denoiser, and sampler determinism. Each check runs well under a second.
pub fn selfcheck() -> Vec<CheckLine> {
    let mut lines = Vec::new();

    lines.push(check("snr-monotone", || {
        for sched in [NoiseSchedule::ve(0.002, 50.0)?, NoiseSchedule::vp_default()] {
            let grid =
                sched.edm_grid(64, sched.t_floor(), sched.t_max(), DEFAULT_RHO)?;
            let snrs: Vec<f64> = grid
                .points()
                .iter()
                .map(|&t| {
                    let (a, s) = sched.alpha_sigma(t).unwrap();
                    a * a / (s * s)
                })
                .collect();
            ensure!(
                snrs.windows(2).all(|w| w[0] < w[1]),
                "snr not monotone over descending times"
            );
        }
        Ok("snr strictly decreasing in t on ve and vp".into())
    }));

    lines.push(check("vp-identity", || {
        let sched = NoiseSchedule::vp_default();
        for i in 1..=100 {
            let t = sched.t_max() * i as f64 / 100.0;
            let (a, s) = sched.alpha_sigma(t)?;
            ensure!(
                (a * a + s * s - 1.0).abs() < 1e-12,
                "alpha^2 + sigma^2 != 1 at t = {t}"
            );
        }
        Ok("alpha^2 + sigma^2 = 1 within 1e-12".into())
    }));

    lines.push(check("marginal-composition", || {
        let sched = NoiseSchedule::vp_default();
        let (s, t) = (200.0, 700.0);
        let z0 = vec![0.7, -1.1];
        let at_s = forward_marginal(&sched, &z0, s)?;
        let direct = forward_marginal(&sched, &z0, t)?;
        let (a_ts, var_ts) = crate::diffusion::forward_conditional_coeffs(&sched, s, t)?;
        for d in 0..2 {
            let mean = a_ts * at_s.mean[d];
            let var = a_ts * a_ts * at_s.std_at(d) * at_s.std_at(d) + var_ts;
            ensure!(
                (mean - direct.mean[d]).abs() < 1e-12
                    && (var.sqrt() - direct.std_at(d)).abs() < 1e-12,
                "two-step and direct marginals disagree"
            );
        }
        Ok("s-then-t composition matches direct marginal at 1e-12".into())
    }));

    lines.push(check("kl-identity", || {
        let q = DiagGaussian::new(vec![0.3, -0.2], vec![0.5, 1.5])?;
        let kl = kl_diag(&q, &q)?;
        ensure!(kl.abs() < 1e-12, "kl(q, q) = {kl}, expected 0");
        Ok("kl(q, q) = 0".into())
    }));

    lines.push(check("denoiser-score-identity", || {
        use crate::denoiser::gmm::GmmDenoiser;
        let prior = GmmPrior::uniform(
            vec![vec![-2.0, 0.5], vec![2.0, -0.5]],
            vec![vec![0.04, 0.04], vec![0.04, 0.04]],
        )?;
        let sched = NoiseSchedule::ve(0.002, 50.0)?;
        let den = GmmDenoiser::new(prior.clone(), sched.clone());
        let (t, z) = (1.7, vec![0.4, -0.9]);
        let eps = den.eps_hat(&z, t)?;
        let marginal = prior.marginal_at(&sched, t)?;
        let (_, sigma) = sched.alpha_sigma(t)?;
        let h = 1e-5;
        for d in 0..2 {
            let mut hi = z.clone();
            let mut lo = z.clone();
            hi[d] += h;
            lo[d] -= h;
            let score = (marginal.log_pdf(&hi)? - marginal.log_pdf(&lo)?) / (2.0 * h);
            let rel = (eps[d] + sigma * score).abs() / eps[d].abs().max(1e-9);
            ensure!(
                rel < 1e-5,
                "eps_hat does not match -sigma * score (rel {rel:.2e})"
            );
        }
        Ok("eps_hat = -sigma * grad log p_t within 1e-5".into())
    }));

    lines.push(check("vjp-finite-difference", || {
        use crate::denoiser::gmm::GmmDenoiser;
        let prior = GmmPrior::uniform(
            vec![vec![-1.0, 0.3], vec![1.2, -0.8]],
            vec![vec![0.09, 0.04], vec![0.04, 0.09]],
        )?;
        let sched = NoiseSchedule::ve(0.002, 50.0)?;
        let den = GmmDenoiser::new(prior, sched);
        let (t, z, w) = (1.1, vec![0.2, 0.5], vec![0.7, -0.4]);
        let got = den.eps_vjp(&z, t, &w)?;
        let h = 1e-6;
        for d in 0..2 {
            let mut hi = z.clone();
            let mut lo = z.clone();
            hi[d] += h;
            lo[d] -= h;
            let (ehi, elo) = (den.eps_hat(&hi, t)?, den.eps_hat(&lo, t)?);
            let fd: f64 = (0..2)
                .map(|o| w[o] * (ehi[o] - elo[o]) / (2.0 * h))
                .sum();
            let rel = (got[d] - fd).abs() / fd.abs().max(1e-9);
            ensure!(rel < 1e-5, "vjp disagrees with finite differences");
        }
        Ok("denoiser vjp matches finite differences within 1e-5".into())
    }));

    lines.push(check("sampler-determinism", || {
        use crate::denoiser::gmm::GmmDenoiser;
        let prior = GmmPrior::uniform(vec![vec![0.8, -0.4]], vec![vec![0.25, 0.09]])?;
        let sched = NoiseSchedule::ve(0.002, 50.0)?;
        let den = GmmDenoiser::new(prior, sched.clone());
        let op = MeasurementOp::gaussian(LinearOp::mask(vec![true, false])?, 0.05)?;
        let cfg = BlendedConfig { steps: 16 };
        let a = baselines::blended_sample(&sched, &den, &op, &[0.8], 2, &cfg, 42)?;
        let b = baselines::blended_sample(&sched, &den, &op, &[0.8], 2, &cfg, 42)?;
        ensure!(a == b, "identical seeds produced different samples");
        Ok("repeated runs are bit-identical".into())
    }));

    lines.push(check("fill-observation-consistency", || {
        let dim = 4;
        for op in [
            MeasurementOp::gaussian(LinearOp::mask(vec![true, false, true, false])?, 0.1)?,
            MeasurementOp::gaussian(LinearOp::downsample(2)?, 0.1)?,
        ] {
            let y = vec![0.3, -1.2];
            let filled = fill_observation(&op, &y, dim)?;
            let back = op.apply(&filled)?;
            for (a, b) in back.iter().zip(&y) {
                ensure!((a - b).abs() < 1e-9, "fill does not reproduce observation");
            }
        }
        Ok("filled states reproduce their observations".into())
    }));

    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_config(name: &str, body: &str) -> (PathBuf, PathBuf) {
        let dir = std::env::temp_dir().join(format!("harness-{}-{name}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("exp.toml");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        (dir, path)
    }

    const BIMODAL_BLENDED: &str = r#"
schema_version = 1

[schedule]
kind = "ve"
sigma_min = 0.002
sigma_max = 50.0

[prior]
kind = "gmm"
means = [[-2.0, 0.5], [2.0, -0.5]]
covs = [[0.04, 0.04], [0.04, 0.04]]

[operator]
kind = "mask"
mask = [true, false]
sigma_v = 0.05

[observation]
y = [-1.9]

[run]
method = "blended"
samples = 6
seeds = [0, 1]

[methods.blended]
steps = 32
"#;

    #[test]
    fn run_writes_samples_metrics_and_plots() {
        let (dir, path) = write_config("run", BIMODAL_BLENDED);
        let opts = RunOptions {
            out: Some(dir.join("out")),
            ..Default::default()
        };
        let run_dir = run(&path, &opts).unwrap();
        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary.method, "blended");
        assert_eq!(summary.records.len(), 2);
        for record in &summary.records {
            assert_eq!(record.n_samples, 6);
            assert!(record.mode_tv.is_some());
            assert!(record.energy_distance.unwrap() >= 0.0);
            assert!(record.observed_mse.is_finite());
            assert!(record.denoiser_forwards > 0);
            let (samples, hash) =
                sampleio::read_samples(&run_dir.join(&record.sample_file)).unwrap();
            assert_eq!(samples.len(), 6);
            assert_eq!(hash_hex(&hash), summary.config_hash);
        }
        assert!(run_dir.join("seed-0/scatter.svg").is_file());
        assert!(run_dir.join("timing.json").is_file());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (dir, path) = write_config("determinism", BIMODAL_BLENDED);
        let opts = RunOptions {
            out: Some(dir.join("out")),
            ..Default::default()
        };
        let run_dir = run(&path, &opts).unwrap();
        let first_samples = fs::read(run_dir.join("seed-0/samples.bin")).unwrap();
        let first_summary = fs::read(run_dir.join("summary.json")).unwrap();
        // A second run without --force must refuse to clobber the first.
        assert!(run(&path, &opts).is_err());
        let forced = RunOptions {
            out: Some(dir.join("out")),
            force: true,
            ..Default::default()
        };
        let run_dir2 = run(&path, &forced).unwrap();
        assert_eq!(run_dir, run_dir2);
        assert_eq!(fs::read(run_dir2.join("seed-0/samples.bin")).unwrap(), first_samples);
        assert_eq!(fs::read(run_dir2.join("summary.json")).unwrap(), first_summary);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn seed_override_and_threads_change_only_the_seed_set() {
        let (dir, path) = write_config("seeds", BIMODAL_BLENDED);
        let sequential = RunOptions {
            out: Some(dir.join("out-a")),
            seeds: Some(vec![5, 6, 7]),
            threads: 1,
            ..Default::default()
        };
        let parallel = RunOptions {
            out: Some(dir.join("out-b")),
            seeds: Some(vec![5, 6, 7]),
            threads: 3,
            ..Default::default()
        };
        let d1 = run(&path, &sequential).unwrap();
        let d2 = run(&path, &parallel).unwrap();
        let s1 = fs::read_to_string(d1.join("summary.json")).unwrap();
        let s2 = fs::read_to_string(d2.join("summary.json")).unwrap();
        assert_eq!(s1, s2, "thread count changed results");
        let parsed: RunSummary = serde_json::from_str(&s1).unwrap();
        assert_eq!(
            parsed.records.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![5, 6, 7]
        );
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn vipaint_method_runs_end_to_end() {
        let body = BIMODAL_BLENDED
            .replace("method = \"blended\"", "method = \"vipaint\"")
            .replace("samples = 6", "samples = 3")
            .replace(
                "[methods.blended]\nsteps = 32",
                "[methods.vipaint]\ntimes = [2.2, 1.5]\nchains = 1\nopt_steps = 4\ndiff_grid = 4\n\n[methods.vipaint.phase2]\nsteps = 10\nzeta = 0.3",
            );
        let (dir, path) = write_config("vip", &body);
        let opts = RunOptions {
            out: Some(dir.join("out")),
            seeds: Some(vec![0]),
            ..Default::default()
        };
        let run_dir = run(&path, &opts).unwrap();
        let trace = fs::read_to_string(run_dir.join("seed-0/trace.csv")).unwrap();
        assert!(trace.starts_with("step,total,recon,hier_kl,diff_kl"));
        assert_eq!(trace.lines().count(), 1 + 4);
        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary.records[0].n_samples, 3);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn reddiff_method_writes_point_estimates_and_trace() {
        let body = BIMODAL_BLENDED
            .replace("method = \"blended\"", "method = \"reddiff\"")
            .replace("samples = 6", "samples = 2")
            .replace("[methods.blended]\nsteps = 32", "[methods.reddiff]\nsteps = 40");
        let (dir, path) = write_config("reddiff", &body);
        let opts = RunOptions {
            out: Some(dir.join("out")),
            seeds: Some(vec![0]),
            ..Default::default()
        };
        let run_dir = run(&path, &opts).unwrap();
        let trace = fs::read_to_string(run_dir.join("seed-0/trace.csv")).unwrap();
        assert!(trace.starts_with("step,t,loss"));
        let (samples, _) = sampleio::read_samples(&run_dir.join("seed-0/samples.bin")).unwrap();
        assert_eq!(samples.len(), 2);
        assert_ne!(samples[0], samples[1], "derived seeds must differ");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn compare_aggregates_and_guards_config_hashes() {
        let (dir, path) = write_config("cmp", BIMODAL_BLENDED);
        let d1 = run(
            &path,
            &RunOptions {
                out: Some(dir.join("out-a")),
                ..Default::default()
            },
        )
        .unwrap();
        // Same problem, different config bytes => different hash.
        let other = BIMODAL_BLENDED.replace("steps = 32", "steps = 24");
        let (dir2, path2) = write_config("cmp-b", &other);
        let d2 = run(
            &path2,
            &RunOptions {
                out: Some(dir2.join("out")),
                ..Default::default()
            },
        )
        .unwrap();

        let (csv, skipped) = compare(&[d1.clone()], false).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("blended,"));

        assert!(compare(&[d1.clone(), d2.clone()], false).is_err());
        let (csv2, _) = compare(&[d1.clone(), d2], true).unwrap();
        assert_eq!(csv2.lines().count(), 3);

        let (_, skipped2) = compare(&[d1, dir.join("nonexistent")], true).unwrap();
        assert_eq!(skipped2.len(), 1);
        fs::remove_dir_all(&dir).ok();
        fs::remove_dir_all(&dir2).ok();
    }

    #[test]
    fn oracle_dump_has_samples_and_moments() {
        let (dir, path) = write_config("oracle", BIMODAL_BLENDED);
        let out = oracle(&path, Some(dir.join("oracle-out")), 50, 0).unwrap();
        let (samples, _) = sampleio::read_samples(&out.join("samples.bin")).unwrap();
        assert_eq!(samples.len(), 50);
        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
        assert!(doc["mixture_mean"].is_array());
        assert_eq!(doc["components"].as_array().unwrap().len(), 2);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn selfcheck_passes() {
        let lines = selfcheck();
        assert!(lines.len() >= 8);
        for line in &lines {
            assert!(line.pass, "{} failed: {}", line.name, line.detail);
        }
    }
}
