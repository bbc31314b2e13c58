//! Subcommands of the `tubelab` binary as library functions, so that the
//! test suites can drive them in-process.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use tubelab::config::{MethodSpec, RunConfig, TargetEnv};
use tubelab::learn::dagger::{
    demo_efficiency, evaluate_expert, evaluate_policy, write_curves_csv, CurvePoint, EvalTarget, MethodOutcome, Session,
};
use tubelab::learn::net::PolicyParams;
use tubelab::synthesis::SynthesisResult;
use tubelab::vision::{ObservationDatabase, StressKind};
use tubelab::world::{episode_keys, score, write_trace_csv, Environment, Metrics};
use tubelab::Error;

pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");
pub const SMOKE_CONFIG: &str = include_str!("../config/smoke.toml");

pub const TABLE_HEADER: [&str; 6] = ["method", "env", "success%", "expert_gap%", "demo_efficiency", "status"];
pub const SWEEP_HEADER: [&str; 6] = ["kind", "magnitude", "psnr_db", "rms_xyz", "success%", "episodes"];

/// Environment tag of the visual-noise sweep episodes.
const SWEEP_TAG: u64 = 3;

/// Hex SHA-256 of the canonical TOML rendering of the configuration.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = cfg.to_toml()?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

/// Resolved invocation: configuration, output directory, scale.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub full_scale: bool,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>, full_scale: bool) -> Result<Self> {
        cfg.validate()?;
        let hash = config_hash(&cfg)?;
        let out = out.into();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { cfg, out, full_scale, hash })
    }

    /// Load `path` (or the built-in defaults) and apply a seed override.
    pub fn from_args(config: Option<&Path>, seed: Option<u64>, out: impl Into<PathBuf>, full_scale: bool) -> Result<Self> {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::from_toml(DEFAULT_CONFIG)?,
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Self::new(cfg, out, full_scale)
    }

    pub fn header(&self, command: &str) -> Vec<String> {
        vec![format!("tubelab {command}"), format!("config_hash={} seed={}", self.hash, self.cfg.seed)]
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn synthesize(&self) -> Result<SynthesisResult> {
        self.cfg.synthesize().map_err(|e| match e {
            Error::TubeTooLarge { set, components } => anyhow::anyhow!(
                "tube too large: {set} is empty along components {components:?}; reduce the uncertainty or enlarge the constraint boxes"
            ),
            e => e.into(),
        })
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    comment: String,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON with the header folded into a leading `comment` field.
pub fn write_json<T: Serialize>(path: &Path, header: &[String], body: &T) -> Result<()> {
    let s = Stamped { comment: header.join("; "), body };
    let mut text = serde_json::to_string_pretty(&s)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}"))
}

pub fn cmd_synth(run: &Run) -> Result<SynthesisResult> {
    let syn = run.synthesize()?;
    write_json(&run.path("synthesis.json"), &run.header("synth"), &syn)?;
    let widths: Vec<String> = (0..syn.z.dim()).map(|i| format!("{:.4}", syn.z.hi[i] - syn.z.lo[i])).collect();
    println!("tube Z widths: [{}]", widths.join(", "));
    Ok(syn)
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub episode_length: usize,
    pub success: bool,
    pub records: usize,
    pub images: usize,
    pub attempts: usize,
}

/// One expert demonstration in the source domain: trace CSV, metrics,
/// and the observation database (PGM images plus index).
pub fn cmd_demo(run: &Run) -> Result<DemoSummary> {
    let syn = run.synthesize()?;
    let env = Environment::from_config(&run.cfg)?;
    let reference = run.cfg.reference()?;
    let s = Session { cfg: &run.cfg, syn: &syn, env: &env, reference: &reference };
    let m = &run.cfg.experiment.train_method;
    let mut db = ObservationDatabase::new();
    let (demo, rejected, _) = s.demonstration(m.learner, m.augmentation, 1.0, None, 0, 0, &mut db)?;
    let dir = run.path("demo");
    fs::create_dir_all(&dir)?;
    let header = run.header("demo");
    let mut w = create(&dir.join("trace.csv"))?;
    write_trace_csv(&mut w, &demo.episode, &header)?;
    w.flush()?;
    db.save(&dir.join("db"), &header)?;
    let summary = DemoSummary { episode_length: demo.episode_length, success: demo.success, records: demo.records.len(), images: db.len(), attempts: rejected + 1 };
    write_json(&dir.join("metrics.json"), &header, &summary)?;
    Ok(summary)
}

/// Expert baselines in every configured environment.
pub fn eval_targets(run: &Run, syn: &SynthesisResult, env: &Environment, reference: &tubelab::control::ReferenceTrajectory) -> Result<Vec<EvalTarget>> {
    run.cfg
        .experiment
        .envs
        .iter()
        .map(|&t| EvalTarget::new(&run.cfg, syn, env, reference, t, run.full_scale).map_err(Into::into))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub method: String,
    pub curve: Vec<CurvePoint>,
    pub samples_per_round: Vec<usize>,
    pub final_loss: Vec<f64>,
}

/// Train the configured method over all rounds and save the policy.
pub fn cmd_train(run: &Run) -> Result<TrainSummary> {
    let syn = run.synthesize()?;
    let env = Environment::from_config(&run.cfg)?;
    let reference = run.cfg.reference()?;
    let targets = eval_targets(run, &syn, &env, &reference)?;
    let s = Session { cfg: &run.cfg, syn: &syn, env: &env, reference: &reference };
    let m = run.cfg.experiment.train_method.clone();
    let k = run.cfg.experiment.demos_per_round(&m);
    let out = s.run_method(&m, run.cfg.experiment.rounds, k, &targets, |p| log_point(p))?;
    let header = run.header("train");
    let mut w = create(&run.path("policy.tlp"))?;
    out.policy.write_binary(&mut w, &serde_json::json!({ "comment": header, "method": m.name() }))?;
    w.flush()?;
    let pts: Vec<_> = out.curve.iter().cloned().map(Ok).collect();
    write_curves_csv(create(&run.path("train_curve.csv"))?, &pts, &header)?;
    let summary = TrainSummary {
        method: m.name(),
        curve: out.curve.clone(),
        samples_per_round: out.rounds.iter().map(|r| r.samples).collect(),
        final_loss: out.rounds.iter().map(|r| r.report.final_loss).collect(),
    };
    write_json(&run.path("train_log.json"), &header, &summary)?;
    Ok(summary)
}

fn log_point(p: &CurvePoint) {
    eprintln!(
        "{} [{}] round {} demos {}: success {:.1}% length {:.1}",
        p.method, p.env, p.round, p.demos, p.success_rate, p.mean_episode_length
    );
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let f = File::open(path).with_context(|| format!("policy file {} is missing", path.display()))?;
    let (p, _) = PolicyParams::read_binary(std::io::BufReader::new(f))?;
    Ok(p)
}

/// Evaluate the expert (`policy = None`) or a saved policy in each target
/// environment; writes metrics JSON and the first episode's trace.
pub fn cmd_eval(run: &Run, policy: Option<&Path>) -> Result<Vec<(TargetEnv, Metrics)>> {
    let syn = run.synthesize()?;
    let env = Environment::from_config(&run.cfg)?;
    let reference = run.cfg.reference()?;
    let params = policy.map(load_policy).transpose()?;
    let header = run.header("eval");
    let who = if params.is_some() { "policy" } else { "expert" };
    let mut all = Vec::new();
    for &t in &run.cfg.experiment.envs {
        let model = tubelab::learn::dagger::target_model(&run.cfg, t);
        let keys = tubelab::learn::dagger::eval_keys(&run.cfg, t, run.full_scale);
        let expert = evaluate_expert(&run.cfg, &syn, &env, &reference, &model, &keys)?;
        let expert_cost = tubelab::world::mean_success_cost(&expert).unwrap_or(f64::NAN);
        let res = match &params {
            Some(p) => evaluate_policy(&run.cfg, p, &env, &reference, &model, &keys)?,
            None => expert,
        };
        let m = score(&res, expert_cost)?;
        let slug = slug(t.name());
        write_json(&run.path(&format!("eval_{who}_{slug}.json")), &header, &m)?;
        let mut w = create(&run.path(&format!("eval_{who}_{slug}_trace.csv")))?;
        write_trace_csv(&mut w, &res[0], &header)?;
        w.flush()?;
        all.push((t, m));
    }
    Ok(all)
}

pub fn slug(name: &str) -> String {
    name.to_lowercase().replace('+', "_")
}

/// One cell of the comparison: a method's curve or its failure.
pub type Cell = (MethodSpec, std::result::Result<Vec<CurvePoint>, String>);

#[derive(Debug, Clone, Serialize)]
pub struct ExpertBaseline {
    pub env: String,
    pub metrics: Metrics,
    pub stage_cost: f64,
}

pub struct ExperimentOutcome {
    pub cells: Vec<Cell>,
    pub all_ok: bool,
}

/// All method cells in all environments; curves, table and per-cell
/// progress files under the output directory.
pub fn cmd_experiment(run: &Run) -> Result<ExperimentOutcome> {
    let syn = run.synthesize()?;
    let env = Environment::from_config(&run.cfg)?;
    let reference = run.cfg.reference()?;
    let targets = eval_targets(run, &syn, &env, &reference)?;
    let header = run.header("experiment");
    let baselines: Vec<ExpertBaseline> =
        targets.iter().map(|t| ExpertBaseline { env: t.target.name().into(), metrics: t.expert.clone(), stage_cost: t.expert_cost }).collect();
    write_json(&run.path("expert_baseline.json"), &header, &serde_json::json!({ "environments": baselines }))?;
    let cells_dir = run.path("cells");
    fs::create_dir_all(&cells_dir)?;
    let s = Session { cfg: &run.cfg, syn: &syn, env: &env, reference: &reference };
    let log = Mutex::new(());
    let cells: Vec<Cell> = run
        .cfg
        .experiment
        .methods
        .par_iter()
        .map(|m| {
            let started = Instant::now();
            let res = run_cell(run, &s, m, &targets, &cells_dir.join(format!("{}.csv", slug(&m.name()))), &header, &log);
            let _g = log.lock().expect("log lock");
            eprintln!("{} finished in {:.1}s (measured)", m.name(), started.elapsed().as_secs_f64());
            (m.clone(), res.map(|o| o.curve).map_err(|e| format!("{e:#}")))
        })
        .collect();
    let all_ok = cells.iter().all(|c| c.1.is_ok());
    write_fig4(&run.path("fig4_curves.csv"), &cells, &run.cfg.experiment.envs, &header)?;
    write_table2(&run.path("table2.csv"), &cells, &run.cfg.experiment.envs, run.cfg.experiment.success_threshold, &header)?;
    Ok(ExperimentOutcome { cells, all_ok })
}

fn run_cell(run: &Run, s: &Session, m: &MethodSpec, targets: &[EvalTarget], path: &Path, header: &[String], log: &Mutex<()>) -> Result<MethodOutcome> {
    let k = run.cfg.experiment.demos_per_round(m);
    let mut done: Vec<std::result::Result<CurvePoint, (String, String, String)>> = Vec::new();
    let out = s.run_method(m, run.cfg.experiment.rounds, k, targets, |p| {
        done.push(Ok(p.clone()));
        // partial results: rewrite the cell file after every point
        if let Ok(f) = File::create(path) {
            let _ = write_curves_csv(BufWriter::new(f), &done, header);
        }
        let _g = log.lock().expect("log lock");
        log_point(p);
    });
    if let Err(e) = &out {
        for t in targets {
            done.push(Err((m.name(), t.target.name().into(), e.to_string())));
        }
        write_curves_csv(create(path)?, &done, header)?;
    }
    Ok(out?)
}

pub fn write_fig4(path: &Path, cells: &[Cell], envs: &[TargetEnv], header: &[String]) -> Result<()> {
    let mut rows = Vec::new();
    for (m, res) in cells {
        match res {
            Ok(curve) => {
                for e in envs {
                    rows.extend(curve.iter().filter(|p| p.env == e.name()).cloned().map(Ok));
                }
            }
            Err(msg) => rows.extend(envs.iter().map(|e| Err((m.name(), e.name().to_string(), msg.clone())))),
        }
    }
    let mut w = create(path)?;
    write_curves_csv(&mut w, &rows, header)?;
    w.flush()?;
    Ok(())
}

/// Final-round success and gap per cell, plus demonstration efficiency.
pub fn write_table2(path: &Path, cells: &[Cell], envs: &[TargetEnv], threshold: f64, header: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for c in header {
        writeln!(w, "# {c}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TABLE_HEADER)?;
    for (m, res) in cells {
        for e in envs {
            let row: Vec<String> = match res {
                Ok(curve) => {
                    let Some(last) = curve.iter().filter(|p| p.env == e.name()).last() else { bail!("no curve points for {} in {}", m.name(), e.name()) };
                    vec![
                        m.name(),
                        e.name().into(),
                        format!("{:.1}", last.success_rate),
                        fmt_opt(last.expert_gap),
                        demo_efficiency(curve, e.name(), threshold).map_or_else(|| "NA".into(), |d| d.to_string()),
                        "ok".into(),
                    ]
                }
                Err(msg) => vec![m.name(), e.name().into(), String::new(), String::new(), String::new(), format!("error: {msg}")],
            };
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub kind: String,
    pub magnitude: f64,
    pub psnr_db: f64,
    pub rms_xyz: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

fn kind_name(k: Option<StressKind>) -> &'static str {
    match k {
        None => "clean",
        Some(StressKind::GaussianNoise) => "gaussian_noise",
        Some(StressKind::GaussianBlur) => "gaussian_blur",
    }
}

/// Evaluate a policy on the wind environment with corrupted images: one
/// clean baseline row, then each corruption sorted by magnitude.
pub fn cmd_noise_sweep(run: &Run, policy: &Path) -> Result<Vec<SweepRow>> {
    let params = load_policy(policy)?;
    let env = Environment::from_config(&run.cfg)?;
    let reference = run.cfg.reference()?;
    let model = tubelab::learn::dagger::target_model(&run.cfg, TargetEnv::NoiseWind);
    let keys = episode_keys(run.cfg.seed, SWEEP_TAG, 1, run.cfg.sweep.episodes);
    let sw = &run.cfg.sweep;
    let mut grid: Vec<(Option<StressKind>, f64)> = vec![(None, 0.0)];
    for (kind, mags) in [(StressKind::GaussianNoise, &sw.noise_magnitudes), (StressKind::GaussianBlur, &sw.blur_magnitudes)] {
        let mut m = mags.clone();
        m.sort_by(f64::total_cmp);
        grid.extend(m.into_iter().map(|v| (Some(kind), v)));
    }
    let mut rows = Vec::new();
    for (kind, mag) in grid {
        let mut e = env.clone();
        e.visual_stress = kind.map(|k| (k, mag));
        let res = evaluate_policy(&run.cfg, &params, &e, &reference, &model, &keys)?;
        let n = res.len() as f64;
        let psnr = res.iter().map(|r| r.mean_psnr.unwrap_or(f64::INFINITY)).sum::<f64>() / n;
        let rms = res.iter().map(|r| r.rms_xyz).sum::<f64>() / n;
        let success = 100.0 * res.iter().filter(|r| r.success).count() as f64 / n;
        eprintln!("{} {mag}: psnr {psnr:.2} rms {rms:.3} success {success:.0}%", kind_name(kind));
        rows.push(SweepRow { kind: kind_name(kind).into(), magnitude: mag, psnr_db: psnr, rms_xyz: rms, success_rate: success, episodes: res.len() });
    }
    let mut w = create(&run.path("noise_sweep.csv"))?;
    for c in run.header("noise-sweep") {
        writeln!(w, "# {c}")?;
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SWEEP_HEADER)?;
    for r in &rows {
        let psnr = if r.psnr_db.is_finite() { format!("{:.3}", r.psnr_db) } else { "inf".into() };
        wtr.write_record([r.kind.clone(), format!("{}", r.magnitude), psnr, format!("{:.4}", r.rms_xyz), format!("{:.1}", r.success_rate), r.episodes.to_string()])?;
    }
    wtr.flush()?;
    Ok(rows)
}
