//! Acceptance criteria A1-A12. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tubelab::config::{Augmentation, Learner, MethodSpec, NoiseMode, RunConfig, TargetEnv};
use tubelab::learn::dagger::{CurvePoint, EvalTarget, Session};
use tubelab::learn::data::{augment_demonstration, AugmentContext};
use tubelab::learn::net::{Architecture, Inputs, Normalization, PolicyParams};
use tubelab::learn::train::SampleOrigin;
use tubelab::model::{NU, NX};
use tubelab::rng;
use tubelab::setops::{linear_map_outer, minkowski_sum, pontryagin_diff, BoxSet};
use tubelab::synthesis::{dare_residual, estimate_mrpi_monte_carlo, solve_dare, tightening_is_sound, DisturbanceSampling, ErrorSystem};
use tubelab::world::{episode_keys, run_batch, DisturbanceModel, Environment, ExpertController, NoiseModel};
use tubelab_cli::{cmd_experiment, cmd_noise_sweep, Run, SMOKE_CONFIG};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_box<R: Rng>(r: &mut R, n: usize, scale: f64) -> BoxSet {
    let c: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
    let h: Vec<f64> = (0..n).map(|_| r.random_range(0.0..scale)).collect();
    BoxSet::new(c.iter().zip(&h).map(|(c, h)| c - h).collect(), c.iter().zip(&h).map(|(c, h)| c + h).collect()).unwrap()
}

fn corner(b: &BoxSet, mask: usize) -> Vec<f64> {
    (0..b.dim()).map(|i| if mask >> i & 1 == 1 { b.hi[i] } else { b.lo[i] }).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn a1() -> Verdict {
    let started = Instant::now();
    let mut r = rng::stream(101, &[]);
    let mut bad = Vec::new();
    for inst in 0..1000 {
        let n = r.random_range(1..=5);
        let a = random_box(&mut r, n, 3.0);
        let b = random_box(&mut r, n, 1.0);
        // sum: every corner pair lands inside, and the extreme corners are attained
        let s = minkowski_sum(&a, &b).unwrap();
        let sum_ok = (0..1 << n).all(|m| s.contains(&add(&corner(&a, m), &corner(&b, m))))
            && (0..n).all(|i| s.lo[i] == a.lo[i] + b.lo[i] && s.hi[i] == a.hi[i] + b.hi[i])
            && (0..20).all(|_| s.contains(&add(&a.sample_uniform(&mut r), &b.sample_uniform(&mut r))));
        // difference: d + every corner of b stays in a; any larger d does not
        let bc = BoxSet::symmetric(&b.half_widths()).unwrap();
        let diff_ok = match pontryagin_diff(&a, &bc) {
            Ok(d) => {
                let inside = (0..1 << n).all(|m| (0..1 << n).all(|k| a.contains_with_slack(&add(&corner(&d, m), &corner(&bc, k)), 1e-12)));
                let maximal = (0..n).all(|i| {
                    let mut p = d.center();
                    p[i] = d.hi[i] + 1e-6;
                    let mut q = bc.center();
                    q[i] = bc.hi[i];
                    !a.contains(&add(&p, &q))
                });
                inside && maximal
            }
            Err(_) => (0..n).any(|i| a.hi[i] - a.lo[i] < bc.hi[i] - bc.lo[i]),
        };
        // linear map: images of corners and samples are contained
        let m = DMatrix::from_fn(r.random_range(1..=4), n, |_, _| r.random_range(-2.0..2.0));
        let img = linear_map_outer(&m, &a).unwrap();
        let map_ok = (0..1 << n).all(|k| img.contains_with_slack((&m * DVector::from_vec(corner(&a, k))).as_slice(), 1e-9))
            && (0..20).all(|_| img.contains_with_slack((&m * DVector::from_vec(a.sample_uniform(&mut r))).as_slice(), 1e-9));
        if !(sum_ok && diff_ok && map_ok) {
            bad.push(inst);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(bad.is_empty() && secs < 1.0, format!("1000 instances, {} violations, {secs:.3} s (limit 1 s)", bad.len()))
}

fn a2() -> Verdict {
    let started = Instant::now();
    let one = DMatrix::from_element(1, 1, 1.0);
    let (p, _) = solve_dare(&one, &one, &one, &one).unwrap();
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let golden = (p[(0, 0)] - phi).abs();
    let cfg = RunConfig::default();
    let sys = cfg.linear_system().unwrap();
    let cost = cfg.cost().unwrap();
    let (p, _) = solve_dare(&sys.a, &sys.b, &cost.q, &cost.r).unwrap();
    let res = dare_residual(&sys.a, &sys.b, &cost.q, &cost.r, &p);
    // residual recomputed here: A'PA - P - A'PB (R + B'PB)^-1 B'PA + Q
    let (a, b) = (&sys.a, &sys.b);
    let g = (&cost.r + b.transpose() * &p * b).try_inverse().unwrap();
    let own = (a.transpose() * &p * a - &p - a.transpose() * &p * b * g * b.transpose() * &p * a + &cost.q).amax();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        golden < 1e-10 && res < 1e-8 && own < 1e-8 && secs < 1.0,
        format!("golden-ratio error {golden:.1e}, multirotor residual {res:.1e} (recomputed {own:.1e}), {secs:.3} s"),
    )
}

fn a3() -> Verdict {
    let started = Instant::now();
    let err = ErrorSystem::from_box(DMatrix::from_element(1, 1, 0.5), BoxSet::symmetric(&[1.0]).unwrap());
    let b = estimate_mrpi_monte_carlo(&err, 10_000, 200, 7, DisturbanceSampling::Vertex).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let ok = (-2.0..=-1.9).contains(&b.lo[0]) && (1.9..=2.0).contains(&b.hi[0]) && secs < 5.0;
    verdict(ok, format!("estimate [{:.4}, {:.4}] vs true [-2, 2], {secs:.2} s", b.lo[0], b.hi[0]))
}

fn a4(cfg: &RunConfig) -> Verdict {
    let syn = cfg.synthesize().unwrap();
    let x = cfg.x_set().unwrap();
    let u = cfg.u_set().unwrap();
    // interval image of S_ctrl under K, computed componentwise
    let mut ok = true;
    for i in 0..NU {
        let (mut lo, mut hi) = (syn.u_bar.lo[i], syn.u_bar.hi[i]);
        for j in 0..NX {
            let k = syn.k[(i, j)];
            let (a, b) = (k * syn.s_ctrl.lo[j], k * syn.s_ctrl.hi[j]);
            lo += a.min(b);
            hi += a.max(b);
        }
        ok &= lo >= u.lo[i] - 1e-9 && hi <= u.hi[i] + 1e-9;
    }
    for i in 0..NX {
        ok &= syn.x_bar.lo[i] + syn.z.lo[i] >= x.lo[i] - 1e-9 && syn.x_bar.hi[i] + syn.z.hi[i] <= x.hi[i] + 1e-9;
    }
    let lib = tightening_is_sound(&syn, &x, &u).unwrap();
    verdict(ok && lib, format!("X_bar + Z in X and U_bar + K S_ctrl in U: {ok}, library check: {lib}"))
}

fn a5(cfg: &RunConfig) -> Verdict {
    let started = Instant::now();
    let syn = cfg.synthesize().unwrap();
    let env = Environment::from_config(cfg).unwrap();
    let reference = cfg.reference().unwrap();
    let model = DisturbanceModel { wind_band: Some(cfg.uncertainty.wind_band), noise: NoiseModel { mode: NoiseMode::Bounded, three_sigma: cfg.uncertainty.v_three_sigma } };
    let keys = episode_keys(cfg.seed + 500, 5, 20, 1);
    let res = run_batch(|| ExpertController::from_config(cfg, &syn), &env, &reference, &model, cfg.world.initial_state_half_width, &keys).unwrap();
    let full = res.iter().filter(|r| r.success && r.episode_length == cfg.world.t_max).count();
    let mut violations = 0;
    for r in &res {
        for s in &r.trace {
            if !env.x_set.contains(s.x.as_slice()) || !env.u_set.contains(s.u.as_slice()) {
                violations += 1;
            }
        }
        if !env.x_set.contains(r.final_state.as_slice()) {
            violations += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        full == 20 && violations == 0 && secs < 120.0,
        format!("{full}/20 episodes at {} steps, {violations} constraint violations, {secs:.1} s (limit 120 s)", cfg.world.t_max),
    )
}

struct LearningRuns {
    curves: BTreeMap<String, Vec<CurvePoint>>,
    dagger_tn: PolicyParams,
    secs: f64,
}

fn learning_runs(cfg: &RunConfig) -> LearningRuns {
    let started = Instant::now();
    let syn = cfg.synthesize().unwrap();
    let env = Environment::from_config(cfg).unwrap();
    let reference = cfg.reference().unwrap();
    let targets: Vec<EvalTarget> = [TargetEnv::Noise, TargetEnv::NoiseWind].iter().map(|&t| EvalTarget::new(cfg, &syn, &env, &reference, t, false).unwrap()).collect();
    let s = Session { cfg, syn: &syn, env: &env, reference: &reference };
    let m = |learner, augmentation, n_samples| MethodSpec { learner, augmentation, n_samples };
    let methods = [
        m(Learner::Bc, Augmentation::TubeNerf, 100),
        m(Learner::Dagger, Augmentation::TubeNerf, 100),
        m(Learner::Bc, Augmentation::None, 0),
        m(Learner::Dagger, Augmentation::None, 0),
    ];
    let mut curves = BTreeMap::new();
    let mut dagger_tn = None;
    for method in &methods {
        // one round with a single demonstration, the same seeds for every method
        let out = s.run_method(method, 1, 1, &targets, |p| eprintln!("  {} [{}]: success {:.1}%", p.method, p.env, p.success_rate)).unwrap();
        if method.learner == Learner::Dagger && method.augmentation == Augmentation::TubeNerf {
            dagger_tn = Some(out.policy.clone());
        }
        curves.insert(method.name(), out.curve);
    }
    LearningRuns { curves, dagger_tn: dagger_tn.unwrap(), secs: started.elapsed().as_secs_f64() }
}

fn point<'a>(runs: &'a LearningRuns, method: &str, env: TargetEnv) -> &'a CurvePoint {
    runs.curves[method].iter().rfind(|p| p.env == env.name()).unwrap()
}

fn a6(runs: &LearningRuns) -> Verdict {
    let sr = |m| point(runs, m, TargetEnv::NoiseWind).success_rate;
    let (tb, td, b, d) = (sr("BC+TN-100"), sr("DAgger+TN-100"), sr("BC"), sr("DAgger"));
    verdict(
        tb >= 90.0 && td >= 90.0 && b <= 50.0 && d <= 50.0 && runs.secs < 1800.0,
        format!("noise+wind after 1 demo: BC+TN-100 {tb:.1}%, DAgger+TN-100 {td:.1}%, BC {b:.1}%, DAgger {d:.1}%; {:.0} s (limit 1800 s)", runs.secs),
    )
}

fn a7(runs: &LearningRuns) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for env in [TargetEnv::Noise, TargetEnv::NoiseWind] {
        let bc = point(runs, "BC", env).expert_gap;
        for m in ["BC+TN-100", "DAgger+TN-100"] {
            let g = point(runs, m, env).expert_gap;
            ok &= matches!(g, Some(g) if g <= 25.0);
            if let (Some(g), Some(b)) = (g, bc) {
                ok &= g < b;
            }
            parts.push(format!("{m} [{}] {}", env.name(), g.map_or("undefined".into(), |g| format!("{g:.1}%"))));
        }
        parts.push(format!("BC [{}] {}", env.name(), bc.map_or("undefined".into(), |g| format!("{g:.1}%"))));
    }
    verdict(ok, parts.join(", "))
}

fn a8_a9(cfg: &RunConfig) -> (Verdict, Verdict) {
    let syn = cfg.synthesize().unwrap();
    let env = Environment::from_config(cfg).unwrap();
    let reference = cfg.reference().unwrap();
    let s = Session { cfg, syn: &syn, env: &env, reference: &reference };
    let mut db = tubelab::vision::ObservationDatabase::new();
    let (demo, _, _) = s.demonstration(Learner::Bc, Augmentation::TubeNerf, 1.0, None, 0, 0, &mut db).unwrap();
    let ctx = AugmentContext { syn: &syn, db: &db, da: &cfg.da, scene: &env.scene, u_set: &env.u_set, reference_indices: &cfg.network.reference_indices };
    let (samples, counts) = augment_demonstration(&demo, &ctx, cfg.seed, &[0, 0]).unwrap();
    let plan: BTreeMap<usize, _> = demo.records.iter().map(|r| (r.t, r)).collect();
    let (mut outside, mut mislabeled) = (0, 0);
    for smp in &samples {
        let rec = plan[&smp.t];
        let dx = smp.state - rec.x_bar_star;
        if (0..NX).any(|i| dx[i] < syn.z.lo[i] || dx[i] > syn.z.hi[i]) {
            outside += 1;
        }
        let u: Vec<f64> = (0..NU)
            .map(|i| {
                let fb: f64 = (0..NX).map(|j| syn.k[(i, j)] * dx[j]).sum();
                (rec.u_bar_star[i] + fb).clamp(env.u_set.lo[i], env.u_set.hi[i])
            })
            .collect();
        if (0..NU).any(|i| (u[i] - smp.action[i]).abs() > 1e-12) {
            mislabeled += 1;
        }
    }
    let n = samples.len();
    let real_total = samples.iter().filter(|s| s.origin == SampleOrigin::RealDb).count();
    let a8 = verdict(outside == 0 && mislabeled == 0 && n > 0, format!("{n} samples: {outside} outside x_bar* + Z, {mislabeled} labels differ from the recomputed saturated law (|du| > 1e-12)"));

    let cap = (cfg.da.epsilon_bar * cfg.da.n_samples as f64).floor() as usize;
    let mut per_t: BTreeMap<usize, usize> = BTreeMap::new();
    for smp in samples.iter().filter(|s| s.origin == SampleOrigin::RealDb) {
        *per_t.entry(smp.t).or_default() += 1;
    }
    let bad = counts
        .iter()
        .filter(|c| c.n_real > cap || c.n_real + c.n_synthetic != cfg.da.n_samples || per_t.get(&c.t).copied().unwrap_or(0) != c.n_real)
        .count();
    let a9 = verdict(
        bad == 0 && counts.len() == demo.records.len(),
        format!("{} timesteps, cap {cap} real of {}, {real_total} real samples in total, {bad} timesteps break the law", counts.len(), cfg.da.n_samples),
    );
    (a8, a9)
}

fn a10() -> Verdict {
    let arch = Architecture { image_pixels: 6, image_hidden: 4, embedding: 3, use_image: true, reference_indices: vec![0, 2], fusion_hidden: 5, fusion_out: 4 };
    let mut worst: f64 = 0.0;
    for point in 0..5u64 {
        let p = PolicyParams::init(arch.clone(), Normalization::identity(), 40 + point);
        let mut r = rng::stream(90 + point, &[]);
        let mut m = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
        let inp = Inputs { image: m(arch.image_pixels, 4), aux: m(arch.aux_len(), 4) };
        let (tu, tx) = (m(NU, 4), m(NX, 4));
        let (_, grads) = p.loss_and_grad(&inp, &tu, &tx, 0.1);
        let analytic: Vec<f64> = grads.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>()).collect();
        let theta = p.flat();
        let mut q = p.clone();
        for i in 0..theta.len() {
            let h = 1e-5;
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            q.set_flat(&t).unwrap();
            let up = q.loss(&inp, &tu, &tx, 0.1);
            t[i] = theta[i] - h;
            q.set_flat(&t).unwrap();
            let down = q.loss(&inp, &tu, &tx, 0.1);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6));
        }
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 5 parameter points"))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            out[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn a11(cfg: &RunConfig, policy: &PolicyParams, dir: &Path) -> Verdict {
    let started = Instant::now();
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("policy.tlp");
    let mut buf = Vec::new();
    policy.write_binary(&mut buf, &serde_json::json!({})).unwrap();
    std::fs::write(&path, buf).unwrap();
    let run = Run::new(cfg.clone(), dir, false).unwrap();
    let rows = cmd_noise_sweep(&run, &path).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in ["gaussian_noise", "gaussian_blur"] {
        let series: Vec<_> = rows.iter().filter(|r| r.kind == kind).collect();
        let mags: Vec<f64> = series.iter().map(|r| r.magnitude).collect();
        let rms: Vec<f64> = series.iter().map(|r| r.rms_xyz).collect();
        let rho = spearman(&mags, &rms);
        let last = series.last().unwrap();
        ok &= rho > 0.0;
        parts.push(format!("{kind}: rho {rho:.3}, success {:.0}% at {}", last.success_rate, last.magnitude));
        if kind == "gaussian_noise" {
            ok &= last.success_rate == 0.0;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    verdict(ok, format!("{}; {secs:.0} s (limit 300 s)", parts.join("; ")))
}

fn csv_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn a12(dir: &Path) -> Verdict {
    let cfg = RunConfig::from_toml(SMOKE_CONFIG).unwrap();
    let mut outputs = Vec::new();
    let mut all_ok = true;
    for k in 0..2 {
        let run = Run::new(cfg.clone(), dir.join(format!("run{k}")), false).unwrap();
        all_ok &= cmd_experiment(&run).unwrap().all_ok;
        outputs.push(csv_files(&run.out));
    }
    let same = outputs[0] == outputs[1];
    verdict(
        same && all_ok && outputs[0].contains_key("fig4_curves.csv") && outputs[0].contains_key("table2.csv"),
        format!("{} CSV files compared, identical: {same}, all cells ok: {all_ok}", outputs[0].len()),
    )
}

fn main() {
    let cfg = RunConfig::default();
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, &str, Verdict)> = Vec::new();
    let mut report = |id, name, v: Verdict| {
        println!("{id} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, name, v));
    };
    report("A1", "set algebra oracle equivalence", a1());
    report("A2", "DARE correctness", a2());
    report("A3", "Monte-Carlo mRPI estimate", a3());
    report("A4", "tightening soundness", a4(&cfg));
    report("A5", "expert robustness", a5(&cfg));
    let runs = learning_runs(&cfg);
    report("A6", "one-demonstration success", a6(&runs));
    report("A7", "expert gap", a7(&runs));
    let (v8, v9) = a8_a9(&cfg);
    report("A8", "tube containment of augmented data", v8);
    report("A9", "real/synthetic ratio law", v9);
    report("A10", "gradient check", a10());
    report("A11", "visual corruption sweep", a11(&cfg, &runs.dagger_tn, &tmp.path().join("sweep")));
    report("A12", "determinism", a12(&tmp.path().join("smoke")));
    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
