use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tubelab::config::{Augmentation, Learner, MethodSpec, RunConfig, TargetEnv};
use tubelab::learn::dagger::CURVE_HEADER;
use tubelab::vision::ObservationDatabase;
use tubelab_cli::{config_hash, load_policy, DEFAULT_CONFIG, SMOKE_CONFIG, SWEEP_HEADER, TABLE_HEADER};

fn tubelab(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tubelab"));
    c.args(args).arg("--out").arg(out);
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.output().expect("binary runs")
}

/// Smoke configuration cut down to one round and one cheap method.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig::from_toml(SMOKE_CONFIG).unwrap();
    cfg.experiment.rounds = 1;
    cfg.experiment.methods = vec![MethodSpec { learner: Learner::Bc, augmentation: Augmentation::None, n_samples: 0 }];
    cfg.sweep.noise_magnitudes = vec![0.0, 0.4];
    cfg.sweep.blur_magnitudes = vec![2.0];
    cfg.sweep.episodes = 1;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

/// Comment lines, then the CSV header row and data rows.
fn split_csv(text: &str) -> (Vec<String>, Vec<String>, Vec<Vec<String>>) {
    let comments: Vec<String> = text.lines().take_while(|l| l.starts_with("# ")).map(String::from).collect();
    let body: String = text.lines().skip(comments.len()).map(|l| format!("{l}\n")).collect();
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (comments, header, rows)
}

fn stamp(cfg: &RunConfig) -> String {
    format!("config_hash={} seed={}", config_hash(cfg).unwrap(), cfg.seed)
}

#[test]
fn checked_in_defaults_match_builtin_defaults() {
    assert_eq!(RunConfig::from_toml(DEFAULT_CONFIG).unwrap(), RunConfig::default());
    RunConfig::from_toml(SMOKE_CONFIG).unwrap().validate().unwrap();
}

#[test]
fn synth_is_stamped_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = tubelab(&["synth", "--seed", "3"], None, d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(a.join("synthesis.json")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("synthesis.json")).unwrap());
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["comment"].as_str().unwrap().contains(&stamp(&cfg)));
    assert!(v["z"]["lo"].is_array() && v["k"].is_array());
}

#[test]
fn bad_configuration_exits_with_setup_code() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "seed = 1\n[control]\nhorizon = 0\n").unwrap();
    let o = tubelab(&["synth"], Some(&p), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(&p, "no_such_key = 1\n").unwrap();
    assert_eq!(tubelab(&["synth"], Some(&p), tmp.path()).status.code(), Some(2));
}

#[test]
fn missing_policy_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let o = tubelab(&["eval", "--policy", "nowhere.tlp"], Some(&cfg), tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.tlp"));
    let o = tubelab(&["noise-sweep"], Some(&cfg), tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("policy.tlp"));
}

#[test]
fn demo_writes_images_and_index() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let path = write_config(tmp.path(), &cfg);
    let o = tubelab(&["demo"], Some(&path), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("demo");
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    let images = metrics["images"].as_u64().unwrap() as usize;
    assert_eq!(images, metrics["episode_length"].as_u64().unwrap() as usize);
    assert_eq!(images, cfg.world.t_max);
    let pgms = fs::read_dir(dir.join("db")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, images);
    let first = fs::read(dir.join("db/obs_000000.pgm")).unwrap();
    assert!(first.starts_with(b"P5\n# tubelab demo\n"));
    let dims = format!("\n{} {}\n255\n", cfg.camera.width, cfg.camera.height);
    assert!(first.windows(dims.len()).any(|w| w == dims.as_bytes()));
    assert!(first.len() > cfg.camera.width * cfg.camera.height);
    let db = ObservationDatabase::load(&dir.join("db")).unwrap();
    assert_eq!(db.len(), images);
    let (comments, header, rows) = split_csv(&fs::read_to_string(dir.join("trace.csv")).unwrap());
    assert!(comments.iter().any(|c| c.contains(&stamp(&cfg))));
    assert_eq!(header[0], "t");
    assert_eq!(rows.len(), images);
}

#[test]
fn experiment_tables_and_eval_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let path = write_config(tmp.path(), &cfg);
    let o = tubelab(&["experiment"], Some(&path), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let (comments, header, rows) = split_csv(&fs::read_to_string(tmp.path().join("fig4_curves.csv")).unwrap());
    assert!(comments.iter().any(|c| c.contains(&stamp(&cfg))));
    assert_eq!(header, CURVE_HEADER);
    assert_eq!(rows.len(), cfg.experiment.rounds * cfg.experiment.envs.len());
    for r in &rows {
        assert_eq!(r[0], "BC");
        assert_eq!(r[6], "ok");
        let len: f64 = r[4].parse().unwrap();
        assert!(len > 0.0 && len <= cfg.world.t_max as f64);
        assert!(r[3].parse::<f64>().unwrap() > 0.0);
    }
    let (comments, header, rows) = split_csv(&fs::read_to_string(tmp.path().join("table2.csv")).unwrap());
    assert!(comments.iter().any(|c| c.contains(&stamp(&cfg))));
    assert_eq!(header, TABLE_HEADER);
    assert_eq!(rows.len(), cfg.experiment.envs.len());
    for r in &rows {
        assert!((0.0..=100.0).contains(&r[2].parse::<f64>().unwrap()));
        assert!(r[4] == "NA" || r[4].parse::<usize>().is_ok());
    }
    assert!(tmp.path().join("cells/bc.csv").exists());

    // expert evaluation reproduces the experiment's baseline
    let eval_dir = tmp.path().join("eval");
    let o = tubelab(&["eval"], Some(&path), &eval_dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let base: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("expert_baseline.json")).unwrap()).unwrap();
    for (i, t) in [TargetEnv::Noise, TargetEnv::NoiseWind].iter().enumerate() {
        let slug = tubelab_cli::slug(t.name());
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join(format!("eval_expert_{slug}.json"))).unwrap()).unwrap();
        let b = &base["environments"][i];
        assert_eq!(b["env"], t.name());
        for k in ["episodes", "success_rate", "mean_episode_length", "mean_stage_cost"] {
            assert_eq!(m[k], b["metrics"][k], "{k}");
        }
    }
    let again = tmp.path().join("eval2");
    assert!(tubelab(&["eval"], Some(&path), &again).status.success());
    for f in ["eval_expert_noise.json", "eval_expert_noise_wind_trace.csv"] {
        assert_eq!(fs::read(eval_dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_evaluate_and_sweep_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let path = write_config(tmp.path(), &cfg);
    let o = tubelab(&["train"], Some(&path), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let policy = tmp.path().join("policy.tlp");
    let p = load_policy(&policy).unwrap();
    assert!(p.is_finite());
    let (_, header, rows) = split_csv(&fs::read_to_string(tmp.path().join("train_curve.csv")).unwrap());
    assert_eq!(header, CURVE_HEADER);
    assert_eq!(rows.len(), cfg.experiment.rounds * cfg.experiment.envs.len());

    let o = tubelab(&["eval", "--policy", policy.to_str().unwrap()], Some(&path), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("eval_policy_noise_wind.json").exists());

    let o = tubelab(&["noise-sweep"], Some(&path), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (comments, header, rows) = split_csv(&fs::read_to_string(tmp.path().join("noise_sweep.csv")).unwrap());
    assert!(comments.iter().any(|c| c.contains(&stamp(&cfg))));
    assert_eq!(header, SWEEP_HEADER);
    let kinds: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(kinds, [("clean", "0"), ("gaussian_noise", "0"), ("gaussian_noise", "0.4"), ("gaussian_blur", "2")]);
    assert_eq!(rows[0][2], "inf");
    assert!(rows[2][2].parse::<f64>().unwrap().is_finite());
}
