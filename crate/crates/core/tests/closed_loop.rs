//! Episode-level properties of the simulator and the expert.

use tubelab::config::{NoiseMode, PlantMode, RunConfig};
use tubelab::model::State;
use tubelab::world::{run_episode, DisturbanceModel, DisturbanceRealization, Environment, ExpertController, NoiseModel};

fn positions_rms(a: &[State], b: &[State]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p.fixed_rows::<3>(0) - q.fixed_rows::<3>(0)).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

#[test]
fn linear_and_nonlinear_plants_agree_on_the_lemniscate() {
    let mut states = Vec::new();
    let mut rms = Vec::new();
    for plant in [PlantMode::Linear, PlantMode::Nonlinear] {
        let mut cfg = RunConfig::default();
        cfg.world.plant = plant;
        let syn = cfg.synthesize().unwrap();
        let env = Environment::from_config(&cfg).unwrap();
        let reference = cfg.reference().unwrap();
        let mut c = ExpertController::from_config(&cfg, &syn).unwrap();
        let res = run_episode(&mut c, &env, &reference, &DisturbanceRealization::calm(), &State::zeros(), cfg.world.t_max).unwrap();
        assert!(res.success);
        rms.push(res.rms_xyz);
        states.push(res.trace.iter().map(|s| s.x).collect::<Vec<_>>());
    }
    assert!((rms[0] - rms[1]).abs() < 0.2, "{rms:?}");
    assert!(positions_rms(&states[0], &states[1]) < 0.2, "{}", positions_rms(&states[0], &states[1]));
}

#[test]
fn episodes_are_deterministic_and_bounded() {
    let cfg = RunConfig::default();
    let syn = cfg.synthesize().unwrap();
    let env = Environment::from_config(&cfg).unwrap();
    let reference = cfg.reference().unwrap();
    let model = DisturbanceModel { wind_band: Some(cfg.uncertainty.wind_band), noise: NoiseModel { mode: NoiseMode::Gaussian, three_sigma: cfg.uncertainty.v_three_sigma } };
    let dist = model.realize(cfg.model.weight(), 5, &[1, 2]);
    let run = |t_max| {
        let mut c = ExpertController::from_config(&cfg, &syn).unwrap();
        run_episode(&mut c, &env, &reference, &dist, &State::zeros(), t_max).unwrap()
    };
    let (a, b) = (run(cfg.world.t_max), run(cfg.world.t_max));
    assert_eq!(a, b);
    assert!(a.episode_length <= cfg.world.t_max);
    assert_eq!(a.success, a.episode_length == cfg.world.t_max);
    let short = run(40);
    assert_eq!(short.episode_length, 40);
    assert_eq!(short.trace[..], a.trace[..40]);
}
