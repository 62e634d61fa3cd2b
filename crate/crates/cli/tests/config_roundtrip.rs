use proptest::prelude::*;

use sltmpc::mpc::{GainSynthesis, Method, TerminalKind, TubeCost};
use sltmpc::sim::DisturbanceMode;
use sltmpc_cli::{ExperimentConfig, GainSpec, SetConfig};

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

fn gain() -> impl Strategy<Value = GainSpec> {
    prop_oneof![
        Just(GainSpec::Rule(GainSynthesis::Lqr)),
        Just(GainSpec::Rule(GainSynthesis::MinTightening)),
        (finite(-2.0, 0.0), finite(-2.0, 0.0))
            .prop_map(|(a, b)| GainSpec::Matrix(vec![vec![a, b]])),
    ]
}

fn disturbance() -> impl Strategy<Value = SetConfig> {
    prop_oneof![
        (finite(0.0, 0.2), any::<bool>()).prop_map(|(h, axes)| SetConfig {
            theta_axes: axes.then(|| vec![0]),
            ..SetConfig::from_box(vec![-0.05, -h], vec![0.05, h])
        }),
        finite(0.01, 0.2).prop_map(|h| SetConfig {
            normals: Some(vec![
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, -1.0]
            ]),
            offsets: Some(vec![h, h, 0.1, 0.1]),
            ..SetConfig::default()
        }),
    ]
}

prop_compose! {
    fn config()(
        horizon in 1usize..30,
        theta in finite(0.0, 0.3),
        method in prop::sample::select(Method::ALL.to_vec()),
        terminal in prop::sample::select(vec![TerminalKind::ScaledPi, TerminalKind::FixedPolytope, TerminalKind::SteadyStateSet]),
        cost in prop::sample::select(TubeCost::ALL.to_vec()),
        rho_x in finite(0.01, 1.0),
        q in finite(0.1, 1000.0),
        r in prop::option::of(finite(0.1, 100.0)),
        gain in gain(),
        w in disturbance(),
        steps in 1usize..100,
        n_runs in 1usize..1000,
        seed in any::<u64>(),
        vertex in any::<bool>(),
        timing in any::<bool>(),
        resolution in 10usize..200,
        sweep in prop::collection::vec(finite(0.0, 0.3), 1..6),
        methods in prop::sample::subsequence(Method::ALL.to_vec(), 1..=5),
        a01 in finite(-1.0, 1.0),
        x0 in (finite(-1.0, 0.5), finite(-1.5, 1.5)),
    ) -> ExperimentConfig {
        let mut c = ExperimentConfig::benchmark();
        c.horizon = horizon;
        c.theta = theta;
        c.method = method;
        c.terminal = terminal;
        c.tube_cost = cost;
        c.rho_x = rho_x;
        c.q = Some(vec![vec![q, 0.0], vec![0.0, q]]);
        c.r = r.map(|r| vec![vec![r]]);
        c.gain = gain;
        c.system.a[0][1] = a01;
        c.system.w = w;
        c.x0 = vec![x0.0, x0.1];
        c.simulation.steps = steps;
        c.simulation.n_runs = n_runs;
        c.simulation.seed = seed;
        c.simulation.disturbance_mode = if vertex { DisturbanceMode::VertexWalk } else { DisturbanceMode::Uniform };
        c.simulation.timing = timing;
        c.roa.resolution = resolution;
        c.roa.theta_sweep = sweep;
        c.compare.methods = methods;
        c
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn load_of_serialized_config_is_identity(c in config()) {
        let text = c.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn shipped_config_round_trips() {
    let c = ExperimentConfig::benchmark();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
}

#[test]
fn omitted_fields_take_benchmark_defaults() {
    let minimal = r#"
[system]
A = [[1.05, 0.15], [0.0, 1.0]]
B = [[0.5], [0.5]]
X = { lower = [-1.0, -1.5], upper = [0.5, 1.5] }
U = { lower = [-0.5], upper = [0.5] }
W = { lower = [-0.04, -0.1], upper = [0.04, 0.1], theta_axes = [0] }
"#;
    let c = ExperimentConfig::from_toml(minimal).unwrap();
    let mut shipped = ExperimentConfig::benchmark();
    shipped.q = None;
    shipped.r = None;
    assert_eq!(c, shipped);
}
