use mvfbdsde_cli::{Command, Scenario, ScenarioConfig};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = ScenarioConfig> {
    (
        prop::sample::select(Scenario::ALL.to_vec()),
        prop::sample::select(Command::ALL.to_vec()),
        2usize..5000,
        2usize..100_000,
        any::<u64>(),
        (1e-3f64..=1.0, 1e-16f64..1.0, 1e-3f64..=1.0),
        prop::option::of(0.1f64..10.0),
        prop::collection::vec(-1e6f64..1e6, 13),
        0usize..64,
    )
        .prop_map(|(scenario, command, steps, particles, seed, (delta, tol, damping), horizon, lq, threads)| {
            let mut c = ScenarioConfig::defaults(scenario);
            c.command = command;
            c.steps = steps;
            c.particles = particles;
            c.seed = seed;
            c.delta = delta;
            c.tol = tol;
            c.damping = damping;
            c.override_horizon = horizon;
            c.theta1 = lq[0];
            c.ridge = lq[1].abs();
            c.x = vec![lq[2]; c.dims.d];
            c.lq.k = lq[3];
            c.lq.s_bar = lq[4];
            c.lq.horizon = lq[5].abs() + 0.1;
            c.threads = threads;
            if let Some(m) = c.model.as_mut() {
                m.k[0] = lq[6];
                m.h_offset[0] = lq[7];
            }
            c
        })
}

proptest! {
    #[test]
    fn parse_serialize_parse_is_identity(c in config()) {
        let text = c.serialize();
        let back = ScenarioConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.serialize(), text);
    }
}
