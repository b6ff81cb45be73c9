use rselayer::learn::{gradient_check, toy_check_sample, TrainConfig};

#[test]
fn toy_gradients_match_finite_differences() {
    for seed in 0..6 {
        let (model, meta, z, target) = toy_check_sample(seed).unwrap();
        let cfg = TrainConfig {
            delta: 1e-2,
            seed: 11 + seed,
            ..TrainConfig::default()
        };
        let rep = gradient_check(&model, &meta, &z, &target, &cfg, 1e-5).unwrap();
        for g in &rep.groups {
            println!(
                "seed {seed} {:<16} n={:<4} |g|={:.3e} rel={:.3e}",
                g.name, g.n, g.norm, g.rel_error
            );
        }
        assert!(!rep.degenerate);
        assert!(
            rep.groups[0].norm > 1e-6,
            "seed {seed}: weights have no effect"
        );
        assert!(
            rep.max_rel_error < 1e-3,
            "seed {seed}: max rel error {:.3e}",
            rep.max_rel_error
        );
    }
}
