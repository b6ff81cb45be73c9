use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rselayer::conic::{self, in_cone, ConicSolver, SolveStatus, SolverSettings};
use rselayer::conic_diff::{polish, random, OmegaSystem, SolutionJacobianSeed};
use rselayer::sparse::dot;
use rselayer::ConicProgram;

fn solve_polished(solver: &mut ConicSolver, prog: &ConicProgram) -> rselayer::ConicSolution {
    let sol = solver.solve(prog).unwrap();
    assert_eq!(
        sol.status,
        SolveStatus::Optimal,
        "{:?} after {}",
        sol.residuals,
        sol.iterations
    );
    polish(prog, &sol)
}

fn loss(seed: &SolutionJacobianSeed, sol: &rselayer::ConicSolution) -> f64 {
    dot(&seed.dl_dx, &sol.x) + dot(&seed.dl_dy, &sol.y) + dot(&seed.dl_ds, &sol.s)
}

#[test]
fn planted_programs_solve_to_planted_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut solver = ConicSolver::new(SolverSettings::default());
    for _ in 0..50 {
        let (prog, planted) = random::planted_program(&mut rng, 12);
        let sol = solver.solve(&prog).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.residuals.max() <= 1e-8);
        let sy = dot(&sol.s, &sol.y);
        let ns = sol.s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = sol.y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(sy <= 1e-6 * (1.0 + ns * ny));
        assert!(in_cone(&sol.s, &prog.cones, false, 1e-9));
        assert!(in_cone(&sol.y, &prog.cones, true, 1e-9));
        let p = prog.n_vars();
        for (a, b) in sol.x.iter().zip(&planted[..p]) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut solver = ConicSolver::new(SolverSettings::default());
    let h = 1e-6;
    for _ in 0..100 {
        let (prog, _) = random::planted_program(&mut rng, 12);
        let sol = solve_polished(&mut solver, &prog);
        let sys = OmegaSystem::new(&prog, &sol).unwrap();
        let (p, d) = sys.dims();
        let mut g = |n| {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let seed = SolutionJacobianSeed {
            dl_dx: g(p),
            dl_dy: g(d),
            dl_ds: g(d),
        };
        let grad = sys.adjoint_derivative(&seed).unwrap();
        let mut check = |analytic: f64, perturb: &dyn Fn(&mut ConicProgram, f64)| {
            let mut central = |h: f64| {
                let mut up = prog.clone();
                perturb(&mut up, h);
                let mut dn = prog.clone();
                perturb(&mut dn, -h);
                (loss(&seed, &solve_polished(&mut solver, &up))
                    - loss(&seed, &solve_polished(&mut solver, &dn)))
                    / (2.0 * h)
            };
            // Richardson extrapolation removes the O(h²) term
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let tol = (1e-4 * fd.abs()).max(1e-6);
            assert!(
                (fd - analytic).abs() <= tol,
                "fd {fd} vs analytic {analytic}"
            );
        };
        for k in 0..prog.a.nnz() {
            check(grad.da.values[k], &|pr, e| pr.a.values[k] += e);
        }
        for i in 0..d {
            check(grad.db[i], &|pr, e| pr.b[i] += e);
        }
        for j in 0..p {
            check(grad.dc[j], &|pr, e| pr.c[j] += e);
        }
    }
}

#[test]
fn joint_scaling_of_b_and_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut solver = ConicSolver::new(SolverSettings::default());
    for _ in 0..20 {
        let (prog, _) = random::planted_program(&mut rng, 10);
        let lam = 3.0;
        let mut scaled = prog.clone();
        scaled.b.iter_mut().for_each(|v| *v *= lam);
        scaled.c.iter_mut().for_each(|v| *v *= lam);
        let s1 = solve_polished(&mut solver, &prog);
        let s2 = solve_polished(&mut solver, &scaled);
        // x scales with b, y with c; the direction of x is unchanged
        for (a, b) in s1.x.iter().zip(&s2.x) {
            assert!((lam * a - b).abs() < 1e-7 * (1.0 + b.abs()));
        }
        let (p, d) = (prog.n_vars(), prog.n_rows());
        let seed = SolutionJacobianSeed {
            dl_dx: vec![1.0; p],
            dl_dy: vec![0.0; d],
            dl_ds: vec![0.0; d],
        };
        let g1 = OmegaSystem::new(&prog, &s1)
            .unwrap()
            .adjoint_derivative(&seed)
            .unwrap();
        let g2 = OmegaSystem::new(&scaled, &s2)
            .unwrap()
            .adjoint_derivative(&seed)
            .unwrap();
        // x*(λb, λc) = λ x*(b, c): ∂/∂b is scale-free, ∂/∂A picks up λ
        for (a, b) in g1.db.iter().zip(&g2.db) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
        }
        for (a, b) in g1.da.values.iter().zip(&g2.da.values) {
            assert!((lam * a - b).abs() < 1e-6 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn repeated_solves_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let (prog, _) = random::planted_program(&mut rng, 12);
        let a = conic::solve(&prog, 1e-8, 100).unwrap();
        let b = ConicSolver::default().solve(&prog).unwrap();
        let mut warm = ConicSolver::default();
        warm.solve(&prog).unwrap();
        let c = warm.solve(&prog).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn dump_roundtrip_is_exact(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prog, _) = random::planted_program(&mut rng, 8);
        let back = ConicProgram::from_triplet_text(&prog.to_triplet_text()).unwrap();
        prop_assert_eq!(back, prog);
    }
}

#[test]
fn adjoint_and_forward_are_dual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut solver = ConicSolver::new(SolverSettings::default());
    for _ in 0..100 {
        let (prog, _) = random::planted_program(&mut rng, 12);
        let sol = solve_polished(&mut solver, &prog);
        let sys = OmegaSystem::new(&prog, &sol).unwrap();
        let (p, d) = sys.dims();
        let mut g = |n| {
            (0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let seed = SolutionJacobianSeed {
            dl_dx: g(p),
            dl_dy: g(d),
            dl_ds: g(d),
        };
        let da = prog.a.with_values(g(prog.a.nnz()));
        let (db, dc) = (g(d), g(p));
        let fwd = sys.forward_derivative(&da, &db, &dc).unwrap();
        let adj = sys.adjoint_derivative(&seed).unwrap();
        let lhs = dot(&seed.dl_dx, &fwd.dx) + dot(&seed.dl_dy, &fwd.dy) + dot(&seed.dl_ds, &fwd.ds);
        let rhs = dot(&adj.da.values, &da.values) + dot(&adj.db, &db) + dot(&adj.dc, &dc);
        assert!(
            (lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()),
            "{lhs} vs {rhs}"
        );
    }
}
