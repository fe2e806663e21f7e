//! Randomized invariants of the discretization, the weights and the solvers.

use nullcontrol::hum::{assemble_functional, minimize_cg, solve_null_control, ControlProblem, Direction, HumConfig};
use nullcontrol::scenario::{
    conditional_mean, measurability_probe, sample_adapted_coefficients, sample_adapted_field, sample_spatial_field,
};
use nullcontrol::spde::{BackwardProblem, Coefficients, Stepper};
use nullcontrol::weights::{Layout, PowerSpec, Slot, WeightParams, WeightSystem, WeightVariant};
use nullcontrol::{expectation, martingale_coefficient, AdaptedField, ScenarioTree, SpatialMesh};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mesh(m: usize) -> SpatialMesh {
    SpatialMesh::new(0.0, 1.0, m, (0.2, 0.9), (0.3, 0.8)).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_field(tree: &ScenarioTree, m: usize, rng: &mut ChaCha8Rng) -> AdaptedField {
    AdaptedField::from_fn(tree, m, |_, _| rng.random_range(-1.0..1.0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Coefficients that depend on the depth only, so conditional expectations
/// commute with the solvers.
fn depth_only_coeffs(tree: &ScenarioTree, mesh: &SpatialMesh, seed: u64) -> Coefficients {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels: Vec<Vec<f64>> =
        (0..=tree.n_steps).map(|_| (0..mesh.m).map(|_| rng.random_range(0.5..1.5)).collect()).collect();
    let a = AdaptedField::from_fn(tree, mesh.m, |n, i| levels[ScenarioTree::depth_of(n)][i]);
    Coefficients::with_diffusion(a, 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn diffusion_operator_is_symmetric_and_coercive(m in 5usize..40, seed in any::<u64>()) {
        let mesh = mesh(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c0 = 0.5;
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(c0..c0 + 2.0)).collect();
        let u = random_vec(&mut rng, m);
        let v = random_vec(&mut rng, m);
        let au = mesh.div_a_grad(&a, &u, c0).unwrap();
        let av = mesh.div_a_grad(&a, &v, c0).unwrap();
        let (uav, vau) = (mesh.l2_inner(&u, &av), mesh.l2_inner(&v, &au));
        prop_assert!((uav - vau).abs() <= 1e-12 * uav.abs().max(vau.abs()).max(1.0));
        let energy = -mesh.l2_inner(&u, &au);
        let h1 = mesh.h1_seminorm(&u);
        prop_assert!(energy >= c0 * h1 * h1 * (1.0 - 1e-12));
    }

    #[test]
    fn gradient_is_skew(m in 5usize..60, seed in any::<u64>()) {
        let mesh = mesh(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_vec(&mut rng, m);
        let b = random_vec(&mut rng, m);
        let lhs = mesh.l2_inner(&mesh.gradient(&u).unwrap(), &b);
        let rhs = -mesh.l2_inner(&u, &mesh.divergence(&b).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn tower_property(n in 1usize..7, seed in any::<u64>()) {
        let tree = ScenarioTree::new(n, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = random_field(&tree, 3, &mut rng);
        let direct = expectation(&f, &tree, n).unwrap();
        // fold leaves into conditional means one level at a time
        for depth in (0..n).rev() {
            for node in tree.depth_range(depth) {
                let mean = conditional_mean(&f, node);
                f.node_mut(node).copy_from_slice(&mean);
            }
            let folded = expectation(&f, &tree, depth).unwrap();
            for (a, b) in folded.iter().zip(&direct) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn discrete_ito_isometry(n in 1usize..9, seed in any::<u64>()) {
        let tree = ScenarioTree::new(n, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..tree.interior_count()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut integral = vec![0.0; tree.node_count()];
        for node in 1..tree.node_count() {
            let p = ScenarioTree::parent(node).unwrap();
            integral[node] = integral[p] + z[p] * tree.increment(node);
        }
        let lhs: f64 = tree.depth_range(n).map(|l| integral[l].powi(2)).sum::<f64>() * ScenarioTree::probability(n);
        let rhs: f64 = (0..tree.interior_count())
            .map(|p| ScenarioTree::probability(ScenarioTree::depth_of(p)) * z[p] * z[p] * tree.dt)
            .sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1e-300));
    }

    #[test]
    fn martingale_coefficient_reconstructs_children(
        up in prop::collection::vec(-5.0f64..5.0, 4),
        down in prop::collection::vec(-5.0f64..5.0, 4),
        n in 1usize..10,
    ) {
        let tree = ScenarioTree::new(n, 0.9).unwrap();
        let z = martingale_coefficient(&up, &down, tree.dt);
        let (u_node, d_node) = ScenarioTree::children(0);
        for i in 0..4 {
            let mean = 0.5 * (up[i] + down[i]);
            prop_assert!((mean + z[i] * tree.increment(u_node) - up[i]).abs() <= 1e-12);
            prop_assert!((mean + z[i] * tree.increment(d_node) - down[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_weights_are_finite_and_linear(
        lambda in 1.0f64..4.0,
        mu in 1.0f64..3.0,
        m_exp in 1.0f64..2.0,
        backward in any::<bool>(),
        a in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
        b in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
    ) {
        let mesh = mesh(17);
        let tree = ScenarioTree::new(4, 0.5).unwrap();
        let variant = if backward { WeightVariant::BackwardRegularized } else { WeightVariant::ForwardRegularized };
        let params = WeightParams::new(lambda, mu, m_exp, 0.5, variant, 0.01).unwrap();
        let sys = WeightSystem::new(params, &mesh, &tree).unwrap();
        let sa = PowerSpec::new(a.0, a.1, a.2, a.3);
        let sb = PowerSpec::new(b.0, b.1, b.2, b.3);
        let sum = PowerSpec::new(a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3);
        for k in 0..tree.n_steps {
            let slot = Slot::Step(k);
            for i in 0..mesh.m {
                prop_assert!(sys.ell(slot)[i] < 0.0);
                prop_assert!(sys.log_xi(slot)[i].is_finite());
                let wa = sys.log_weight(slot, i, &sa).unwrap();
                let wb = sys.log_weight(slot, i, &sb).unwrap();
                let ws = sys.log_weight(slot, i, &sum).unwrap();
                prop_assert!((wa + wb - ws).abs() <= 1e-9 * (wa.abs() + wb.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn weighted_norm_scales_and_satisfies_triangle(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mesh = mesh(9);
        let tree = ScenarioTree::new(3, 0.5).unwrap();
        let params = WeightParams::new(1.0, 1.0, 1.0, 0.5, WeightVariant::BackwardRegularized, 0.01).unwrap();
        let sys = WeightSystem::new(params, &mesh, &tree).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_field(&tree, mesh.m, &mut rng);
        let v = random_field(&tree, mesh.m, &mut rng);
        let spec = PowerSpec::new(1.0, 2.0, 1.0, 0.0);
        let norm = |f: &AdaptedField| sys.weighted_expectation_norm(f, &spec, Layout::Parent, None).unwrap();
        let (nu, nv) = (norm(&u), norm(&v));
        prop_assert!((norm(&u.scaled(c)) - nu - 2.0 * c.ln()).abs() <= 1e-10);
        let mut w = u.clone();
        w.axpy(1.0, &v);
        // norms are logs of squares, so the triangle inequality reads on their square roots
        let root = |l: f64| (0.5 * l).exp();
        prop_assert!(root(norm(&w)) <= (root(nu) + root(nv)) * (1.0 + 1e-12));
    }

    #[test]
    fn forward_solution_is_adapted(seed in any::<u64>(), theta in 0.5f64..=1.0) {
        let mesh = mesh(11);
        let tree = ScenarioTree::new(4, 0.5).unwrap();
        let a = sample_adapted_coefficients(&tree, &mesh, seed, 0.5, 1.5, 0.5).unwrap();
        let stepper = Stepper::new(&tree, &mesh, Coefficients::with_diffusion(a, 0.5), theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let forcing = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let noise = sample_adapted_field(&tree, &mesh, &mut rng, 0.5);
        let z0 = sample_spatial_field(&mesh, &mut rng, 1.0);
        let z = stepper.solve_forward(&z0, &forcing, Some(&noise)).unwrap();
        let step = |p: usize, v: &[f64], child: usize| stepper.forward_step(p, v, child, &forcing, Some(&noise));
        prop_assert!(measurability_probe(&z, &tree, 1e-13, step));
        // a perturbed leaf is no longer consistent with its parent
        let mut broken = z.clone();
        let leaf = tree.depth_range(tree.n_steps).start;
        broken.node_mut(leaf)[3] += 1e-3;
        prop_assert!(!measurability_probe(&broken, &tree, 1e-13, step));
    }

    #[test]
    fn forward_backward_duality(seed in any::<u64>(), theta in 0.5f64..=1.0, n in 1usize..6) {
        let mesh = mesh(13);
        let tree = ScenarioTree::new(n, 0.5).unwrap();
        let a = sample_adapted_coefficients(&tree, &mesh, seed, 0.5, 1.5, 0.5).unwrap();
        let stepper = Stepper::new(&tree, &mesh, Coefficients::with_diffusion(a, 0.5), theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let zero = AdaptedField::zeros(&tree, mesh.m);
        let noise = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let z0 = sample_spatial_field(&mesh, &mut rng, 1.0);
        let terminal = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let z = stepper.solve_forward(&z0, &zero, Some(&noise)).unwrap();
        let r = stepper.solve_backward(&terminal, &zero).unwrap();
        let pair = |depth: usize| -> f64 {
            tree.depth_range(depth).map(|node| mesh.l2_inner(z.node(node), r.state.node(node))).sum::<f64>()
                * ScenarioTree::probability(depth)
        };
        let lhs = pair(n) - pair(0);
        let cross: f64 = (0..tree.interior_count())
            .map(|p| {
                ScenarioTree::probability(ScenarioTree::depth_of(p))
                    * tree.dt
                    * mesh.l2_inner(noise.node(p), r.martingale.node(p))
            })
            .sum();
        let scale = pair(n).abs().max(pair(0).abs()).max(cross.abs()).max(1e-3);
        prop_assert!((lhs - cross).abs() <= 1e-11 * scale, "{lhs} vs {cross}");
    }

    #[test]
    fn means_follow_the_deterministic_solve(seed in any::<u64>(), n in 1usize..6) {
        let mesh = mesh(11);
        let tree = ScenarioTree::new(n, 0.5).unwrap();
        let stepper = Stepper::new(&tree, &mesh, depth_only_coeffs(&tree, &mesh, seed), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let zero = AdaptedField::zeros(&tree, mesh.m);
        let terminal = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let mean_leaf = expectation(&terminal, &tree, n).unwrap();
        let r = stepper.solve_backward(&terminal, &zero).unwrap();
        let r_det = stepper.solve_backward(&AdaptedField::constant(&tree, &mean_leaf), &zero).unwrap();
        for (a, b) in r.state.node(0).iter().zip(r_det.state.node(0)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let noise = sample_adapted_field(&tree, &mesh, &mut rng, 1.0);
        let z0 = sample_spatial_field(&mesh, &mut rng, 1.0);
        let z = stepper.solve_forward(&z0, &zero, Some(&noise)).unwrap();
        let z_det = stepper.solve_forward(&z0, &zero, None).unwrap();
        let ez = expectation(&z, &tree, n).unwrap();
        let leaf = tree.depth_range(n).start;
        for (a, b) in ez.iter().zip(z_det.node(leaf)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn energy_decays_without_forcing(seed in any::<u64>(), theta in 0.5f64..=1.0) {
        let mesh = mesh(15);
        let tree = ScenarioTree::new(5, 0.5).unwrap();
        let a = sample_adapted_coefficients(&tree, &mesh, seed, 0.5, 1.5, 0.5).unwrap();
        let stepper = Stepper::new(&tree, &mesh, Coefficients::with_diffusion(a, 0.5), theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let z0 = sample_spatial_field(&mesh, &mut rng, 1.0);
        let z = stepper.solve_forward(&z0, &AdaptedField::zeros(&tree, mesh.m), None).unwrap();
        let energy = |d: usize| {
            tree.depth_range(d).map(|node| mesh.l2_norm_sq(z.node(node))).sum::<f64>() * ScenarioTree::probability(d)
        };
        for d in 0..tree.n_steps {
            prop_assert!(energy(d + 1) <= energy(d) * (1.0 + 1e-12));
        }
    }
}

fn hum_case(seed: u64) -> (ScenarioTree, SpatialMesh, WeightSystem, ControlProblem) {
    let mesh = mesh(9);
    let tree = ScenarioTree::new(3, 0.5).unwrap();
    let a = sample_adapted_coefficients(&tree, &mesh, seed, 0.5, 1.5, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let params = WeightParams::new(1.0, 1.0, 1.0, 0.5, WeightVariant::BackwardRegularized, 0.01).unwrap();
    let system = WeightSystem::new(params, &mesh, &tree).unwrap();
    let problem = ControlProblem::Backward(BackwardProblem {
        coeffs: Coefficients::with_diffusion(a, 0.5),
        source: None,
        flux: None,
        terminal: sample_adapted_field(&tree, &mesh, &mut rng, 1.0),
    });
    (tree, mesh, system, problem)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hum_solution_invariants(seed in any::<u64>(), eps in 1e-3f64..1e-1) {
        let (tree, mesh, system, problem) = hum_case(seed);
        let cfg = HumConfig { direction: Direction::ControlBackwardSystem, eps, cg_tol: 1e-12, ..HumConfig::default() };
        let r = solve_null_control(&cfg, &problem, &system, &tree, &mesh).unwrap();
        prop_assert!(r.j_value <= r.j_zero);
        prop_assert!(r.residual >= 0.0 && r.residual <= 2.0 * eps * r.j_zero);
        prop_assert!(r.cg_trace.windows(2).all(|w| w[1].j <= w[0].j + 1e-12 * w[0].j.abs()));
        for node in 0..tree.node_count() {
            for (v, &keep) in r.u_hat.node(node).iter().zip(&mesh.ctrl_mask) {
                prop_assert!(keep || *v == 0.0);
            }
        }
    }

    #[test]
    fn argmin_ignores_weight_scale(seed in any::<u64>(), c in 0.01f64..100.0) {
        let (tree, mesh, system, problem) = hum_case(seed);
        let cfg = HumConfig { direction: Direction::ControlBackwardSystem, eps: 1e-2, ..HumConfig::default() };
        let f = assemble_functional(&cfg, &problem, &system, &tree, &mesh).unwrap();
        let base = minimize_cg(&f, vec![0.0; f.dim()], 1e-13, 1000).unwrap().x;
        let scaled = minimize_cg(&f.rescaled(c), vec![0.0; f.dim()], 1e-13, 1000).unwrap().x;
        let diff: f64 = base.iter().zip(&scaled).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-7 * dot(&base, &base).sqrt().max(1e-300));
    }
}
