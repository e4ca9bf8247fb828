use otmf::io::{decode_checkpoint, encode_checkpoint};
use otmf::matrix::Matrix;
use otmf::model::{init_head, Activation, ModelSpec, TaskId, ToyModel};
use otmf::sinkhorn::{marginal_errors, pairwise_cost, sinkhorn_distance, sinkhorn_plan, Marginals, SinkhornConfig};
use otmf::taskgen::{generate_stream, TaskStreamSpec};
use proptest::prelude::*;

fn cloud(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn two_clouds() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(n, m, d)| (cloud(n, d), cloud(m, d)))
}

fn tight(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        max_iters: 100_000,
        tolerance: 1e-12,
        ..SinkhornConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_plans_meet_both_marginals((x, y) in two_clouds(), eps in 0.05f64..1.0, log in any::<bool>()) {
        let cfg = SinkhornConfig { epsilon: eps, log_domain: log, tolerance: 1e-9, max_iters: 20_000, ..SinkhornConfig::default() };
        let marginals = Marginals::uniform(x.rows(), y.rows()).unwrap();
        let cost = pairwise_cost(&x, &y).unwrap();
        match sinkhorn_plan(&cost, &marginals, &cfg) {
            Ok(plan) if plan.converged => {
                let (rows, cols) = marginal_errors(&plan.plan, &marginals);
                prop_assert!(rows <= 1e-9 && cols <= 1e-9, "row {rows:e} col {cols:e}");
            }
            Ok(_) => {}
            // Direct mode may refuse a kernel that underflows.
            Err(e) => prop_assert!(!log, "log-domain solver failed: {e}"),
        }
    }

    #[test]
    fn direct_plan_is_scaled_kernel((x, y) in two_clouds(), eps in 0.2f64..2.0) {
        let cfg = SinkhornConfig { epsilon: eps, log_domain: false, ..SinkhornConfig::default() };
        let cost = pairwise_cost(&x, &y).unwrap();
        let plan = sinkhorn_plan(&cost, &Marginals::uniform(x.rows(), y.rows()).unwrap(), &cfg).unwrap();
        let otmf::sinkhorn::Potentials::Scaling { u, v } = &plan.potentials else {
            return Err(TestCaseError::fail("direct mode should report scaling potentials"));
        };
        for i in 0..x.rows() {
            for j in 0..y.rows() {
                let want = u[i] * (-cost.get(i, j) / eps).exp() * v[j];
                let got = plan.plan.get(i, j);
                prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(f64::MIN_POSITIVE));
            }
        }
    }

    #[test]
    fn distance_is_symmetric((x, y) in two_clouds(), eps in 0.05f64..1.0) {
        let cfg = tight(eps);
        let (a, pa) = sinkhorn_distance(&x, &y, &cfg).unwrap();
        let (b, pb) = sinkhorn_distance(&y, &x, &cfg).unwrap();
        // Truncated iterates depend on which marginal was projected last.
        prop_assume!(pa.converged && pb.converged);
        prop_assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }

    #[test]
    fn distance_scales_quadratically((x, y) in two_clouds(), eps in 0.05f64..1.0, s in 0.3f64..3.0) {
        let (a, _) = sinkhorn_distance(&x, &y, &tight(eps)).unwrap();
        let (b, _) = sinkhorn_distance(&x.scaled(s), &y.scaled(s), &tight(eps * s * s)).unwrap();
        prop_assert!((b - s * s * a).abs() <= 1e-6 * (s * s * a).abs().max(1e-12), "{b} vs {}", s * s * a);
    }

    #[test]
    fn features_do_not_depend_on_heads(seed in any::<u64>(), head_seed in any::<u64>(), relu in any::<bool>()) {
        let spec = ModelSpec {
            activation: if relu { Activation::Relu } else { Activation::Tanh },
            ..ModelSpec::default()
        };
        let model = ToyModel::init(spec.clone(), seed).unwrap();
        let with_head = model.clone().with_head(TaskId(1), init_head(&spec, head_seed).unwrap()).unwrap();
        let x = Matrix::new(5, spec.input_dim(), (0..5 * spec.input_dim()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        prop_assert_eq!(model.forward_features(&x).unwrap(), with_head.forward_features(&x).unwrap());
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), dims in prop::collection::vec(1usize..6, 2..5), classes in 1usize..5, heads in prop::collection::btree_set(0u32..6, 0..4)) {
        let spec = ModelSpec { layer_dims: dims, num_classes: classes, ..ModelSpec::default() };
        let mut model = ToyModel::init(spec.clone(), seed).unwrap();
        for h in heads {
            model = model.with_head(TaskId(h), init_head(&spec, seed ^ u64::from(h)).unwrap()).unwrap();
        }
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        prop_assert_eq!(back, model);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn streams_are_deterministic_and_balanced(
        seed in any::<u64>(),
        tasks in 1usize..4,
        classes in 2usize..5,
        per_class in 5usize..15,
        h in 0.0f64..2.0,
    ) {
        let spec = TaskStreamSpec {
            num_tasks: tasks,
            classes_per_task: classes,
            samples_per_task: classes * per_class,
            pretrain_samples: classes * per_class,
            heterogeneity: h,
            seed,
            ..TaskStreamSpec::default()
        };
        let a = generate_stream(&spec).unwrap();
        prop_assert_eq!(&a, &generate_stream(&spec).unwrap());
        for task in &a.tasks {
            for c in 0..classes {
                prop_assert!(task.train.labels.contains(&c), "class {c} missing from a train split");
            }
        }
    }
}
