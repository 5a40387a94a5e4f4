//! Randomized invariants across modules.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lice::data::{DatasetSchema, FeatureKind, FeatureSpec, MadWeights, Target, TargetKind, Value};
use lice::engine::{select_best, Explainer, ThresholdMode, Variant, VariantConfig};
use lice::formulation::{CeConstraints, Formulation};
use lice::mio::{solve, LinExpr, MioModel, SolveParams};
use lice::nn::{argmax, Mlp};
use lice::oracle::{random_point, random_spn, brute_force_ce, DiscreteGrid, DEFAULT_GRID_CAP};
use lice::spn::{Domain, Spn, SpnNode};
use lice::spn_learn::{learn, learn_with_class, LearnConfig};

fn target() -> Target {
    Target {
        name: "y".into(),
        kind: TargetKind::Binary,
    }
}

fn any_kind() -> impl Strategy<Value = FeatureKind> {
    let levels = (2usize..5).prop_map(|n| (0..n).map(|i| format!("l{i}")).collect::<Vec<_>>());
    prop_oneof![
        Just(FeatureKind::Continuous { lb: -5.0, ub: 20.0 }),
        Just(FeatureKind::Binary),
        (0i64..3, 1i64..6).prop_map(|(lb, w)| FeatureKind::DiscreteContiguous { lb, ub: lb + w }),
        levels.clone().prop_map(|levels| FeatureKind::Categorical { levels }),
        levels.clone().prop_map(|levels| FeatureKind::Ordinal { levels }),
        levels.prop_map(|levels| FeatureKind::Mixed {
            lb: 0.0,
            ub: 10.0,
            levels,
            median: Some(4.0),
        }),
    ]
}

fn any_schema() -> impl Strategy<Value = DatasetSchema> {
    prop::collection::vec(any_kind(), 1..6).prop_map(|kinds| {
        let features = kinds
            .into_iter()
            .enumerate()
            .map(|(j, k)| FeatureSpec::new(format!("f{j}"), k))
            .collect();
        DatasetSchema::new(features, target(), vec![]).unwrap()
    })
}

fn row_for(schema: &DatasetSchema, rng: &mut ChaCha8Rng) -> Vec<Value> {
    schema
        .features()
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Continuous { .. } => Value::Real(rng.gen_range(0..=1000) as f64 / 1000.0),
            FeatureKind::DiscreteContiguous { lb, ub } => Value::Real(f.normalize_number(rng.gen_range(*lb..=*ub) as f64)),
            FeatureKind::Mixed { levels, .. } => {
                if rng.gen_bool(0.5) {
                    Value::Level(rng.gen_range(0..levels.len()))
                } else {
                    Value::Real(rng.gen_range(0..=1000) as f64 / 1000.0)
                }
            }
            k => Value::Level(rng.gen_range(0..k.level_count())),
        })
        .collect()
}

fn close(a: &[Value], b: &[Value]) -> bool {
    a.iter().zip(b).all(|(x, y)| match (x, y) {
        (Value::Real(p), Value::Real(q)) => (p - q).abs() < 1e-9,
        _ => x == y,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_encode(schema in any_schema(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let row = row_for(&schema, &mut rng);
            let enc = schema.encode(&row).unwrap();
            prop_assert!(enc.check(&schema, 1e-9).is_ok());
            for (f, e) in schema.features().iter().zip(&enc.features) {
                let total: f64 = e.d.iter().sum::<f64>() + e.d_cont.unwrap_or(0.0);
                match f.kind {
                    FeatureKind::Mixed { .. } | FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. } => {
                        prop_assert!((total - 1.0).abs() < 1e-12)
                    }
                    _ => {}
                }
            }
            prop_assert!(close(&schema.decode(&enc).unwrap(), &row));
        }
    }

    #[test]
    fn mad_weights_are_order_free(schema in any_schema(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<Value>> = (0..30).map(|_| row_for(&schema, &mut rng)).collect();
        let a = MadWeights::fit(&schema, &rows).unwrap();
        rows.shuffle(&mut rng);
        let b = MadWeights::fit(&schema, &rows).unwrap();
        prop_assert_eq!(&a.dims, &b.dims);
        prop_assert!(a.dims.iter().all(|w| w.is_finite() && *w >= 0.0));
    }

    #[test]
    fn max_approximation_brackets_exact(seed in any::<u64>(), nodes in 5usize..80) {
        let doms = [Domain::Real, Domain::Levels(3), Domain::Real, Domain::Levels(2)];
        let spn = random_spn(&doms, nodes, seed).unwrap();
        let bound = spn.max_approx_gap_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..50 {
            let p = random_point(&spn, &mut rng);
            let exact = spn.log_likelihood(&p).unwrap();
            let approx = spn.log_likelihood_max_approx(&p).unwrap();
            prop_assert!(approx <= exact + 1e-12);
            prop_assert!(exact <= approx + bound + 1e-9);
        }
        prop_assert_eq!(spn.marginal_log_likelihood(&[None; 4]).unwrap(), 0.0);
    }

    #[test]
    fn evaluation_ignores_node_order(seed in any::<u64>()) {
        let doms = [Domain::Real, Domain::Levels(4), Domain::Real];
        let spn = random_spn(&doms, 40, seed).unwrap();
        // rewrite the file with shuffled positions and scrambled ids
        let mut doc: serde_json::Value = serde_json::from_str(&spn.to_json().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spn.nodes().len() as u64;
        let remap: Vec<u64> = (0..n).map(|i| i * 7 + 1000).collect();
        let nodes = doc["nodes"].as_array_mut().unwrap();
        for node in nodes.iter_mut() {
            let id = node["id"].as_u64().unwrap();
            node["id"] = remap[id as usize].into();
            if let Some(ch) = node.get_mut("children") {
                let new: Vec<u64> = ch.as_array().unwrap().iter().map(|c| remap[c.as_u64().unwrap() as usize]).collect();
                *ch = new.into();
            }
        }
        nodes.shuffle(&mut rng);
        doc["root"] = remap[spn.root()].into();
        let moved = Spn::from_json(&doc.to_string()).unwrap();
        for _ in 0..20 {
            let p = random_point(&spn, &mut rng);
            prop_assert_eq!(spn.log_likelihood(&p).unwrap(), moved.log_likelihood(&p).unwrap());
            prop_assert_eq!(
                spn.log_likelihood_max_approx(&p).unwrap(),
                moved.log_likelihood_max_approx(&p).unwrap()
            );
        }
    }

    #[test]
    fn learned_networks_validate(seed in any::<u64>(), n in 1usize..120, slice in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doms = [Domain::Real, Domain::Levels(3), Domain::Real];
        let rows: Vec<Vec<Value>> = (0..n)
            .map(|_| {
                let z: f64 = rng.gen();
                vec![
                    Value::Real(z),
                    Value::Level(usize::from(z > 0.4) + usize::from(z > 0.8)),
                    Value::Real((z * 0.5 + rng.gen::<f64>() * 0.5).min(1.0)),
                ]
            })
            .collect();
        let cfg = LearnConfig { min_instances_slice: slice, rng_seed: seed, ..Default::default() };
        let a = learn(&rows, &doms, &cfg).unwrap();
        prop_assert!(a.validate().is_empty());
        let b = learn(&rows, &doms, &cfg).unwrap();
        prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn interval_bounds_contain_samples(seed in any::<u64>()) {
        let mlp = Mlp::random(&[4, 5, 3, 3], 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..0.5)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.gen_range(0.0..1.0)).collect();
        let b = mlp.interval_bounds(&lo, &hi).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect();
            let out = mlp.forward_raw(&x).unwrap();
            for (k, v) in out.iter().enumerate() {
                prop_assert!(*v >= b.output_lower[k] - 1e-9 && *v <= b.output_upper[k] + 1e-9);
            }
        }
    }

    #[test]
    fn scaling_last_layer_keeps_class(seed in any::<u64>(), s in 0.01f64..100.0) {
        let mlp = Mlp::random(&[3, 4, 3], 3, seed).unwrap();
        let mut layers = mlp.layers().to_vec();
        let last = layers.last_mut().unwrap();
        for row in &mut last.weights {
            for w in row.iter_mut() {
                *w *= s;
            }
        }
        for b in &mut last.bias {
            *b *= s;
        }
        let scaled = Mlp::new(layers, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            let (a, b) = (mlp.forward_raw(&x).unwrap(), scaled.forward_raw(&x).unwrap());
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p * s - q).abs() <= 1e-9 * (1.0 + q.abs()));
            }
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random bounded integer programs: every pool entry is feasible, its
    /// objective is the recomputed one, and the pool is ordered.
    #[test]
    fn pool_entries_recheck(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = MioModel::new();
        let xs: Vec<_> = (0..5).map(|i| m.add_binary(format!("x{i}")).unwrap()).collect();
        let z = m.add_integer("z", 0.0, 4.0).unwrap();
        let y = m.add_continuous("y", 0.0, 3.0).unwrap();
        for &v in &xs {
            m.set_pool_key(v, true);
        }
        m.set_pool_key(z, true);
        let mut row = LinExpr::from(z) + y;
        for &v in &xs {
            row += v * rng.gen_range(0.5..3.0);
        }
        m.add_le("cap", row, rng.gen_range(3.0..8.0)).unwrap();
        m.add_ge("some", LinExpr::sum(xs.clone()) + z, 1.0).unwrap();
        let mut obj = LinExpr::from(y) * rng.gen_range(-1.0..1.0) + z * rng.gen_range(-2.0..2.0);
        for &v in &xs {
            obj += v * rng.gen_range(-3.0..3.0);
        }
        m.set_objective(obj.clone()).unwrap();
        let pool = solve(&m, &SolveParams { pool_size: 6, time_limit: 10.0, ..Default::default() }).unwrap();
        prop_assert!(!pool.entries.is_empty());
        for w in pool.entries.windows(2) {
            prop_assert!(w[0].objective <= w[1].objective + 1e-6);
        }
        for e in &pool.entries {
            prop_assert!(m.check(&e.values, 1e-6).is_ok());
            prop_assert!((obj.eval(&e.values) - e.objective).abs() <= 1e-6);
        }
    }
}

fn two_feature_spn() -> (DatasetSchema, Mlp, Spn, MadWeights) {
    let schema = DatasetSchema::new(
        vec![
            FeatureSpec::new("a", FeatureKind::Continuous { lb: 0.0, ub: 1.0 }),
            FeatureSpec::new("b", FeatureKind::Ordinal {
                levels: vec!["lo".into(), "mid".into(), "hi".into()],
            }),
            FeatureSpec::new("c", FeatureKind::Continuous { lb: 0.0, ub: 1.0 }),
        ],
        target(),
        vec![],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<Value>> = (0..400)
        .map(|_| {
            let z: f64 = rng.gen();
            let a = ((z * 0.7 + rng.gen::<f64>() * 0.3) * 1000.0).round() / 1000.0;
            vec![
                Value::Real(a),
                Value::Level(usize::from(z > 0.3) + usize::from(z > 0.7)),
                Value::Real((rng.gen::<f64>() * 1000.0).round() / 1000.0),
            ]
        })
        .collect();
    let mlp = Mlp::random(&[schema.encoded_width(), 5, 1], 2, 3).unwrap();
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| mlp.classify(&schema.to_vector(r)).unwrap())
        .collect();
    let spn = learn_with_class(
        &schema,
        &rows,
        &labels,
        &LearnConfig {
            min_instances_slice: 20,
            ..Default::default()
        },
    )
    .unwrap();
    let w = MadWeights::fit(&schema, &rows).unwrap();
    (schema, mlp, spn, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Decoded pool entries reproduce the solver's classifier outputs and
    /// root value, never exceed the exact likelihood, and keep min(l, u) = 0.
    #[test]
    fn encoding_soundness(a in 0usize..=1000, b in 0usize..3, c in 0usize..=1000) {
        let (schema, mlp, spn, w) = two_feature_spn();
        let factual = vec![Value::Real(a as f64 / 1000.0), Value::Level(b), Value::Real(c as f64 / 1000.0)];
        let fclass = mlp.classify(&schema.to_vector(&factual)).unwrap();
        let cons = CeConstraints { alpha: 0.1, ..Default::default() };
        let form = Formulation::build(&schema, &factual, fclass, &mlp, Some(&spn), &w, &cons).unwrap();
        let pool = solve(&form.model, &SolveParams { pool_size: 4, time_limit: 20.0, ..Default::default() }).unwrap();
        for e in &pool.entries {
            let ce = form.decode(&schema, e).unwrap();
            let raw = mlp.forward_raw(&schema.to_vector(&ce)).unwrap();
            for (v, r) in form.raw.iter().zip(&raw) {
                prop_assert!((e.value(*v) - r).abs() <= 1e-5);
            }
            let ce_class = if raw[0] >= 0.0 { 1 } else { 0 };
            prop_assert_eq!(ce_class, 1 - fclass);
            let mut point = ce.clone();
            point.push(Value::Level(ce_class));
            let o = e.value(form.o_root.unwrap());
            prop_assert!((o - spn.log_likelihood_max_approx(&point).unwrap()).abs() <= 1e-6);
            prop_assert!(spn.log_likelihood(&point).unwrap() >= o - 1e-6);
            for h in &form.input.features {
                if let (Some(l), Some(u)) = (h.l, h.u) {
                    prop_assert!(e.value(l).min(e.value(u)) <= 1e-7);
                }
            }
        }
    }

    /// The selected entry is the most likely valid one, and threshold
    /// results keep exact likelihood within the approximation bound of delta.
    #[test]
    fn selection_and_threshold(a in 0usize..=1000, b in 0usize..3, c in 0usize..=1000, q in any::<bool>()) {
        let (schema, mlp, spn, w) = two_feature_spn();
        let factual = vec![Value::Real(a as f64 / 1000.0), Value::Level(b), Value::Real(c as f64 / 1000.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let train: Vec<Vec<Value>> = (0..60)
            .map(|_| vec![Value::Real(rng.gen_range(0..=1000) as f64 / 1000.0), Value::Level(rng.gen_range(0..3)), Value::Real(rng.gen_range(0..=1000) as f64 / 1000.0)])
            .collect();
        let labels: Vec<usize> = train.iter().map(|r| mlp.classify(&schema.to_vector(r)).unwrap()).collect();
        let ex = Explainer::new(&schema, &mlp, &spn, &w).unwrap().with_training(&train, &labels).unwrap();
        let mode = if q { ThresholdMode::Quartile } else { ThresholdMode::Median };
        let e = ex.explain(&factual, &VariantConfig { pool_size: 4, ..VariantConfig::new(Variant::LiceThreshold { mode }) }).unwrap();
        prop_assert_eq!(e.selected, select_best(&e.pool));
        if let Some(s) = e.selected() {
            for r in e.pool.iter().filter(|r| r.metrics.valid) {
                prop_assert!(s.metrics.nll_exact <= r.metrics.nll_exact);
            }
        }
        let delta = e.delta_spn.unwrap();
        for r in &e.pool {
            prop_assert!(r.metrics.valid && r.metrics.actionable);
            prop_assert!(-r.metrics.nll_exact >= delta - spn.max_approx_gap_bound() - 1e-9);
            prop_assert!(-r.metrics.nll_exact >= r.o_root_mio.unwrap() - 1e-6);
        }
    }
}

#[test]
fn learned_beats_factorized_on_correlated_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut draw = |n: usize| -> Vec<Vec<Value>> {
        (0..n)
            .map(|_| {
                let x: f64 = rng.gen();
                let y = (x + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                vec![Value::Real(x), Value::Real(y)]
            })
            .collect()
    };
    let train = draw(2000);
    let test = draw(1000);
    let doms = [Domain::Real, Domain::Real];
    let cfg = LearnConfig {
        min_instances_slice: 100,
        ..Default::default()
    };
    let learned = learn(&train, &doms, &cfg).unwrap();
    let factorized = learn(
        &train,
        &doms,
        &LearnConfig {
            min_instances_slice: usize::MAX,
            ..cfg
        },
    )
    .unwrap();
    assert!(matches!(factorized.node(factorized.root()), SpnNode::Product { .. }));
    let mean = |s: &Spn| test.iter().map(|r| s.log_likelihood(r).unwrap()).sum::<f64>() / test.len() as f64;
    assert!(mean(&learned) >= mean(&factorized), "{} < {}", mean(&learned), mean(&factorized));
}

#[test]
fn oracle_is_deterministic_and_never_beats_a_proven_optimum() {
    let schema = DatasetSchema::new(
        vec![
            FeatureSpec::new("a", FeatureKind::Ordinal { levels: vec!["x".into(), "y".into(), "z".into()] }),
            FeatureSpec::new("b", FeatureKind::DiscreteContiguous { lb: 0, ub: 4 }),
            FeatureSpec::new("c", FeatureKind::Binary),
        ],
        target(),
        vec![],
    )
    .unwrap();
    let grid = DiscreteGrid::for_schema(&schema, 16, DEFAULT_GRID_CAP).unwrap();
    let w = MadWeights::uniform(&schema);
    for seed in 0..8 {
        let mlp = Mlp::random(&[schema.encoded_width(), 4, 1], 2, seed).unwrap();
        let points: Vec<Vec<Value>> = grid.points().collect();
        let factual = points[(seed as usize * 7) % points.len()].clone();
        let cons = CeConstraints::default();
        let a = brute_force_ce(&schema, &factual, &grid, &mlp, None, &w, &cons).unwrap();
        let b = brute_force_ce(&schema, &factual, &grid, &mlp, None, &w, &cons).unwrap();
        assert_eq!(a, b);
        let fclass = mlp.classify(&schema.to_vector(&factual)).unwrap();
        let form = Formulation::build(&schema, &factual, fclass, &mlp, None, &w, &cons).unwrap();
        let pool = solve(&form.model, &SolveParams { pool_size: 1, ..Default::default() }).unwrap();
        if let (Some(o), Some(e)) = (a, pool.entries.first()) {
            assert!(e.optimal);
            assert!(o.objective >= e.objective - 1e-6);
        }
    }
}
