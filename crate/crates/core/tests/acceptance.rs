//! End-to-end acceptance suite. Each test checks one release criterion
//! at its pinned tolerance and prints a PASS line with the measured
//! margin (visible under `--nocapture`).

use std::collections::BTreeMap;

use jfa_core::adapt::{
    adapt_alternating, adapt_closed_form, assemble_joint_system, assemble_pair, bilinear_limit,
    row_col_l1_bound, similarity, AoOptions,
};
use jfa_core::data::{
    load_dataset_dir, load_model, save_model, synth_generate, write_dataset, SynthConfig,
    CLASSES_FILE, INSTANCES_FILE, SPLIT_FILE,
};
use jfa_core::learn::{train, TrainConfig};
use jfa_core::modelselect::{omega_grid, select_omega, GridSpec};
use jfa_core::zsr::{argmax_scores, evaluate, predict_batch};
use jfa_core::{ClassId, DMatrix, DVector, Dataset, OmegaParams, WeightModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instance whose joint system is definite through the dominance
/// construction: both diagonal weights sit 1% above the l1 bound.
struct Instance {
    w: DMatrix<f64>,
    omega: OmegaParams,
    features: DVector<f64>,
    attributes: DVector<f64>,
}

fn random_dominant_instance(rng: &mut ChaCha8Rng, max_dim: usize) -> Instance {
    let dt = rng.random_range(1..=max_dim);
    let ds = rng.random_range(1..=max_dim);
    let mut w = DMatrix::from_fn(dt, ds, |_, _| rng.random_range(-2.0..2.0));
    if row_col_l1_bound(&w) == 0.0 {
        w[(0, 0)] = 1.0;
    }
    let s = 1.01 * row_col_l1_bound(&w);
    let split_t = rng.random_range(0.2..0.8);
    let split_s = rng.random_range(0.2..0.8);
    let omega = OmegaParams::new(
        split_t * s,
        split_s * s,
        (1.0 - split_t) * s,
        (1.0 - split_s) * s,
    )
    .unwrap();
    let features = DVector::from_fn(dt, |_, _| rng.random_range(-1.0..1.0));
    let attributes = DVector::from_fn(ds, |_, _| rng.random_range(-1.0..1.0));
    Instance {
        w,
        omega,
        features,
        attributes,
    }
}

#[test]
fn criterion_1_closed_form_and_alternating_agree() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_z: f64 = 0.0;
    let mut worst_obj: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_dominant_instance(&mut rng, 16);
        let system = assemble_joint_system(&inst.w, &inst.omega).unwrap();
        assert!(system.is_pd());
        let pair = assemble_pair(&inst.features, &inst.attributes, &inst.omega);
        let closed = adapt_closed_form(&system, &pair).unwrap();
        let ao = adapt_alternating(
            &inst.w,
            &inst.omega,
            &inst.features,
            &inst.attributes,
            &AoOptions {
                tol: 1e-12,
                max_iter: 200_000,
                ..AoOptions::default()
            },
        )
        .unwrap();
        assert!(ao.converged, "alternating solver hit its iteration cap");
        let dz = (&ao.stacked - &closed.stacked).amax();
        let dobj = (ao.objective - closed.objective).abs()
            / (1.0 + closed.objective.abs().max(ao.objective.abs()));
        assert!(dz <= 1e-6, "max-norm gap {dz}");
        assert!(dobj <= 1e-8, "objective gap {dobj}");
        worst_z = worst_z.max(dz);
        worst_obj = worst_obj.max(dobj);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "[acceptance] criterion 1 (closed form vs alternating): PASS \
         (worst |dz| = {worst_z:.3e}, worst rel dobj = {worst_obj:.3e}, {elapsed:?})"
    );
}

/// Scalar displaced score written out directly; the oracle side of the
/// brute-force check, independent of the library solve path.
fn scalar_objective(w: f64, om: &OmegaParams, phi: f64, psi: f64, zt: f64, zs: f64) -> f64 {
    zt * w * zs
        - 0.5 * om.w1() * (zt - phi) * (zt - phi)
        - 0.5 * om.w2() * (zs - psi) * (zs - psi)
        - 0.5 * om.w3() * zt * zt
        - 0.5 * om.w4() * zs * zs
}

/// Exact maximum of the scalar score over the grid {lo, lo+step, ..., hi}².
/// For fixed z_t the score is a concave parabola in z_s, so its grid
/// maximum sits at a grid point flanking the vertex (or a range end);
/// scanning every z_t grid point therefore covers all grid pairs without
/// evaluating the full cross product.
fn grid_max_scalar(w: f64, om: &OmegaParams, phi: f64, psi: f64, lo: f64, hi: f64, step: f64) -> f64 {
    let n = ((hi - lo) / step).round() as i64;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        let zt = lo + step * i as f64;
        let vertex = (w * zt + om.w2() * psi) / om.w24();
        let j = ((vertex - lo) / step).floor() as i64;
        for cand in [j, j + 1, 0, n] {
            let cand = cand.clamp(0, n);
            let zs = lo + step * cand as f64;
            let v = scalar_objective(w, om, phi, psi, zt, zs);
            if v > best {
                best = v;
            }
        }
    }
    best
}

#[test]
fn criterion_2_brute_force_grid_oracle() {
    let start = std::time::Instant::now();

    // Worked scalar example: the solve must hit (2, 2) and score 1.
    let om = OmegaParams::new(1.0, 1.0, 0.0, 0.0).unwrap();
    let w = DMatrix::from_element(1, 1, 0.5);
    let system = assemble_joint_system(&w, &om).unwrap();
    let pair = assemble_pair(
        &DVector::from_element(1, 1.0),
        &DVector::from_element(1, 1.0),
        &om,
    );
    let adapted = adapt_closed_form(&system, &pair).unwrap();
    assert!((adapted.target[0] - 2.0).abs() <= 1e-9);
    assert!((adapted.source[0] - 2.0).abs() <= 1e-9);
    assert!((similarity(&system, &pair).unwrap() - 1.0).abs() <= 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 20 {
        let w_val: f64 = rng.random_range(-0.9..0.9);
        let om = OmegaParams::new(
            rng.random_range(0.5..1.5),
            rng.random_range(0.5..1.5),
            rng.random_range(0.1..1.0),
            rng.random_range(0.1..1.0),
        )
        .unwrap();
        let phi = rng.random_range(-2.0..2.0);
        let psi = rng.random_range(-2.0..2.0);
        let w = DMatrix::from_element(1, 1, w_val);
        let system = assemble_joint_system(&w, &om).unwrap();
        if !system.is_pd() {
            continue;
        }
        let pair = assemble_pair(
            &DVector::from_element(1, phi),
            &DVector::from_element(1, psi),
            &om,
        );
        let adapted = adapt_closed_form(&system, &pair).unwrap();
        // Only score instances whose true maximizer lies inside the grid.
        if adapted.stacked.amax() > 9.0 {
            continue;
        }
        let f = similarity(&system, &pair).unwrap();
        let grid_best = grid_max_scalar(w_val, &om, phi, psi, -10.0, 10.0, 1e-3);
        let gap = (f - grid_best).abs();
        assert!(gap <= 1e-3, "grid max {grid_best} vs similarity {f}");
        worst = worst.max(gap);
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "[acceptance] criterion 2 (brute-force grid oracle): PASS \
         (worst gap = {worst:.3e}, {elapsed:?})"
    );
}

#[test]
fn criterion_3_bilinear_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let t = 1e6;
    let om = OmegaParams::new(t, t, 1.0 / t, 1.0 / t).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let w = DMatrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let system = assemble_joint_system(&w, &om).unwrap();
        let features = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let attributes = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let pair = assemble_pair(&features, &attributes, &om);
        let f = similarity(&system, &pair).unwrap();
        let b = bilinear_limit(&w, &features, &attributes).unwrap();
        let gap = (f - b).abs() / (1.0 + b.abs());
        assert!(gap <= 1e-3, "similarity {f} vs bilinear {b}");
        worst = worst.max(gap);
    }
    println!(
        "[acceptance] criterion 3 (bilinear compatibility limit): PASS \
         (worst normalized gap = {worst:.3e})"
    );
}

#[test]
fn criterion_4_dominance_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_margin = f64::INFINITY;
    for _ in 0..100 {
        let dt = rng.random_range(1..=16);
        let ds = rng.random_range(1..=16);
        let mut w = DMatrix::from_fn(dt, ds, |_, _| rng.random_range(-5.0..5.0));
        if row_col_l1_bound(&w) == 0.0 {
            w[(0, 0)] = 1.0;
        }
        let s = 1.01 * row_col_l1_bound(&w);
        let om = OmegaParams::new(0.5 * s, 0.5 * s, 0.5 * s, 0.5 * s).unwrap();
        let system = assemble_joint_system(&w, &om).unwrap();
        assert!(system.eig_min() > 0.0, "eig_min = {}", system.eig_min());
        worst_margin = worst_margin.min(system.eig_min());
    }

    // Below the bound the construction must be breakable: a single
    // dominant entry couples two coordinates harder than the diagonal
    // can hold.
    let mut indefinite = 0;
    for _ in 0..100 {
        let dt = rng.random_range(1..=16);
        let ds = rng.random_range(1..=16);
        let mut w = DMatrix::zeros(dt, ds);
        w[(0, 0)] = rng.random_range(1.0..5.0);
        let s = 0.5 * row_col_l1_bound(&w);
        let om = OmegaParams::new(0.5 * s, 0.5 * s, 0.5 * s, 0.5 * s).unwrap();
        let system = assemble_joint_system(&w, &om).unwrap();
        if system.eig_min() <= 0.0 {
            indefinite += 1;
        }
    }
    assert!(indefinite >= 1, "no indefinite system found in 100 trials");
    println!(
        "[acceptance] criterion 4 (dominance gate): PASS \
         (worst definite eig_min = {worst_margin:.3e}, {indefinite}/100 adversarial indefinite)"
    );
}

#[test]
fn criterion_5_envelope_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let inst = random_dominant_instance(&mut rng, 8);
        let system = assemble_joint_system(&inst.w, &inst.omega).unwrap();
        let pair = assemble_pair(&inst.features, &inst.attributes, &inst.omega);
        let adapted = adapt_closed_form(&system, &pair).unwrap();
        for _ in 0..5 {
            let i = rng.random_range(0..inst.w.nrows());
            let j = rng.random_range(0..inst.w.ncols());
            let mut wp = inst.w.clone();
            wp[(i, j)] += eps;
            let mut wm = inst.w.clone();
            wm[(i, j)] -= eps;
            let fp = similarity(&assemble_joint_system(&wp, &inst.omega).unwrap(), &pair).unwrap();
            let fm = similarity(&assemble_joint_system(&wm, &inst.omega).unwrap(), &pair).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let analytic = adapted.target[i] * adapted.source[j];
            let gap = (fd - analytic).abs() / (1.0 + analytic.abs());
            assert!(gap <= 1e-4, "fd {fd} vs analytic {analytic}");
            worst = worst.max(gap);
        }
    }
    println!(
        "[acceptance] criterion 5 (envelope gradient): PASS \
         (worst normalized gap = {worst:.3e})"
    );
}

#[test]
fn criterion_6_alternating_traces_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut sweeps_total = 0usize;
    for _ in 0..100 {
        let inst = random_dominant_instance(&mut rng, 12);
        let ao = adapt_alternating(
            &inst.w,
            &inst.omega,
            &inst.features,
            &inst.attributes,
            &AoOptions::default(),
        )
        .unwrap();
        let trace = ao.trace.as_ref().unwrap();
        sweeps_total += trace.len();
        for pair in trace.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-12 * (1.0 + pair[0].abs()),
                "objective dropped from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }
    println!(
        "[acceptance] criterion 6 (monotone alternating traces): PASS \
         ({sweeps_total} sweeps checked)"
    );
}

fn accuracy_of(
    model: &WeightModel,
    data: &Dataset,
    score: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
) -> f64 {
    let unseen = data.unseen_classes();
    let test = data.test_instances();
    let mut correct = 0usize;
    for x in &test {
        let scores: Vec<(ClassId, f64)> = unseen
            .iter()
            .map(|c| (c.label, score(&x.features, &c.attributes)))
            .collect();
        if argmax_scores(&scores) == Some(x.label.unwrap()) {
            correct += 1;
        }
    }
    let _ = model;
    correct as f64 / test.len() as f64
}

#[test]
fn criterion_7_synthetic_end_to_end() {
    let start = std::time::Instant::now();
    let config = SynthConfig {
        n_seen: 20,
        n_unseen: 5,
        attr_dim: 8,
        feat_dim: 16,
        instances_per_class: 30,
        attribute_scale: 1.0,
        feature_noise: 0.05,
        intra_class_spread: 0.02,
        map_noise: 0.0,
        seed: 707,
    };
    let data = synth_generate(&config).unwrap().dataset;
    let omega = OmegaParams::new(4.0, 4.0, 0.5, 0.5).unwrap();
    let train_config = TrainConfig {
        lambda: 1.0,
        outer_iters: 6,
        inner_iters: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let (model, state) = train(&data, &omega, &train_config).unwrap();
    assert!(state.objective_trace.last().unwrap().1 <= state.objective_trace[0].1);

    let system = assemble_joint_system(&model.weights, &model.omega).unwrap();
    let unseen = data.unseen_classes();
    let test = data.test_instances();
    let predictions = predict_batch(&model, &system, &unseen, &test).unwrap();
    let truth: BTreeMap<_, _> = test.iter().map(|x| (x.id, x.label.unwrap())).collect();
    let report = evaluate(&predictions, &truth).unwrap();
    let adaptive_acc = report.accuracy.mean;

    let baseline_acc = accuracy_of(&model, &data, |phi, psi| {
        bilinear_limit(&model.weights, phi, psi).unwrap()
    });

    let elapsed = start.elapsed();
    assert!(
        adaptive_acc >= 0.90,
        "unseen-class accuracy {adaptive_acc} < 0.90 (baseline {baseline_acc})"
    );
    assert!(
        adaptive_acc >= baseline_acc,
        "adaptive {adaptive_acc} below bilinear baseline {baseline_acc}"
    );
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    println!(
        "[acceptance] criterion 7 (synthetic end-to-end): PASS \
         (accuracy {adaptive_acc:.3} vs baseline {baseline_acc:.3}, {elapsed:?})"
    );
}

fn small_selection_input() -> (Dataset, TrainConfig) {
    let config = SynthConfig {
        n_seen: 6,
        n_unseen: 2,
        attr_dim: 3,
        feat_dim: 5,
        instances_per_class: 6,
        feature_noise: 0.01,
        intra_class_spread: 0.01,
        seed: 808,
        ..SynthConfig::default()
    };
    let data = synth_generate(&config).unwrap().dataset;
    let train_config = TrainConfig {
        outer_iters: 1,
        inner_iters: 8,
        lambda: 0.1,
        seed: 3,
        ..TrainConfig::default()
    };
    (data, train_config)
}

#[test]
fn criterion_8_grid_search_protocol() {
    assert_eq!(omega_grid(&GridSpec::default()).unwrap().len(), 14_641);

    let (data, train_config) = small_selection_input();
    let spec = GridSpec {
        exponent_lo: -1,
        exponent_hi: 0,
        base: 10.0,
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| select_omega(&data, &spec, &train_config, 2, false).unwrap())
    };
    let single = run(1);
    let parallel = run(4);
    assert_eq!(single.to_tsv(), parallel.to_tsv());

    let accs: Vec<f64> = single.candidates.iter().filter_map(|c| c.cv_mean).collect();
    assert!(!accs.is_empty());
    assert!(accs.windows(2).all(|w| w[0] >= w[1]), "rows not sorted");
    println!(
        "[acceptance] criterion 8 (grid-search protocol): PASS \
         (14641 default candidates, {} evaluated rows byte-identical across 1 and 4 workers)",
        accs.len()
    );
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        n_seen: 5,
        n_unseen: 2,
        attr_dim: 3,
        feat_dim: 4,
        instances_per_class: 5,
        seed: 909,
        ..SynthConfig::default()
    };

    // Identical seeds: identical dataset bytes.
    let a = synth_generate(&config).unwrap().dataset;
    let b = synth_generate(&config).unwrap().dataset;
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    write_dataset(&a, &dir_a).unwrap();
    write_dataset(&b, &dir_b).unwrap();
    for f in [CLASSES_FILE, INSTANCES_FILE, SPLIT_FILE] {
        assert_eq!(
            std::fs::read(dir_a.join(f)).unwrap(),
            std::fs::read(dir_b.join(f)).unwrap(),
            "dataset file {f} differs between identical seeds"
        );
    }

    // Dataset files round-trip bit-exactly.
    let loaded = load_dataset_dir(&dir_a).unwrap();
    let dir_c = tmp.path().join("c");
    write_dataset(&loaded, &dir_c).unwrap();
    for f in [CLASSES_FILE, INSTANCES_FILE, SPLIT_FILE] {
        assert_eq!(
            std::fs::read(dir_a.join(f)).unwrap(),
            std::fs::read(dir_c.join(f)).unwrap(),
            "dataset file {f} changed across a load/save cycle"
        );
    }

    // Identical seeds and data: bit-identical trained weights.
    let omega = OmegaParams::new(2.0, 2.0, 0.5, 0.5).unwrap();
    let train_config = TrainConfig {
        outer_iters: 2,
        inner_iters: 10,
        seed: 4,
        ..TrainConfig::default()
    };
    let (m1, _) = train(&a, &omega, &train_config).unwrap();
    let (m2, _) = train(&b, &omega, &train_config).unwrap();
    assert_eq!(m1.weights.len(), m2.weights.len());
    for (x, y) in m1.weights.iter().zip(m2.weights.iter()) {
        assert_eq!(x.to_bits(), y.to_bits(), "trained weights differ");
    }

    // Model files round-trip bit-exactly.
    let model_path = tmp.path().join("model.txt");
    save_model(&m1, &model_path).unwrap();
    let reloaded = load_model(&model_path).unwrap();
    for (x, y) in m1.weights.iter().zip(reloaded.weights.iter()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    let model_path2 = tmp.path().join("model2.txt");
    save_model(&reloaded, &model_path2).unwrap();
    assert_eq!(
        std::fs::read(&model_path).unwrap(),
        std::fs::read(&model_path2).unwrap()
    );

    // Identical selection reports for identical inputs.
    let (sel_data, sel_config) = small_selection_input();
    let spec = GridSpec {
        exponent_lo: 0,
        exponent_hi: 0,
        base: 10.0,
    };
    let r1 = select_omega(&sel_data, &spec, &sel_config, 2, false).unwrap();
    let r2 = select_omega(&sel_data, &spec, &sel_config, 2, false).unwrap();
    assert_eq!(r1.to_tsv(), r2.to_tsv());

    println!(
        "[acceptance] criterion 9 (determinism and round-trips): PASS \
         (datasets, models, and reports reproduce bit-exactly)"
    );
}
