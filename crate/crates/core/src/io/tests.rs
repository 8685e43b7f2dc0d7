use super::*;
use crate::integrator::{generate_ensemble, generate_training_data};
use crate::models::init_params;
use crate::rng::rng_for;
use crate::systems::default_spec;
use crate::tensor::adam_step;
use rand::Rng;

#[test]
fn kv_round_trip_and_strictness() {
    let sections = vec![(
        "alpha".to_string(),
        vec![
            ("x".to_string(), "1".to_string()),
            ("y".to_string(), "two words".to_string()),
        ],
    )];
    let text = render_kv(&sections);
    let parsed = parse_kv(&text, "test").unwrap();
    assert_eq!(parsed, sections);

    assert!(parse_kv("x = 1", "test").is_err()); // key before section
    assert!(parse_kv("[s]\nnot a pair", "test").is_err());
    assert!(parse_kv("[unclosed\n", "test").is_err());
}

#[test]
fn spec_round_trips_through_kv() {
    let mut spec = default_spec(SystemKind::Binary, 20).unwrap();
    spec.kbt = 8.5;
    spec.dt = 2.5e-4;
    spec.gamma_per_type = vec![1.25, 3.5];
    let entries = spec_to_kv(&spec);
    let back = spec_from_kv(&entries, "test").unwrap();
    assert_eq!(back.kind, spec.kind);
    assert_eq!(back.n_particles, 20);
    assert_eq!(back.kbt, 8.5);
    assert_eq!(back.dt, 2.5e-4);
    assert_eq!(back.gamma_per_type, spec.gamma_per_type);
    assert_eq!(back.topology, spec.topology);

    let mut extra = entries.clone();
    extra.push(("bogus".into(), "1".into()));
    assert!(spec_from_kv(&extra, "test").is_err());
}

#[test]
fn pairs_csv_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec(SystemKind::Linear, 3).unwrap();
    let dataset = generate_training_data(&spec, 2, 5, 99).unwrap();
    let csv = dir.path().join("pairs.csv");
    let meta = dir.path().join("dataset.meta");
    write_pairs_csv(&csv, &dataset).unwrap();
    write_dataset_meta(&meta, &dataset).unwrap();
    let loaded = read_pairs(&csv, &meta).unwrap();
    assert_eq!(loaded.len(), dataset.len());
    assert_eq!(loaded.inputs, dataset.inputs);
    assert_eq!(loaded.targets, dataset.targets);
    assert_eq!(loaded.velocities, dataset.velocities);
    assert_eq!(loaded.provenance, dataset.provenance);
    assert_eq!(loaded.seed, dataset.seed);
}

#[test]
fn ensemble_csv_has_expected_row_count_and_digest_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec(SystemKind::Linear, 2).unwrap();
    let ens = generate_ensemble(&spec, 3, 4, 7).unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    write_ensemble_csv(&a, &ens).unwrap();
    write_ensemble_csv(&b, &ens).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 5 * 2);
    assert_eq!(file_digest(&a).unwrap(), file_digest(&b).unwrap());

    let meta = dir.path().join("a.meta");
    write_ensemble_meta(&meta, &ens, 7).unwrap();
    let parsed = parse_kv(&std::fs::read_to_string(&meta).unwrap(), "meta").unwrap();
    let head = kv_section(&parsed, "meta", "meta").unwrap();
    assert_eq!(kv_get(head, "n_steps", "meta").unwrap(), "4");
}

#[test]
fn params_container_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec(SystemKind::Binary, 10).unwrap();
    for family in [
        crate::models::ModelFamily::BroGnet,
        crate::models::ModelFamily::BFgn,
        crate::models::ModelFamily::Bnn,
        crate::models::ModelFamily::Nn,
    ] {
        let mut params = init_params(family, &spec, 123);
        // Give the values full-entropy mantissas.
        let mut rng = rng_for(5, "container-test");
        for v in params.values_mut() {
            for x in v.data_mut() {
                *x += rng.random_range(-1.0..1.0) / 3.0;
            }
        }
        let path = dir.path().join(format!("{}.params", family.tag()));
        save_params(&path, &params).unwrap();
        let loaded = load_params(&path).unwrap();
        assert_eq!(loaded.family, params.family);
        assert_eq!(loaded.arch, params.arch);
        assert_eq!(loaded.names(), params.names());
        for (a, b) in loaded.values().iter().zip(params.values()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

#[test]
fn opt_state_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = default_spec(SystemKind::Linear, 2).unwrap();
    let mut params = init_params(crate::models::ModelFamily::Bnn, &spec, 3);
    let mut state = crate::tensor::AdamState::new(params.values());
    let grads: Vec<Array> = params
        .values()
        .iter()
        .map(|p| Array::full(p.shape().to_vec(), 0.25))
        .collect();
    for _ in 0..3 {
        adam_step(params.values_mut(), &grads, &mut state, 1e-3).unwrap();
    }
    let path = dir.path().join("opt.state");
    save_opt_state(&path, &state).unwrap();
    let loaded = load_opt_state(&path).unwrap();
    assert_eq!(loaded.step_count(), 3);
    let (m0, v0) = state.moments();
    let (m1, v1) = loaded.moments();
    assert_eq!(m0, m1);
    assert_eq!(v0, v1);
}

#[test]
fn corrupt_containers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.params");
    std::fs::write(&path, b"not a container").unwrap();
    assert!(read_container(&path).is_err());

    let spec = default_spec(SystemKind::Linear, 2).unwrap();
    let params = init_params(crate::models::ModelFamily::Nn, &spec, 1);
    save_params(&path, &params).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, bytes).unwrap();
    assert!(load_params(&path).is_err());
}

#[test]
fn fmt_f64_round_trips_exactly() {
    for v in [
        0.0,
        1.0,
        -1.5e-300,
        std::f64::consts::PI,
        2.0 / 3.0,
        6.02214076e23,
    ] {
        let s = fmt_f64(v);
        let back: f64 = s.parse().unwrap();
        assert_eq!(back.to_bits(), v.to_bits(), "{s}");
    }
}
