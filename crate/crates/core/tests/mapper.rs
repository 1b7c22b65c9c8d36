//! Projection-head tests: a frozen NumPy golden vector for the full forward
//! pass, the exact analytic parameter count, determinism, mask invariance,
//! and the HSPH parameter-file format.

use hsproj_core::mapper::{
    self, forward, io, param_count, param_specs, MapperConfig, MapperError, MapperParams,
};
use hsproj_core::optim::OptimizerState;

fn tiny_config() -> MapperConfig {
    MapperConfig {
        d_h: 3,
        d_m: 4,
        d: 2,
        layers: 1,
        heads: 2,
        ff_dim: 5,
        max_positions: 4,
        seed: 0,
    }
}

/// Deterministic sin-filled parameters so the forward pass can be reproduced
/// exactly in an independent implementation.
fn sin_params(config: &MapperConfig) -> MapperParams {
    let blocks = param_specs(config)
        .iter()
        .enumerate()
        .map(|(b, spec)| {
            (0..spec.len())
                .map(|i| (0.7 * b as f64 + 0.3 * i as f64).sin())
                .collect()
        })
        .collect();
    MapperParams {
        config: config.clone(),
        blocks,
    }
}

#[test]
fn forward_matches_numpy_golden_vector() {
    // Expected embedding computed with a NumPy reimplementation of the full
    // architecture (pre-norm encoder, tanh GELU, masked attention, masked
    // mean pool, L2 output norm) on sin-filled parameters and inputs.
    let config = tiny_config();
    let params = sin_params(&config);
    let hidden: Vec<f64> = (0..9).map(|i| (1.1 + 0.25 * i as f64).sin()).collect();
    let out = forward(&params, &hidden, &[true, true, false]).unwrap();
    let expected = [0.8539726593451342, 0.5203178808103749];
    assert_eq!(out.len(), 2);
    for (got, want) in out.iter().zip(expected) {
        assert!(
            (got - want).abs() < 1e-9,
            "golden vector mismatch: {got} vs {want}"
        );
    }
}

#[test]
fn param_count_matches_closed_form() {
    let count_for = |c: &MapperConfig| {
        let per_layer = 2 * c.d_m                       // ln_attn gain+bias
            + 4 * (c.d_m * c.d_m + c.d_m)               // q, k, v, o projections
            + 2 * c.d_m                                 // ln_ff gain+bias
            + c.d_m * c.ff_dim + c.ff_dim               // ff1
            + c.ff_dim * c.d_m + c.d_m; // ff2
        c.d_h * c.d_m + c.d_m                           // input projection
            + c.max_positions * c.d_m                   // positional table
            + c.layers * per_layer
            + 2 * c.d_m                                 // final norm
            + c.d_m * c.d + c.d // output projection
    };

    let tiny = tiny_config();
    assert_eq!(param_count(&tiny), count_for(&tiny));
    assert_eq!(
        MapperParams::init(&tiny).unwrap().param_count(),
        count_for(&tiny)
    );

    let default = MapperConfig::default();
    assert_eq!(count_for(&default), 30_570_496);
    assert_eq!(param_count(&default), 30_570_496);
}

#[test]
fn init_is_deterministic_per_seed() {
    let config = MapperConfig {
        seed: 42,
        ..tiny_config()
    };
    let a = MapperParams::init(&config).unwrap();
    let b = MapperParams::init(&config).unwrap();
    assert_eq!(a, b);

    let c = MapperParams::init(&MapperConfig {
        seed: 43,
        ..config
    })
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_respects_fan_in_bounds_and_structured_blocks() {
    let config = tiny_config();
    let params = MapperParams::init(&config).unwrap();
    for (spec, block) in param_specs(&config).iter().zip(&params.blocks) {
        assert_eq!(block.len(), spec.len(), "block {} length", spec.name);
        if spec.name.ends_with("gain") {
            assert!(block.iter().all(|&v| v == 1.0), "{} should be ones", spec.name);
        } else if spec.rows == 1 || spec.name == "pos_emb" {
            assert!(block.iter().all(|&v| v == 0.0), "{} should be zeros", spec.name);
        } else {
            let bound = 1.0 / (spec.rows as f64).sqrt();
            assert!(
                block.iter().all(|&v| v.abs() <= bound),
                "{} exceeds 1/sqrt(fan_in)",
                spec.name
            );
            assert!(block.iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn masked_rows_cannot_influence_the_embedding() {
    let config = tiny_config();
    let params = MapperParams::init(&MapperConfig {
        seed: 9,
        ..config
    })
    .unwrap();
    let hidden: Vec<f64> = (0..9).map(|i| (0.2 * i as f64).cos()).collect();
    let mask = [true, false, true];
    let base = forward(&params, &hidden, &mask).unwrap();

    let mut tampered = hidden.clone();
    for v in &mut tampered[3..6] {
        *v = 1e6; // rewrite the masked row completely
    }
    let out = forward(&params, &tampered, &mask).unwrap();
    assert_eq!(base, out, "masked positions leaked into the output");
}

#[test]
fn output_is_unit_norm() {
    let config = tiny_config();
    let params = MapperParams::init(&MapperConfig {
        seed: 3,
        ..config
    })
    .unwrap();
    for trial in 0..5 {
        let hidden: Vec<f64> = (0..12)
            .map(|i| ((trial * 31 + i) as f64 * 0.17).sin())
            .collect();
        let out = forward(&params, &hidden, &[true; 4]).unwrap();
        let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6, "norm {norm} on trial {trial}");
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let config = tiny_config();
    let params = MapperParams::init(&config).unwrap();

    // Too many positions for the positional table.
    let hidden = vec![0.1; 5 * config.d_h];
    assert!(matches!(
        forward(&params, &hidden, &[true; 5]),
        Err(MapperError::SequenceTooLong { n: 5, max: 4 })
    ));

    // Hidden length inconsistent with n x d_h.
    assert!(matches!(
        forward(&params, &[0.1; 7], &[true, true]),
        Err(MapperError::HiddenShape { len: 7, n: 2, d_h: 3 })
    ));

    // Fully masked input has no content to pool.
    assert!(forward(&params, &[0.1; 6], &[false, false]).is_err());
}

#[test]
fn config_validation_catches_structural_errors() {
    let ok = tiny_config();
    assert!(ok.validate().is_ok());

    let bad_heads = MapperConfig {
        heads: 3,
        ..tiny_config()
    };
    assert!(matches!(
        bad_heads.validate(),
        Err(MapperError::InvalidConfig(_))
    ));

    for zeroed in [
        MapperConfig { d_m: 0, ..tiny_config() },
        MapperConfig { layers: 0, ..tiny_config() },
        MapperConfig { max_positions: 0, ..tiny_config() },
    ] {
        assert!(zeroed.validate().is_err());
    }
}

// ---------------------------------------------------------------------------
// HSPH parameter files
// ---------------------------------------------------------------------------

#[test]
fn params_roundtrip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.hsph");
    let params = sin_params(&tiny_config());
    io::save_params(&path, &params).unwrap();
    let loaded = io::load_params(&path).unwrap();
    assert_eq!(params, loaded);
}

#[test]
fn checkpoint_roundtrips_optimizer_state() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.hsph");
    let params = sin_params(&tiny_config());
    let sizes: Vec<usize> = params.blocks.iter().map(Vec::len).collect();
    let mut opt = OptimizerState::new(&sizes);
    opt.step = 17;
    for (b, block) in opt.m.iter_mut().enumerate() {
        for (i, v) in block.iter_mut().enumerate() {
            *v = 0.01 * (b as f64) + 1e-4 * (i as f64);
        }
    }
    for block in opt.v.iter_mut() {
        for (i, v) in block.iter_mut().enumerate() {
            *v = 1e-8 * (i as f64 + 1.0);
        }
    }
    io::save_checkpoint(&path, &params, &opt).unwrap();
    let (p2, opt2) = io::load_checkpoint(&path).unwrap();
    assert_eq!(params, p2);
    assert_eq!(opt.step, opt2.step);
    assert_eq!(opt.m, opt2.m);
    assert_eq!(opt.v, opt2.v);
}

#[test]
fn load_checkpoint_rejects_params_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plain.hsph");
    io::save_params(&path, &sin_params(&tiny_config())).unwrap();
    assert!(matches!(
        io::load_checkpoint(&path),
        Err(MapperError::Decode { .. })
    ));
}

#[test]
fn truncated_and_corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.hsph");
    io::save_params(&path, &sin_params(&tiny_config())).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // Every strict prefix must fail cleanly, never panic or misparse.
    for cut in [0, 3, 4, 10, bytes.len() / 2, bytes.len() - 1] {
        let short = dir.path().join("short.hsph");
        std::fs::write(&short, &bytes[..cut]).unwrap();
        assert!(
            matches!(io::load_params(&short), Err(MapperError::Decode { .. })),
            "prefix of {cut} bytes should fail to decode"
        );
    }

    // Wrong magic.
    let mut garbled = bytes.clone();
    garbled[0] = b'X';
    let bad = dir.path().join("bad.hsph");
    std::fs::write(&bad, &garbled).unwrap();
    assert!(matches!(
        io::load_params(&bad),
        Err(MapperError::Decode { .. })
    ));

    // Missing file surfaces as an I/O error, not a decode error.
    assert!(matches!(
        io::load_params(&dir.path().join("nope.hsph")),
        Err(MapperError::Io { .. })
    ));
}

#[test]
fn load_params_expecting_checks_architecture_but_not_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.hsph");
    let config = tiny_config();
    io::save_params(&path, &sin_params(&config)).unwrap();

    // Same architecture, different seed: fine.
    let reseeded = MapperConfig {
        seed: 999,
        ..config.clone()
    };
    assert!(io::load_params_expecting(&path, &reseeded).is_ok());

    // Architecture drift: refused with the offending field named.
    let wider = MapperConfig {
        d_m: 8,
        heads: 2,
        ..config
    };
    match io::load_params_expecting(&path, &wider) {
        Err(MapperError::ConfigMismatch {
            field, found, expected, ..
        }) => {
            assert_eq!(field, "d_m");
            assert_eq!((found, expected), (4, 8));
        }
        other => panic!("expected ConfigMismatch, got {other:?}"),
    }
}

#[test]
fn loaded_params_produce_identical_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.hsph");
    let params = MapperParams::init(&MapperConfig {
        seed: 5,
        ..tiny_config()
    })
    .unwrap();
    io::save_params(&path, &params).unwrap();
    let loaded = io::load_params(&path).unwrap();

    let hidden: Vec<f64> = (0..9).map(|i| (0.4 * i as f64).sin()).collect();
    let mask = [true, true, true];
    assert_eq!(
        forward(&params, &hidden, &mask).unwrap(),
        forward(&loaded, &hidden, &mask).unwrap()
    );
}

#[test]
fn specs_cover_every_block_exactly_once() {
    let config = MapperConfig {
        layers: 3,
        ..tiny_config()
    };
    let specs = param_specs(&config);
    // input (2) + positional (1) + 16 per layer + final norm (2) + output (2).
    assert_eq!(specs.len(), 3 + 16 * config.layers + 4);
    let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), specs.len(), "duplicate parameter names");
    assert_eq!(
        param_count(&config),
        specs.iter().map(|s| s.rows * s.cols).sum::<usize>()
    );
    // Decay applies to matrix weights only.
    for spec in &specs {
        let is_matrix_weight = spec.rows > 1 && spec.name != "pos_emb";
        assert_eq!(
            spec.decay, is_matrix_weight,
            "decay flag wrong for {}",
            spec.name
        );
    }
    let _ = mapper::LN_EPS; // the constant is part of the public contract
}
