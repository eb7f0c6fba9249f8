//! Embedder and full-model behaviour through the public API.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slip_core::data::{FrequencyClass, SensorSeries};
use slip_core::flexmlp::{patchify, resize_weights, FlexMlp, PatchSpec};
use slip_core::model::{ModelConfig, PreparedSensor, SlipModel};
use slip_core::params::ParamStore;
use slip_core::tensor::Matrix;

fn small() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        base_patch: 8,
        embedder_mlp_dim: 32,
        encoder_depth: 2,
        encoder_ffn_dim: 32,
        text_encoder_depth: 1,
        text_decoder_depth: 1,
        text_ffn_dim: 32,
        unfrozen_encoder_layers: 1,
        embed_dim: 8,
        ..Default::default()
    }
}

fn wave(channels: usize, len: usize, phase: f64, freq: FrequencyClass) -> SensorSeries {
    let values = (0..channels)
        .map(|c| (0..len).map(|t| (t as f64 * 0.3 + phase + c as f64).sin()).collect())
        .collect();
    SensorSeries::from_values(values, freq).unwrap()
}

#[test]
fn resizing_preserves_linear_ramps_and_is_identity_at_base() {
    let base = 8;
    // Row 0 is an affine ramp inside each block, row 1 is constant.
    let mut data: Vec<f64> = (0..3 * base)
        .map(|i| 10.0 * (i / base) as f64 + 0.5 * (i % base) as f64)
        .collect();
    data.extend(vec![1.0; 3 * base]);
    let w = Matrix::from_vec(2, 3 * base, data);
    assert_eq!(resize_weights(&w, base, base).unwrap(), w);
    for target in [2, 5, 13, 64] {
        let r = resize_weights(&w, base, target).unwrap();
        assert_eq!(r.cols(), 3 * target);
        for block in 0..3 {
            for j in 0..target {
                let x = j as f64 * (base - 1) as f64 / (target - 1) as f64;
                let want = 10.0 * block as f64 + 0.5 * x;
                assert!(
                    (r.row(0)[block * target + j] - want).abs() < 1e-12,
                    "target {target} block {block} j {j}"
                );
                assert!((r.row(1)[block * target + j] - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(resize_weights(&w, base, 1).is_err());
}

#[test]
fn embedder_parameter_count_ignores_patch_size() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = PatchSpec {
        base_patch: 16,
        hidden_dim: 12,
        mlp_dim: 20,
        inner_activation: true,
    };
    let flex = FlexMlp::new(&mut store, "e", spec, &mut rng).unwrap();
    let n = flex.num_parameters(&store);
    let values: Vec<f64> = (0..100).map(|t| (t as f64).cos()).collect();
    let mask = vec![true; 100];
    let time: Vec<i64> = (0..100).collect();
    for p in [4, 8, 16, 32, 64] {
        let batch = patchify(&values, &mask, &time, p).unwrap();
        assert_eq!(batch.num_patches(), 100usize.div_ceil(p));
        let out = flex.embed(&store, &batch).unwrap();
        assert_eq!((out.rows(), out.cols()), (batch.num_patches(), 12));
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert_eq!(flex.num_parameters(&store), n);
    }
}

#[test]
fn packed_batches_match_single_sample_features() {
    let model = SlipModel::new(small()).unwrap();
    let series = [
        wave(1, 64, 0.0, FrequencyClass::Hourly),
        wave(3, 48, 1.0, FrequencyClass::Second),
        wave(2, 200, 2.0, FrequencyClass::Minute),
    ];
    let prepared: Vec<PreparedSensor> = series.iter().map(|s| model.prepare_sensor(s).unwrap()).collect();
    let refs: Vec<&PreparedSensor> = prepared.iter().collect();
    let packed = model.sensor_features(&refs, 8).unwrap();
    for (i, p) in prepared.iter().enumerate() {
        let alone = model.sensor_features(&[p], 1).unwrap();
        for (a, b) in alone.cls.row(0).iter().zip(packed.cls.row(i)) {
            assert!((a - b).abs() < 1e-10, "sample {i}");
        }
        for (a, b) in alone.mean_pool.row(0).iter().zip(packed.mean_pool.row(i)) {
            assert!((a - b).abs() < 1e-10, "sample {i}");
        }
    }
}

#[test]
fn features_have_fixed_width_for_any_length_and_channel_count() {
    let model = SlipModel::new(small()).unwrap();
    for (c, len) in [(1, 16), (4, 64), (2, 500)] {
        let p = model
            .prepare_sensor(&wave(c, len, 0.5, FrequencyClass::Second))
            .unwrap();
        let f = model.sensor_features(&[&p], 1).unwrap();
        assert_eq!(f.mean_pool.cols(), 16);
        assert_eq!(f.cls_embedding.cols(), 8);
        let norm: f64 = f.cls_embedding.row(0).iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn greedy_caption_is_deterministic_and_bounded() {
    let model = SlipModel::new(small()).unwrap();
    let p = model.prepare_sensor(&wave(2, 64, 0.0, FrequencyClass::Hourly)).unwrap();
    let a = model.caption(&p, 20).unwrap();
    assert_eq!(a, model.caption(&p, 20).unwrap());
    assert!(a.len() <= 20 * 4);
}

#[test]
fn fixed_patch_size_overrides_frequency_rule() {
    let model = SlipModel::new(ModelConfig {
        fixed_patch_size: Some(12),
        ..small()
    })
    .unwrap();
    for freq in FrequencyClass::ALL {
        let s = wave(1, 100, 0.0, freq);
        assert_eq!(model.patch_size_for(&s).unwrap(), 12);
        assert_eq!(model.prepare_sensor(&s).unwrap().channels[0].num_patches(), 9);
    }
}
