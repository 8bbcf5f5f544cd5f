//! Structural identities of blocks, stochastic depth and checkpoints.

mod common;

use common::rng;
use mokt::blocks::{
    drop_path, gated_block_forward, transformer_block_forward, GatedBlockConfig, MixerKind, TransformerWeights,
};
use mokt::mixers::MixMode;
use mokt::models::{checkpoint, MambaOut, Model, ModelConfig};
use mokt::tensor::{DType, Tensor};
use mokt::Error;

#[test]
fn zero_output_projection_is_exact_identity() {
    for kind in [MixerKind::GatedConv, MixerKind::MambaSsm, MixerKind::Identity] {
        assert_eq!(common::zero_projection_gap::<f64>(kind, 7), 0.0, "{kind} f64");
        assert_eq!(common::zero_projection_gap::<f32>(kind, 7), 0.0, "{kind} f32");
    }
}

#[test]
fn transformer_with_zero_projections_is_identity() {
    let mut w = TransformerWeights::<Tensor<f64>>::init(16, 4, &mut rng(1)).unwrap();
    w.attn.wo = Tensor::zeros(w.attn.wo.shape().to_vec());
    w.fc2.weight = Tensor::zeros(w.fc2.weight.shape().to_vec());
    let x = Tensor::<f64>::randn([2, 9, 16], 1.0, &mut rng(2));
    for mode in [MixMode::FullyVisible, MixMode::Causal] {
        assert_eq!(transformer_block_forward(&x, &w, mode).unwrap(), x);
    }
}

#[test]
fn stripped_mamba_block_equals_gated_cnn_block() {
    for seed in 0..4 {
        let gap = common::ablated_mamba_gap(seed);
        assert!(gap <= 1e-12, "seed {seed}: {gap}");
    }
}

#[test]
fn full_mamba_block_differs_from_gated_cnn_block() {
    // the identity above is not vacuous: with the SSM active outputs move
    let cfg = GatedBlockConfig::new(16, MixerKind::MambaSsm).unwrap();
    let w = common::loud_weights::<f64>(&cfg, 3);
    let mut stripped = cfg.clone();
    stripped.ablation = mokt::blocks::MambaAblation::GATED_CONV_EQUIVALENT;
    let x = Tensor::<f64>::randn([1, 4, 4, 16], 1.0, &mut rng(4));
    let a = gated_block_forward(&x, &w, &cfg, false, &mut rng(0)).unwrap();
    let b = gated_block_forward(&x, &w, &stripped, false, &mut rng(0)).unwrap();
    assert!(a.data().iter().zip(b.data()).any(|(p, q)| (p - q).abs() > 1e-3));
}

#[test]
fn causal_block_ignores_future_tokens() {
    let w = TransformerWeights::<Tensor<f64>>::init(8, 2, &mut rng(5)).unwrap();
    let x = Tensor::<f64>::randn([1, 6, 8], 1.0, &mut rng(6));
    let edited = x.with_value(5 * 8 + 3, 42.0);
    let (a, b) = (
        transformer_block_forward(&x, &w, MixMode::Causal).unwrap(),
        transformer_block_forward(&edited, &w, MixMode::Causal).unwrap(),
    );
    assert_eq!(a.data()[..5 * 8], b.data()[..5 * 8]);
    let fv = transformer_block_forward(&edited, &w, MixMode::FullyVisible).unwrap();
    let fv0 = transformer_block_forward(&x, &w, MixMode::FullyVisible).unwrap();
    assert_ne!(fv.data()[..8], fv0.data()[..8]);
}

#[test]
fn drop_path_keeps_or_rescales_whole_samples() {
    let x = Tensor::<f64>::ones([400, 3]);
    assert_eq!(drop_path(&x, 0.3, false, &mut rng(0)).unwrap(), x);
    assert_eq!(drop_path(&x, 0.0, true, &mut rng(0)).unwrap(), x);
    let y = drop_path(&x, 0.25, true, &mut rng(1)).unwrap();
    let mut kept = 0;
    for row in y.data().chunks(3) {
        assert!(row.iter().all(|&v| v == row[0]));
        assert!(row[0] == 0.0 || (row[0] - 1.0 / 0.75).abs() < 1e-15);
        kept += (row[0] != 0.0) as usize;
    }
    // 400 draws at keep 0.75: 300 ± 4.5σ
    assert!((260..=340).contains(&kept), "{kept}");
    assert!(matches!(
        drop_path(&x, 1.0, true, &mut rng(0)),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn checkpoints_round_trip_bit_identically() {
    assert!(common::checkpoint_round_trip::<f32>(11));
    assert!(common::checkpoint_round_trip::<f64>(12));
}

#[test]
fn checkpoint_file_header_and_dtype_guard() {
    let dir = tempdir();
    let path = dir.join("m.mokt");
    let m = MambaOut::<f32>::new(ModelConfig::preset("micro").unwrap(), &mut rng(0)).unwrap();
    checkpoint::save_file(m.params(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], checkpoint::MAGIC);
    let entries = checkpoint::read_entries(bytes.as_slice()).unwrap();
    assert_eq!(entries.len(), m.params().len());
    assert!(entries.iter().all(|e| e.dtype == DType::F32));
    assert!(checkpoint::load_file::<f64>(&path).is_err());
    assert!(checkpoint::load::<f32, _>(&bytes[..bytes.len() - 3]).is_err());
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("mokt-structure-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
