//! Measurements shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use mokt::blocks::{gated_block_forward, BlockWeights, GatedBlockConfig, MambaAblation, MixerKind};
use mokt::mixers::{ssm_scan_parallel, ssm_scan_sequential, SsmParams};
use mokt::models::{checkpoint, MambaOut, Model, ModelConfig};
use mokt::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Block weights drawn with a large std so every path contributes visibly.
pub fn loud_weights<T: Element>(cfg: &GatedBlockConfig, seed: u64) -> BlockWeights<Tensor<T>> {
    let mut r = rng(seed);
    let base = BlockWeights::<Tensor<T>>::init(cfg, &mut r).unwrap();
    base.try_map(|name, t| {
        Ok(if name.ends_with("a_log") {
            t.clone()
        } else {
            Tensor::randn(t.shape().to_vec(), 0.5, &mut r)
        })
    })
    .unwrap()
}

/// Largest `|block(x) - x|` with the output projection and its bias zeroed.
pub fn zero_projection_gap<T: Element>(kind: MixerKind, seed: u64) -> f64 {
    let cfg = GatedBlockConfig::new(12, kind).unwrap();
    let mut w = loud_weights::<T>(&cfg, seed);
    w.fc2.weight = Tensor::zeros(w.fc2.weight.shape().to_vec());
    w.fc2.bias = Tensor::zeros(w.fc2.bias.shape().to_vec());
    let x = Tensor::<T>::randn([2, 5, 4, 12], 1.0, &mut rng(seed + 1));
    let y = gated_block_forward(&x, &w, &cfg, false, &mut rng(0)).unwrap();
    y.data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a.f64() - b.f64()).abs())
        .fold(0.0, f64::max)
}

/// Largest difference between a Gated CNN block and a Mamba block with the
/// SSM and the extra activation removed, sharing all common weights.
pub fn ablated_mamba_gap(seed: u64) -> f64 {
    let gated = GatedBlockConfig::new(16, MixerKind::GatedConv).unwrap();
    let mut mamba = GatedBlockConfig::new(16, MixerKind::MambaSsm).unwrap();
    mamba.ablation = MambaAblation::GATED_CONV_EQUIVALENT;
    let wm = loud_weights::<f64>(&mamba, seed);
    let wg = BlockWeights {
        mixer: mokt::blocks::MixerWeights {
            conv: wm.mixer.conv.clone(),
            ssm: None,
        },
        ..wm.clone()
    };
    let x = Tensor::<f64>::randn([2, 6, 5, 16], 1.0, &mut rng(seed + 1));
    let a = gated_block_forward(&x, &wg, &gated, false, &mut rng(0)).unwrap();
    let b = gated_block_forward(&x, &wm, &mamba, false, &mut rng(0)).unwrap();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

/// Saves a freshly initialized micro model, reloads it into a model built
/// from a different seed, and checks tensors and logits are bit-identical.
pub fn checkpoint_round_trip<T: Element>(seed: u64) -> bool {
    let cfg = ModelConfig::preset("micro").unwrap();
    let a = MambaOut::<T>::new(cfg.clone(), &mut rng(seed)).unwrap();
    let mut bytes = Vec::new();
    checkpoint::save(a.params(), &mut bytes).unwrap();
    let loaded = checkpoint::load::<T, _>(bytes.as_slice()).unwrap();
    let mut b = MambaOut::<T>::new(cfg, &mut rng(seed + 99)).unwrap();
    checkpoint::restore(b.params_mut(), &loaded).unwrap();
    let same_tensors = a
        .params()
        .iter()
        .zip(b.params().iter())
        .all(|((na, ta), (nb, tb))| na == nb && ta == tb);
    let x = Tensor::<T>::randn([2, 32, 32, 3], 1.0, &mut rng(seed + 3));
    let ya = a.forward(&x, false, &mut rng(0)).unwrap();
    let yb = b.forward(&x, false, &mut rng(0)).unwrap();
    same_tensors && ya.data() == yb.data()
}

/// Max abs deviation of both scans from the cumulative-sum closed form
/// when `A = -exp(-60)`, i.e. `Ā = 1` to machine precision.
pub fn vanishing_a_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, d, n) = (128, 3, 5);
    let mut p = SsmParams::<f64>::init(d, n, &mut r);
    p.a_log = Tensor::full([d, n], -60.0);
    p.delta_w = Tensor::randn([d, d], 0.3, &mut r);
    p.b_w = Tensor::randn([d, n], 0.5, &mut r);
    p.b_b = Tensor::randn([n], 0.5, &mut r);
    p.c_w = Tensor::randn([d, n], 0.5, &mut r);
    p.c_b = Tensor::randn([n], 0.5, &mut r);
    let x = Tensor::<f64>::randn([t, d], 1.0, &mut r);
    let inp = p.selective_inputs(&x).unwrap();
    let mut h = vec![0.0; d * n];
    let mut expect = Vec::with_capacity(t * d);
    for ti in 0..t {
        for di in 0..d {
            let mut y = 0.0;
            for ni in 0..n {
                h[di * n + ni] += inp.delta.at(&[ti, di]) * inp.b.at(&[ti, ni]) * x.at(&[ti, di]);
                y += inp.c.at(&[ti, ni]) * h[di * n + ni];
            }
            expect.push(y);
        }
    }
    [ssm_scan_sequential(&x, &p).unwrap(), ssm_scan_parallel(&x, &p).unwrap()]
        .iter()
        .flat_map(|y| {
            y.data()
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
