#![allow(dead_code)]

use casgan_core::config::RunConfig;
use casgan_core::data::{SynthScene, Stream};
use casgan_core::nets::{init_networks, init_segmenter, NetworkBundle};
use casgan_core::segsem::{train_segmenter, SegSample};
use casgan_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 8x8 single-channel model with C' = 8; small enough for finite differences.
pub fn micro_config() -> RunConfig {
    RunConfig {
        image_size: 8,
        latent_channels: 8,
        gen_base_width: 4,
        n_res_blocks: 2,
        disc_base_width: 4,
        disc_layers: 1,
        seg_depth: 2,
        seg_base_width: 4,
        buffer_size: 4,
        epochs_total: 10,
        epochs_constant: 7,
        ..RunConfig::default()
    }
}

/// 16x16 model that trains a few steps per second.
pub fn small_config() -> RunConfig {
    RunConfig {
        image_size: 16,
        latent_channels: 8,
        gen_base_width: 4,
        n_res_blocks: 2,
        disc_base_width: 4,
        disc_layers: 2,
        seg_depth: 2,
        seg_base_width: 4,
        buffer_size: 3,
        epochs_total: 20,
        epochs_constant: 10,
        checkpoint_every: 1,
        ..RunConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn image(cfg: &RunConfig, seed: u64) -> Tensor {
    let s = cfg.image_size;
    Tensor::uniform(&[1, cfg.image_channels, s, s], -0.9, 0.9, &mut rng(seed))
}

/// Bundle with an untrained (but installed) segmenter.
pub fn bundle(cfg: &RunConfig, seed: u64) -> NetworkBundle {
    let mut b = init_networks(cfg, seed).unwrap();
    b.install_segmenter(init_segmenter(cfg, seed ^ 0x55)).unwrap();
    b
}

pub fn scenes(stream: Stream, seed: u64, n: usize, size: usize, imprint: f64) -> Vec<SynthScene> {
    (0..n)
        .map(|k| SynthScene::generate(stream.scene_seed(seed, k), size, imprint).unwrap())
        .collect()
}

pub fn seg_samples(seed: u64, n: usize, size: usize, imprint: f64) -> Vec<SegSample> {
    scenes(Stream::Seg, seed, n, size, imprint)
        .into_iter()
        .map(|s| SegSample::new(s.angiography, s.vessel_mask).unwrap())
        .collect()
}

/// Bundle whose segmenter was briefly trained on synthetic annotations.
pub fn trained_bundle(cfg: &RunConfig, seed: u64) -> NetworkBundle {
    let seg_cfg = RunConfig {
        seg_steps: 10,
        ..cfg.clone()
    };
    let out = train_segmenter(&seg_samples(seed, 8, cfg.image_size, casgan_core::data::DEFAULT_IMPRINT), &seg_cfg).unwrap();
    let mut b = init_networks(cfg, seed).unwrap();
    b.install_segmenter(out.net).unwrap();
    b
}

pub struct GradSample {
    pub name: String,
    pub finite_diff: f64,
    pub analytic: f64,
    /// A ReLU, L1 or max switch changes inside `[p - h, p + h]`.
    pub crosses_kink: bool,
}

/// Central differences against backprop for `n` parameters drawn uniformly
/// from all scalar generator parameters of the micro model.
pub fn gradient_check(n: usize, h: f64, seed: u64) -> Vec<GradSample> {
    use casgan_core::graph::switch_trace;
    use casgan_core::losses::loss_pred;
    use casgan_core::nets::{encode_bg, encode_vess, predict_vess, NetKind};
    use casgan_core::trainer::generator_pass;
    use rand::Rng;

    let cfg = micro_config();
    let mut b = bundle(&cfg, seed);
    let x = image(&cfg, seed + 1);
    let y = image(&cfg, seed + 2);
    let pass = generator_pass(&b, &x, &y, 0, true).unwrap();
    // the predictor's target is detached, so differentiate against the
    // target of the unperturbed model
    let target = encode_vess(&b, &y).unwrap();
    let l4 = cfg.lambda4;
    let objective = |b: &NetworkBundle| {
        switch_trace(|| {
            let r = generator_pass(b, &x, &y, 0, false).unwrap().report;
            let z = predict_vess(b, &encode_bg(b, &y).unwrap()).unwrap();
            r.total - l4 * r.pred + l4 * loss_pred(&z, &target).unwrap()
        })
    };
    let mut slots = Vec::new();
    for (gi, kind) in NetKind::GENERATORS.iter().enumerate() {
        for (pi, p) in b.net(*kind).unwrap().params().iter().enumerate() {
            slots.push((gi, pi, p.value.len()));
        }
    }
    let total: usize = slots.iter().map(|s| s.2).sum();
    let mut r = rng(seed + 3);
    (0..n)
        .map(|_| {
            let mut ei = r.random_range(0..total);
            let &(gi, pi, _) = slots
                .iter()
                .find(|s| {
                    let hit = ei < s.2;
                    if !hit {
                        ei -= s.2;
                    }
                    hit
                })
                .unwrap();
            let kind = NetKind::GENERATORS[gi];
            let analytic = pass.grads[gi][pi].as_ref().map_or(0.0, |g| g.data()[ei]);
            let orig = b.net(kind).unwrap().params()[pi].value.data()[ei];
            let mut eval = |v: f64| {
                b.net_mut(kind).unwrap().params_mut()[pi].value.data_mut()[ei] = v;
                objective(&b)
            };
            let (plus, tp) = eval(orig + h);
            let (minus, tm) = eval(orig - h);
            eval(orig);
            GradSample {
                name: format!("{kind} {}[{ei}]", b.net(kind).unwrap().params()[pi].name),
                finite_diff: (plus - minus) / (2.0 * h),
                analytic,
                crosses_kink: tp != tm,
            }
        })
        .collect()
}

/// The first `n` samples whose stencil stays on one smooth piece, drawn
/// from at most `4 n` parameters, and the number of kinked draws skipped.
pub fn kink_free_gradients(n: usize, h: f64, seed: u64) -> (Vec<GradSample>, usize) {
    let mut skipped = 0;
    let mut out = Vec::new();
    for g in gradient_check(4 * n, h, seed) {
        if out.len() == n {
            break;
        }
        if g.crosses_kink {
            skipped += 1;
        } else {
            out.push(g);
        }
    }
    (out, skipped)
}

/// `|a - b| / max(|a|, |b|)`, with gradients below `floor` in both
/// estimates compared absolutely against `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Distance in units in the last place between two same-signed floats.
pub fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.signum() != b.signum() {
        return u64::MAX;
    }
    a.to_bits().abs_diff(b.to_bits())
}
