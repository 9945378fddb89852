//! Desk-scale pilot: segmenter, then a short translation run on 16 + 16
//! synthetic images; prints timings, loss ratio and attention IoU.

use std::time::Instant;

use casgan_core::config::RunConfig;
use casgan_core::cycles::run_forward;
use casgan_core::data::{SynthScene, Stream, Unpaired, DEFAULT_IMPRINT};
use casgan_core::nets::init_networks;
use casgan_core::segsem::{train_segmenter, SegSample};
use casgan_core::trainer::{train, TrainOutputs, TrainState};

fn iou(a: &[f64], m: &[f64], th: f64) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for (&p, &t) in a.iter().zip(m) {
        let b = p > th;
        let t = t > 0.5;
        if b && t {
            i += 1.0;
        }
        if b || t {
            u += 1.0;
        }
    }
    if u == 0.0 { 1.0 } else { i / u }
}

fn main() {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let imprint: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(DEFAULT_IMPRINT);
    let res: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(6);
    let cfg = RunConfig {
        max_steps: steps,
        n_res_blocks: res,
        ..RunConfig::default()
    };
    let data_seed = cfg.seed + 2;
    let size = cfg.image_size;
    let scenes_a: Vec<SynthScene> = (0..16)
        .map(|k| SynthScene::generate(Stream::TrainA.scene_seed(data_seed, k), size, imprint).unwrap())
        .collect();
    let scenes_b: Vec<SynthScene> = (0..16)
        .map(|k| SynthScene::generate(Stream::TrainB.scene_seed(data_seed, k), size, imprint).unwrap())
        .collect();
    let b: Vec<_> = scenes_b.iter().map(|s| s.angiography.clone()).collect();
    let seg: Vec<SegSample> = (0..64)
        .map(|k| {
            let s = SynthScene::generate(Stream::Seg.scene_seed(data_seed, k), size, imprint).unwrap();
            SegSample::new(s.angiography, s.vessel_mask).unwrap()
        })
        .collect();
    let t0 = Instant::now();
    let out = train_segmenter(&seg, &cfg).unwrap();
    println!("segmenter: val dice {:.3} in {:.1}s", out.val_dice, t0.elapsed().as_secs_f64());

    let mut bundle = init_networks(&cfg, cfg.seed).unwrap();
    bundle.install_segmenter(out.net).unwrap();
    let mut state = TrainState::new(bundle).unwrap();
    let a: Vec<_> = scenes_a.iter().map(|s| s.background.clone()).collect();
    let data = Unpaired::new(a.clone(), b, cfg.seed + 1);
    let t1 = Instant::now();
    let mut cb = |s: &TrainState, r: &casgan_core::losses::LossReport| {
        if s.step % 250 == 0 {
            let mut ia = 0.0;
            let mut ib = 0.0;
            for (sa, sb) in scenes_a.iter().zip(&scenes_b) {
                let f = run_forward(&s.bundle, &sa.background).unwrap();
                ia += iou(f.masks.attention.data(), sa.vessel_mask.data(), 0.5) / 16.0;
                let w = casgan_core::cycles::run_backward(&s.bundle, &sb.angiography).unwrap();
                let zy = casgan_core::nets::encode_vess(&s.bundle, &w.y).unwrap();
                let m = casgan_core::nets::decode_masks(&s.bundle, &zy).unwrap();
                ib += iou(m.attention.data(), sb.vessel_mask.data(), 0.5) / 16.0;
            }
            println!("step {} IoU x-side {ia:.3} y-side {ib:.3}", s.step);
        }
        if s.step % 25 == 0 {
            println!("step {} total {:.3} cyc {:.3} gan {:.3}/{:.3}/{:.3} d {:.3}/{:.3}/{:.3} t {:.0}s",
                s.step, r.total, r.cycle_img, r.gan_angio, r.gan_bg, r.gan_sem, r.d_angio, r.d_bg, r.d_sem,
                t1.elapsed().as_secs_f64());
        }
    };
    let reports = train(&mut state, &data, TrainOutputs { on_step: Some(&mut cb), ..Default::default() }).unwrap();
    let secs = t1.elapsed().as_secs_f64();
    let n = reports.len();
    let head: f64 = reports[..50.min(n)].iter().map(|r| r.total).sum::<f64>() / 50f64.min(n as f64);
    let tail_start = n.saturating_sub(51);
    let tail: f64 = reports[tail_start..].iter().map(|r| r.total).sum::<f64>() / (n - tail_start) as f64;
    println!("train: {n} steps in {secs:.1}s, head {head:.3} tail {tail:.3} ratio {:.3}", tail / head);
    let ths = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
    let mut ious = vec![0.0; ths.len()];
    let (mut on, mut off) = (0.0, 0.0);
    for s in &scenes_a {
        let f = run_forward(&state.bundle, &s.background).unwrap();
        let att = f.masks.attention.data();
        let m = s.vessel_mask.data();
        for (k, &th) in ths.iter().enumerate() {
            ious[k] += iou(att, m, th) / scenes_a.len() as f64;
        }
        let nv = m.iter().sum::<f64>();
        on += att.iter().zip(m).map(|(a, m)| a * m).sum::<f64>() / nv / 16.0;
        off += att.iter().zip(m).map(|(a, m)| a * (1.0 - m)).sum::<f64>() / (m.len() as f64 - nv) / 16.0;
    }
    if let Some(dir) = std::env::args().nth(4) {
        std::fs::create_dir_all(&dir).unwrap();
        for (k, s) in scenes_a.iter().take(4).enumerate() {
            let f = run_forward(&state.bundle, &s.background).unwrap();
            casgan_core::data::save_unit_png(&format!("{dir}/{k}_attn.png").as_ref(), &f.masks.attention).unwrap();
            casgan_core::data::save_png(&format!("{dir}/{k}_x.png").as_ref(), &s.background).unwrap();
            casgan_core::data::save_png(&format!("{dir}/{k}_gen.png").as_ref(), &f.y_g).unwrap();
            casgan_core::data::save_unit_png(&format!("{dir}/{k}_mask.png").as_ref(), &s.vessel_mask).unwrap();
        }
    }
    println!("mean attention on vessels {on:.3} off {off:.3}");
    for (th, v) in ths.iter().zip(&ious) {
        println!("mean IoU @ {th}: {v:.3}");
    }
}
