//! Vessel segmenter training and frozen semantic extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{derive_seed, epoch_permutation, hflip};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{init_segmenter, Network, NetKind, SemanticMap};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// One annotated image: `1 x C x H x W` image and `1 x 1 x H x W` binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (n, _, h, w) = image.dims4()?;
        if n != 1 || mask.shape() != [1, 1, h, w] {
            return Err(Error::Shape(format!(
                "mask {:?} does not fit image {:?}",
                mask.shape(),
                image.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("mask values must be 0 or 1".into()));
        }
        Ok(Self { image, mask })
    }
}

#[derive(Debug, Clone)]
pub struct SegOutcome {
    pub net: Network,
    /// Mean per-image Dice of the thresholded output on the held-out split.
    pub val_dice: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

/// Hard Dice of `prob > 0.5` against a binary mask; 1 when both are empty.
pub fn dice(prob: &[f64], mask: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sm) = (0.0, 0.0, 0.0);
    for (&p, &m) in prob.iter().zip(mask) {
        let b = if p > 0.5 { 1.0 } else { 0.0 };
        inter += b * m;
        sp += b;
        sm += m;
    }
    if sp + sm == 0.0 {
        1.0
    } else {
        2.0 * inter / (sp + sm)
    }
}

/// Mean hard Dice of `net` over `samples`.
pub fn mean_dice(net: &Network, samples: &[&SegSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let p = extract_semantic(net, &s.image)?;
        total += dice(p.data(), s.mask.data());
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Deterministic train/validation split: a fifth (at least one) held out.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = epoch_permutation(seed, 0x5E6, 0, n);
    let n_val = (n / 5).max(1);
    let val = perm[..n_val].to_vec();
    let train = perm[n_val..].to_vec();
    (train, val)
}

/// Probability map of a trained segmenter for a `N x C x H x W` batch.
pub fn extract_semantic(net: &Network, img: &Tensor) -> Result<SemanticMap> {
    if net.kind() != NetKind::Segmenter {
        return Err(Error::State(format!("{} is not a segmenter", net.kind())));
    }
    let (_, c, _, _) = img.dims4()?;
    let expected = net.params()[0].value.shape()[1];
    if c != expected {
        return Err(Error::Shape(format!("segmenter expects {expected} channel(s), got {c}")));
    }
    Ok(net.apply(img))
}

/// `0.5 BCE + 0.5 soft Dice` loss value and gradients for one batch.
pub fn seg_loss_and_grads(net: &Network, images: &Tensor, masks: &Tensor) -> (f64, Vec<Option<Tensor>>) {
    let mut g = Graph::new();
    let b = net.bind(&mut g, true);
    let x = g.constant(images.clone());
    let logits = net.forward_logits(&mut g, &b, x);
    let p = g.sigmoid(logits);
    let bce = g.bce_with_logits(logits, masks);
    let dl = g.soft_dice(p, masks);
    let loss = g.weighted_sum(&[(bce, 0.5), (dl, 0.5)]);
    let mut grads = g.backward(loss);
    let gs = b.vars().iter().map(|&v| grads.take(v)).collect();
    (g.item(loss), gs)
}

/// Trains a fresh segmenter with Adam under the config's segmenter
/// hyperparameters; horizontal flips with probability 0.5.
pub fn train_segmenter(samples: &[SegSample], cfg: &RunConfig) -> Result<SegOutcome> {
    if samples.len() < 2 {
        return Err(Error::Precondition(format!(
            "segmenter training needs at least 2 samples for a train/validation split, got {}",
            samples.len()
        )));
    }
    if samples.iter().all(|s| s.mask.data().iter().all(|&v| v == 0.0)) {
        log::warn!("every segmentation mask is empty; training proceeds");
    }
    let (train_idx, val_idx) = split_indices(samples.len(), cfg.seed);
    let mut net = init_segmenter(cfg, derive_seed(cfg.seed, 0x5E6, 1));
    let mut opt = Adam::new(&net, 0.9, 0.999, cfg.adam_eps);
    let mut losses = Vec::with_capacity(cfg.seg_steps as usize);
    let bs = cfg.seg_batch_size.min(train_idx.len());
    let per_epoch = train_idx.len().div_ceil(bs);
    for step in 0..cfg.seg_steps {
        let epoch = step / per_epoch as u64;
        let slot = (step % per_epoch as u64) as usize;
        let perm = epoch_permutation(cfg.seed, 0x5E7, epoch, train_idx.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5E8, step));
        let mut imgs = Vec::with_capacity(bs);
        let mut masks = Vec::with_capacity(bs);
        for j in 0..bs {
            let s = &samples[train_idx[perm[(slot * bs + j) % perm.len()]]];
            if rng.random_bool(0.5) {
                imgs.push(hflip(&s.image));
                masks.push(hflip(&s.mask));
            } else {
                imgs.push(s.image.clone());
                masks.push(s.mask.clone());
            }
        }
        let xi = Tensor::concat_batch(&imgs.iter().collect::<Vec<_>>())?;
        let xm = Tensor::concat_batch(&masks.iter().collect::<Vec<_>>())?;
        let (loss, grads) = seg_loss_and_grads(&net, &xi, &xm);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                term: "segmentation".into(),
            });
        }
        losses.push(loss);
        opt.step(&mut net, &grads, cfg.seg_lr)?;
    }
    let val: Vec<&SegSample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let val_dice = mean_dice(&net, &val)?;
    Ok(SegOutcome {
        net,
        val_dice,
        train_indices: train_idx,
        val_indices: val_idx,
        losses,
    })
}
