//! Adversarial optimization loop: generator step, discriminator step,
//! replay buffers, learning-rate schedule, checkpoints and the CSV log.
//!
//! Randomness for flips and buffer replay is derived from `(seed + 1, step)`
//! and the visitation order from `(seed + 1, epoch)`, so a run resumed from
//! any checkpoint replays exactly the same stream as an uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_bundle, load_tensors, save_bundle, save_tensors};
use crate::config::RunConfig;
use crate::cycles::{backward_graph, forward_graph, GenBinding};
use crate::data::{derive_seed, hflip, Unpaired};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{gan_d_var, gan_g_var, l1_pair_var, GenTerms, LossReport};
use crate::nets::{check_image, Discriminator, NetKind, Network, NetworkBundle};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const LOG_COLUMNS: [&str; 14] = [
    "step",
    "epoch",
    "lr",
    "pred",
    "gan_angio",
    "gan_bg",
    "gan_sem",
    "cycle_img",
    "cycle_lat",
    "recon",
    "total",
    "d_angio",
    "d_bg",
    "d_sem",
];

/// `lr0` through `epochs_constant`, then linear decay to exactly 0 at
/// `epochs_total`.
pub fn lr_schedule(epoch: u64, cfg: &RunConfig) -> Result<f64> {
    if epoch > cfg.epochs_total {
        return Err(Error::Precondition(format!(
            "epoch {epoch} outside [0, {}]",
            cfg.epochs_total
        )));
    }
    if epoch <= cfg.epochs_constant {
        return Ok(cfg.lr0);
    }
    let span = (cfg.epochs_total - cfg.epochs_constant) as f64;
    Ok(cfg.lr0 * (cfg.epochs_total - epoch) as f64 / span)
}

/// Replay pool of generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Tensor] {
        &self.items
    }

    /// Fills the pool while it has room; once full, returns a uniformly
    /// chosen stored sample with probability 0.5 and keeps the fresh one in
    /// its place, otherwise returns the fresh sample.
    pub fn query<R: Rng>(&mut self, fresh: &Tensor, rng: &mut R) -> Tensor {
        if self.capacity == 0 {
            return fresh.clone();
        }
        if self.items.len() < self.capacity {
            self.items.push(fresh.clone());
            return fresh.clone();
        }
        if rng.random_bool(0.5) {
            let i = rng.random_range(0..self.items.len());
            std::mem::replace(&mut self.items[i], fresh.clone())
        } else {
            fresh.clone()
        }
    }

    pub fn query_batch<R: Rng>(&mut self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        let out: Vec<Tensor> = batch.unbatch().iter().map(|s| self.query(s, rng)).collect();
        Tensor::concat_batch(&out.iter().collect::<Vec<_>>())
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub bundle: NetworkBundle,
    /// One optimizer per generator network, in [`NetKind::GENERATORS`] order.
    pub opt_gen: Vec<Adam>,
    /// One optimizer per discriminator, in [`NetKind::DISCRIMINATORS`] order.
    pub opt_disc: Vec<Adam>,
    /// Replay pools for `y_g`, `x_g` and `s_g`.
    pub buffers: [HistoryBuffer; 3],
}

fn adam_for(net: &Network, cfg: &RunConfig) -> Adam {
    Adam::new(net, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
}

impl TrainState {
    pub fn new(bundle: NetworkBundle) -> Result<Self> {
        if bundle.segmenter.is_none() {
            return Err(Error::Precondition(
                "translation training needs a trained segmenter; run train-seg first".into(),
            ));
        }
        let cfg = bundle.config.clone();
        let opt_gen = NetKind::GENERATORS
            .iter()
            .map(|k| adam_for(bundle.net(*k).unwrap(), &cfg))
            .collect();
        let opt_disc = NetKind::DISCRIMINATORS
            .iter()
            .map(|k| adam_for(bundle.net(*k).unwrap(), &cfg))
            .collect();
        let b = cfg.buffer_size;
        Ok(Self {
            step: 0,
            epoch: 0,
            bundle,
            opt_gen,
            opt_disc,
            buffers: [HistoryBuffer::new(b), HistoryBuffer::new(b), HistoryBuffer::new(b)],
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.bundle.config
    }
}

/// Result of one generator-side evaluation.
pub struct GenPass {
    pub report: LossReport,
    /// Gradients per generator network (in [`NetKind::GENERATORS`] order),
    /// per parameter.
    pub grads: Vec<Vec<Option<Tensor>>>,
    pub y_g: Tensor,
    pub x_g: Tensor,
    pub s_g: Tensor,
}

struct GenGraph<'a> {
    g: Graph,
    binding: GenBinding<'a>,
    terms: GenTerms,
    y_g: Var,
    x_g: Var,
    s_g: Var,
}

fn build_gen_graph<'a>(bundle: &'a NetworkBundle, x: &Tensor, y: &Tensor) -> Result<GenGraph<'a>> {
    let cfg = &bundle.config;
    check_image(cfg, x, cfg.image_channels)?;
    check_image(cfg, y, cfg.image_channels)?;
    let seg = bundle.segmenter()?;
    let form = cfg.adv_loss_form;
    let mut g = Graph::new();
    let binding = GenBinding::bind(bundle, &mut g, true);
    let d_angio = bundle.d_angio.bind(&mut g, false);
    let d_bg = bundle.d_bg.bind(&mut g, false);
    let d_sem = bundle.d_sem.bind(&mut g, false);
    let seg_b = seg.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let f = forward_graph(&mut g, &binding, xv);
    let b = backward_graph(&mut g, &binding, yv);

    let z_pred = binding.predict(&mut g, b.z_y_bg);
    let z_target = g.detach(b.z_y_vess);
    let pred = g.mean_sq_diff(z_pred, z_target);

    let score_angio = bundle.d_angio.forward(&mut g, &d_angio, f.y_g);
    let gan_angio = gan_g_var(&mut g, score_angio, form);
    let score_bg = bundle.d_bg.forward(&mut g, &d_bg, b.x_g);
    let gan_bg = gan_g_var(&mut g, score_bg, form);
    let s_g = seg.forward(&mut g, &seg_b, f.y_g);
    let score_sem = bundle.d_sem.forward(&mut g, &d_sem, s_g);
    let gan_sem = gan_g_var(&mut g, score_sem, form);

    let cycle_img = l1_pair_var(&mut g, f.x_c, xv, b.y_c, yv);
    let lat_f = l1_pair_var(&mut g, f.z_yg_bg, f.z_x_bg, f.z_yg_vess, f.z_x_vess);
    let lat_b = l1_pair_var(&mut g, b.z_xg_bg, b.z_y_bg, b.z_xg_vess, b.z_y_vess);
    let cycle_lat = g.weighted_sum(&[(lat_f, 1.0), (lat_b, 1.0)]);
    let recon = l1_pair_var(&mut g, f.x_r, xv, b.y_r, yv);

    let terms = GenTerms {
        gan_angio,
        gan_bg,
        gan_sem,
        cycle_img,
        cycle_lat,
        pred,
        recon,
    };
    Ok(GenGraph {
        g,
        binding,
        terms,
        y_g: f.y_g,
        x_g: b.x_g,
        s_g,
    })
}

fn collect_grads(binding: &GenBinding, grads: &mut crate::graph::Grads) -> Vec<Vec<Option<Tensor>>> {
    binding
        .vars()
        .iter()
        .map(|b| b.vars().iter().map(|&v| grads.take(v)).collect())
        .collect()
}

/// Evaluates the generator objective on one batch and, when `with_grads`
/// is set, its gradient with respect to every generator parameter.
pub fn generator_pass(bundle: &NetworkBundle, x: &Tensor, y: &Tensor, step: u64, with_grads: bool) -> Result<GenPass> {
    let lambdas = bundle.config.lambdas();
    let GenGraph {
        mut g,
        binding,
        terms,
        y_g,
        x_g,
        s_g,
    } = build_gen_graph(bundle, x, y)?;
    for (name, v) in crate::losses::LossReport::default()
        .parts()
        .iter()
        .map(|p| p.0)
        .zip(terms.vars())
    {
        if !g.item(v).is_finite() {
            return Err(Error::Diverged {
                step,
                term: name.into(),
            });
        }
    }
    let report = terms.report(&g, lambdas)?;
    let grads = if with_grads {
        let total = terms.total(&mut g, lambdas);
        let mut gr = g.backward(total);
        collect_grads(&binding, &mut gr)
    } else {
        Vec::new()
    };
    Ok(GenPass {
        report,
        grads,
        y_g: g.value(y_g).clone(),
        x_g: g.value(x_g).clone(),
        s_g: g.value(s_g).clone(),
    })
}

/// Squared L2 norm of the gradient of each weighted generator term over all
/// generator parameters, in [`LossReport::parts`] order.
pub fn term_gradient_norms(bundle: &NetworkBundle, x: &Tensor, y: &Tensor) -> Result<Vec<(&'static str, f64)>> {
    let weights = crate::losses::part_weights(bundle.config.lambdas());
    let names = LossReport::default().parts().map(|p| p.0);
    let mut out = Vec::new();
    for i in 0..7 {
        let GenGraph {
            mut g, binding, terms, ..
        } = build_gen_graph(bundle, x, y)?;
        let weighted = g.weighted_sum(&[(terms.vars()[i], weights[i])]);
        let mut gr = g.backward(weighted);
        let norm: f64 = collect_grads(&binding, &mut gr)
            .iter()
            .flatten()
            .flatten()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        out.push((names[i], norm));
    }
    Ok(out)
}

/// Discriminator losses `(d_angio, d_bg, d_sem)` and gradients per
/// discriminator.
pub fn discriminator_pass(
    bundle: &NetworkBundle,
    reals: [&Tensor; 3],
    fakes: [&Tensor; 3],
) -> Result<([f64; 3], Vec<Vec<Option<Tensor>>>)> {
    let form = bundle.config.adv_loss_form;
    let mut g = Graph::new();
    let which = [Discriminator::Angio, Discriminator::Bg, Discriminator::Sem];
    let mut losses = Vec::new();
    let mut bounds = Vec::new();
    for i in 0..3 {
        let net = bundle.discriminator(which[i]);
        let b = net.bind(&mut g, true);
        let r = g.constant(reals[i].clone());
        let f = g.constant(fakes[i].clone());
        let sr = net.forward(&mut g, &b, r);
        let sf = net.forward(&mut g, &b, f);
        losses.push(gan_d_var(&mut g, sr, sf, form));
        bounds.push(b);
    }
    let values = [g.item(losses[0]), g.item(losses[1]), g.item(losses[2])];
    let total = g.weighted_sum(&[(losses[0], 1.0), (losses[1], 1.0), (losses[2], 1.0)]);
    let mut gr = g.backward(total);
    let grads = bounds
        .iter()
        .map(|b| b.vars().iter().map(|&v| gr.take(v)).collect())
        .collect();
    Ok((values, grads))
}

fn step_rng(cfg: &RunConfig, tag: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed.wrapping_add(1), tag, step))
}

/// One full iteration: generator update, then discriminator update on
/// replayed fakes. Mutates `state` and returns the step's losses.
pub fn train_step(state: &mut TrainState, x: &Tensor, y: &Tensor) -> Result<LossReport> {
    let cfg = state.bundle.config.clone();
    let lr = lr_schedule(state.epoch.min(cfg.epochs_total), &cfg)?;
    let pass = generator_pass(&state.bundle, x, y, state.step, true)?;
    let s_real = state.bundle.segmenter()?.apply(y);

    for (i, kind) in NetKind::GENERATORS.iter().enumerate() {
        let net = state.bundle.net_mut(*kind).expect("generator");
        state.opt_gen[i].step(net, &pass.grads[i], lr)?;
    }

    let mut rng = step_rng(&cfg, 0xB0F, state.step);
    let fake_y = state.buffers[0].query_batch(&pass.y_g, &mut rng)?;
    let fake_x = state.buffers[1].query_batch(&pass.x_g, &mut rng)?;
    let fake_s = state.buffers[2].query_batch(&pass.s_g, &mut rng)?;
    let (d, dgrads) = discriminator_pass(&state.bundle, [y, x, &s_real], [&fake_y, &fake_x, &fake_s])?;
    for (name, v) in ["d_angio", "d_bg", "d_sem"].iter().zip(d) {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                term: (*name).into(),
            });
        }
    }
    for (i, kind) in NetKind::DISCRIMINATORS.iter().enumerate() {
        let net = state.bundle.net_mut(*kind).expect("discriminator");
        state.opt_disc[i].step(net, &dgrads[i], lr)?;
    }
    let mut report = pass.report;
    report.d_angio = d[0];
    report.d_bg = d[1];
    report.d_sem = d[2];
    state.step += 1;
    Ok(report)
}

/// Optimizer steps per epoch for a dataset.
pub fn steps_per_epoch(data: &Unpaired, batch_size: usize) -> u64 {
    data.epoch_len().div_ceil(batch_size).max(1) as u64
}

/// The `(x, y)` batch of a global step, with seeded flips applied.
pub fn batch_for_step(data: &Unpaired, cfg: &RunConfig, step: u64) -> Result<(Tensor, Tensor)> {
    if data.a.is_empty() || data.b.is_empty() {
        return Err(Error::Data("both domains need at least one image".into()));
    }
    let spe = steps_per_epoch(data, cfg.batch_size);
    let epoch = step / spe;
    let slot = (step % spe) as usize;
    // visitation order draws from the seed + 1 stream
    let order = data.epoch_order(epoch);
    let mut rng = step_rng(cfg, 0xF11, step);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in 0..cfg.batch_size {
        let (ia, ib) = order[(slot * cfg.batch_size + j) % order.len()];
        let (mut a, mut b) = (data.a[ia].clone(), data.b[ib].clone());
        if cfg.flip_augment {
            if rng.random_bool(0.5) {
                a = hflip(&a);
            }
            if rng.random_bool(0.5) {
                b = hflip(&b);
            }
        }
        xs.push(a);
        ys.push(b);
    }
    Ok((
        Tensor::concat_batch(&xs.iter().collect::<Vec<_>>())?,
        Tensor::concat_batch(&ys.iter().collect::<Vec<_>>())?,
    ))
}

/// One CSV row of the loss log.
pub fn log_row(step: u64, epoch: u64, lr: f64, r: &LossReport) -> String {
    let vals = [
        r.pred,
        r.gan_angio,
        r.gan_bg,
        r.gan_sem,
        r.cycle_img,
        r.cycle_lat,
        r.recon,
        r.total,
        r.d_angio,
        r.d_bg,
        r.d_sem,
    ];
    let mut s = format!("{step},{epoch},{lr:e}");
    for v in vals {
        s.push(',');
        s.push_str(&format!("{v:e}"));
    }
    s
}

pub struct LossLog {
    path: PathBuf,
    file: fs::File,
}

impl LossLog {
    /// Opens `path` for appending, writing the header when the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if fresh {
            writeln!(file, "{}", LOG_COLUMNS.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, row: &str) -> Result<()> {
        writeln!(self.file, "{row}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Where `train` writes artifacts. `None` disables that artifact.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub log_path: Option<PathBuf>,
    pub checkpoint_root: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&TrainState, &LossReport)>,
}

/// Trains from `state` until `epochs_total` epochs (or `max_steps` steps)
/// are done. Checkpoints every `checkpoint_every` epochs and at the end
/// (`final/`); returns the reports of the steps run by this call.
pub fn train(state: &mut TrainState, data: &Unpaired, mut out: TrainOutputs) -> Result<Vec<LossReport>> {
    let cfg = state.bundle.config.clone();
    let spe = steps_per_epoch(data, cfg.batch_size);
    let mut total_steps = cfg.epochs_total * spe;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let mut log = out.log_path.as_deref().map(LossLog::open).transpose()?;
    let mut reports = Vec::new();
    while state.step < total_steps {
        state.epoch = state.step / spe;
        let lr = lr_schedule(state.epoch, &cfg)?;
        let (x, y) = batch_for_step(data, &cfg, state.step)?;
        let r = train_step(state, &x, &y)?;
        if let Some(l) = log.as_mut() {
            l.append(&log_row(state.step, state.epoch, lr, &r))?;
        }
        if let Some(cb) = out.on_step.as_mut() {
            cb(state, &r);
        }
        reports.push(r);
        let finished_epoch = state.step % spe == 0;
        if finished_epoch {
            let done = state.step / spe;
            if let Some(root) = &out.checkpoint_root {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && state.step < total_steps {
                    save_state(&root.join(format!("epoch_{done:05}")), state)?;
                }
            }
        }
        if state.step % (spe * 10).max(50) == 0 {
            log::info!("step {} epoch {} total {:.4}", state.step, state.epoch, r.total);
        }
    }
    state.epoch = state.step / spe;
    if let Some(root) = &out.checkpoint_root {
        save_state(&root.join("final"), state)?;
    }
    Ok(reports)
}

const OPT_FILE: &str = "optimizer.bin";
const BUFFER_FILE: &str = "buffers.bin";

/// Writes the bundle plus optimizer moments and replay buffers.
pub fn save_state(dir: &Path, state: &TrainState) -> Result<()> {
    save_bundle(dir, &state.bundle, state.step, state.epoch)?;
    let mut entries = Vec::new();
    let kinds = NetKind::GENERATORS.iter().chain(NetKind::DISCRIMINATORS.iter());
    for (kind, opt) in kinds.zip(state.opt_gen.iter().chain(&state.opt_disc)) {
        entries.push((format!("{kind}/t"), Tensor::full(&[1], opt.t as f64)));
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            entries.push((format!("{kind}/{i}/m"), m.clone()));
            entries.push((format!("{kind}/{i}/v"), v.clone()));
        }
    }
    save_tensors(&dir.join(OPT_FILE), &entries)?;
    let mut bufs = Vec::new();
    for (b, name) in state.buffers.iter().zip(["y_g", "x_g", "s_g"]) {
        for (i, t) in b.items().iter().enumerate() {
            bufs.push((format!("{name}/{i}"), t.clone()));
        }
    }
    save_tensors(&dir.join(BUFFER_FILE), &bufs)
}

/// Restores a state written by [`save_state`]. A checkpoint without
/// optimizer or buffer files starts those fresh.
pub fn load_state(dir: &Path) -> Result<TrainState> {
    let (bundle, manifest) = load_bundle(dir)?;
    let mut state = TrainState::new(bundle)?;
    state.step = manifest.step;
    state.epoch = manifest.epoch;
    let opt_path = dir.join(OPT_FILE);
    if opt_path.is_file() {
        let entries = load_tensors(&opt_path)?;
        let mut it = entries.into_iter();
        let opts = state.opt_gen.iter_mut().chain(state.opt_disc.iter_mut());
        for opt in opts {
            let (_, t) = it.next().ok_or_else(|| Error::Checkpoint("optimizer state truncated".into()))?;
            opt.t = t.data()[0] as u64;
            for i in 0..opt.m.len() {
                let (_, m) = it.next().ok_or_else(|| Error::Checkpoint("optimizer state truncated".into()))?;
                let (_, v) = it.next().ok_or_else(|| Error::Checkpoint("optimizer state truncated".into()))?;
                if m.shape() != opt.m[i].shape() || v.shape() != opt.v[i].shape() {
                    return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
                }
                opt.m[i] = m;
                opt.v[i] = v;
            }
        }
        if it.next().is_some() {
            return Err(Error::Checkpoint("optimizer state has extra entries".into()));
        }
    }
    let buf_path = dir.join(BUFFER_FILE);
    if buf_path.is_file() {
        for (name, t) in load_tensors(&buf_path)? {
            let slot = match name.split('/').next() {
                Some("y_g") => 0,
                Some("x_g") => 1,
                Some("s_g") => 2,
                _ => return Err(Error::Checkpoint(format!("unknown buffer entry {name}"))),
            };
            state.buffers[slot].items.push(t);
        }
    }
    Ok(state)
}
