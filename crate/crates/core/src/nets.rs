//! The ten networks of the translation model and the small feature
//! extractor used for evaluation.
//!
//! Every network is a flat, ordered list of named parameters plus an
//! architecture description that indexes into it. Applying a network means
//! binding its parameters into a [`Graph`] (trainable or frozen) and calling
//! [`Network::forward`]; the free functions at the bottom of this module wrap
//! that for one-off inference on plain tensors.
//!
//! Shapes: images are `N x C x H x W` in `[-1, 1]`; latent maps are
//! `N x C' x H/r x W/r`; attention and semantic maps are `N x 1 x H x W`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `N x C x H x W` image batch in `[-1, 1]`.
pub type Image = Tensor;
/// `N x C' x H/r x W/r` latent batch.
pub type LatentMap = Tensor;
/// `N x 1 x H x W` per-pixel vessel probabilities.
pub type SemanticMap = Tensor;
/// `N x 1 x h x w` patch-level discriminator scores (logits).
pub type PatchScores = Tensor;

/// Attention gate and context content produced by the vessel generators.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    /// `N x 1 x H x W`, sigmoid output in `[0, 1]`.
    pub attention: Tensor,
    /// `N x C x H x W`, tanh output in `[-1, 1]`.
    pub context: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetKind {
    EncoderBg,
    EncoderVess,
    Predictor,
    GenBg,
    GenVessAttn,
    GenVessCtx,
    DiscAngio,
    DiscBg,
    DiscSem,
    Segmenter,
    Extractor,
}

impl NetKind {
    pub const GENERATORS: [NetKind; 6] = [
        NetKind::EncoderBg,
        NetKind::EncoderVess,
        NetKind::Predictor,
        NetKind::GenBg,
        NetKind::GenVessAttn,
        NetKind::GenVessCtx,
    ];
    pub const DISCRIMINATORS: [NetKind; 3] = [NetKind::DiscAngio, NetKind::DiscBg, NetKind::DiscSem];

    pub fn name(self) -> &'static str {
        match self {
            NetKind::EncoderBg => "e_bg",
            NetKind::EncoderVess => "e_vess",
            NetKind::Predictor => "predictor",
            NetKind::GenBg => "g_bg",
            NetKind::GenVessAttn => "g_vess_attn",
            NetKind::GenVessCtx => "g_vess_ctx",
            NetKind::DiscAngio => "d_angio",
            NetKind::DiscBg => "d_bg",
            NetKind::DiscSem => "d_sem",
            NetKind::Segmenter => "segmenter",
            NetKind::Extractor => "extractor",
        }
    }

    pub fn from_name(name: &str) -> Option<NetKind> {
        Self::GENERATORS
            .iter()
            .chain(Self::DISCRIMINATORS.iter())
            .chain([NetKind::Segmenter, NetKind::Extractor].iter())
            .copied()
            .find(|k| k.name() == name)
    }

    /// Offset mixed into the bundle seed so every network draws from its own
    /// stream.
    fn seed_offset(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvSpec {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    reflect: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvTSpec {
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    out_pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct NormSpec {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ResBlock {
    conv1: ConvSpec,
    norm1: NormSpec,
    conv2: ConvSpec,
    norm2: NormSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
enum Arch {
    Encoder {
        stem: (ConvSpec, NormSpec),
        downs: Vec<(ConvSpec, NormSpec)>,
        res: Vec<ResBlock>,
    },
    Decoder {
        res: Vec<ResBlock>,
        ups: Vec<(ConvTSpec, NormSpec)>,
        out: ConvSpec,
        head: Head,
    },
    Predictor {
        layers: Vec<ConvSpec>,
    },
    Discriminator {
        layers: Vec<(ConvSpec, Option<NormSpec>)>,
        out: ConvSpec,
    },
    Unet {
        down: Vec<[(ConvSpec, NormSpec); 2]>,
        up: Vec<(ConvTSpec, [(ConvSpec, NormSpec); 2])>,
        out: ConvSpec,
    },
    Classifier {
        layers: Vec<(ConvSpec, Option<NormSpec>)>,
        out: ConvSpec,
    },
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// N(0, 0.02) weights, the CycleGAN convention.
    Gan,
    /// He-normal, `std = sqrt(2 / fan_in)`.
    He,
}

struct Builder {
    params: Vec<Param>,
    layers: Vec<String>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> usize {
        let std = match init {
            Init::Gan => 0.02,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        };
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.push(format!("{name}.weight"), t)
    }

    fn bias(&mut self, name: &str, n: usize) -> usize {
        self.push(format!("{name}.bias"), Tensor::zeros(&[n]))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        reflect: usize,
        bias: bool,
        init: Init,
    ) -> ConvSpec {
        let w = self.weight(name, &[cout, cin, k, k], cin * k * k, init);
        let b = bias.then(|| self.bias(name, cout));
        let padding = if reflect > 0 {
            format!(" reflect{reflect}")
        } else if pad > 0 {
            format!(" zero{pad}")
        } else {
            String::new()
        };
        self.layers.push(format!(
            "{name}: conv{k}x{k} s{stride}{padding} {cin}->{cout}{}",
            if bias { " +bias" } else { "" }
        ));
        ConvSpec {
            w,
            b,
            stride,
            pad,
            reflect,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
        init: Init,
    ) -> ConvTSpec {
        let w = self.weight(name, &[cin, cout, k, k], cin * k * k, init);
        let b = bias.then(|| self.bias(name, cout));
        self.layers.push(format!(
            "{name}: convT{k}x{k} s{stride} p{pad} op{out_pad} {cin}->{cout}{}",
            if bias { " +bias" } else { "" }
        ));
        ConvTSpec {
            w,
            b,
            stride,
            pad,
            out_pad,
        }
    }

    fn norm(&mut self, name: &str, c: usize, gan_init: bool) -> NormSpec {
        let gamma = if gan_init {
            let t = Tensor::randn(&[c], 0.02, &mut self.rng).map(|v| 1.0 + v);
            self.push(format!("{name}.gamma"), t)
        } else {
            self.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0))
        };
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.layers.push(format!("{name}: instnorm {c}"));
        NormSpec { gamma, beta }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.layers.push(s.into());
    }

    fn res_block(&mut self, name: &str, c: usize) -> ResBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), c, c, 3, 1, 0, 1, false, Init::Gan);
        let norm1 = self.norm(&format!("{name}.norm1"), c, true);
        self.note(format!("{name}: relu"));
        let conv2 = self.conv(&format!("{name}.conv2"), c, c, 3, 1, 0, 1, false, Init::Gan);
        let norm2 = self.norm(&format!("{name}.norm2"), c, true);
        self.note(format!("{name}: +skip"));
        ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
        }
    }

    fn finish(self, kind: NetKind, arch: Arch) -> Network {
        Network {
            kind,
            arch,
            params: self.params,
            layers: self.layers,
        }
    }
}

/// One network: ordered named parameters, architecture, and a
/// human-readable layer list used for the checkpoint fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    kind: NetKind,
    arch: Arch,
    params: Vec<Param>,
    layers: Vec<String>,
}

/// A network's parameters bound as leaves of a particular [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Channel widths of the encoder stages: stem plus one per downsampling,
/// ending at `latent_channels`.
fn stage_widths(cfg: &RunConfig) -> Vec<usize> {
    let n = cfg.n_downsamplings();
    let mut w: Vec<usize> = (0..=n).map(|i| cfg.gen_base_width << i).collect();
    w[n] = cfg.latent_channels;
    w
}

fn res_split(cfg: &RunConfig) -> (usize, usize) {
    let enc = cfg.n_res_blocks / 2;
    (enc, cfg.n_res_blocks - enc)
}

fn build_encoder(kind: NetKind, cfg: &RunConfig, seed: u64) -> Network {
    let mut b = Builder::new(seed);
    let widths = stage_widths(cfg);
    let stem = (
        b.conv("stem", cfg.image_channels, widths[0], 7, 1, 0, 3, false, Init::Gan),
        b.norm("stem.norm", widths[0], true),
    );
    b.note("stem: relu");
    let mut downs = Vec::new();
    for i in 0..cfg.n_downsamplings() {
        let name = format!("down{i}");
        let c = b.conv(&name, widths[i], widths[i + 1], 3, 2, 1, 0, false, Init::Gan);
        let n = b.norm(&format!("{name}.norm"), widths[i + 1], true);
        b.note(format!("{name}: relu"));
        downs.push((c, n));
    }
    let latent = *widths.last().unwrap();
    let res = (0..res_split(cfg).0)
        .map(|i| b.res_block(&format!("res{i}"), latent))
        .collect();
    b.finish(kind, Arch::Encoder { stem, downs, res })
}

fn build_decoder(kind: NetKind, cfg: &RunConfig, out_channels: usize, head: Head, seed: u64) -> Network {
    let mut b = Builder::new(seed);
    let widths = stage_widths(cfg);
    let latent = *widths.last().unwrap();
    let res = (0..res_split(cfg).1)
        .map(|i| b.res_block(&format!("res{i}"), latent))
        .collect();
    let mut ups = Vec::new();
    for (j, i) in (0..cfg.n_downsamplings()).rev().enumerate() {
        let name = format!("up{j}");
        let c = b.conv_t(&name, widths[i + 1], widths[i], 3, 2, 1, 1, false, Init::Gan);
        let n = b.norm(&format!("{name}.norm"), widths[i], true);
        b.note(format!("{name}: relu"));
        ups.push((c, n));
    }
    let out = b.conv("out", widths[0], out_channels, 7, 1, 0, 3, true, Init::Gan);
    b.note(format!("out: {head:?}"));
    b.finish(kind, Arch::Decoder { res, ups, out, head })
}

fn build_predictor(cfg: &RunConfig, seed: u64) -> Network {
    let mut b = Builder::new(seed);
    let c = cfg.latent_channels;
    let widths = [c, c / 2, c / 4, c / 2, c];
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let spec = b.conv(&format!("fc{i}"), w[0], w[1], 1, 1, 0, 0, true, Init::He);
            if i < 3 {
                b.note(format!("fc{i}: lrelu0.2"));
            }
            spec
        })
        .collect();
    b.finish(NetKind::Predictor, Arch::Predictor { layers })
}

fn build_discriminator(kind: NetKind, cfg: &RunConfig, in_channels: usize, seed: u64) -> Network {
    let mut b = Builder::new(seed);
    let ndf = cfg.disc_base_width;
    let mut layers = Vec::new();
    let first = b.conv("conv0", in_channels, ndf, 4, 2, 1, 0, true, Init::Gan);
    b.note("conv0: lrelu0.2");
    layers.push((first, None));
    let mut prev = 1;
    for n in 1..=cfg.disc_layers {
        let mult = (1usize << n).min(8);
        let stride = if n < cfg.disc_layers { 2 } else { 1 };
        let name = format!("conv{n}");
        let c = b.conv(&name, ndf * prev, ndf * mult, 4, stride, 1, 0, false, Init::Gan);
        let nm = b.norm(&format!("{name}.norm"), ndf * mult, true);
        b.note(format!("{name}: lrelu0.2"));
        layers.push((c, Some(nm)));
        prev = mult;
    }
    let out = b.conv("out", ndf * prev, 1, 4, 1, 1, 0, true, Init::Gan);
    b.finish(kind, Arch::Discriminator { layers, out })
}

/// Spatial extent of a patch discriminator's score map for a square input.
pub fn patch_extent(cfg: &RunConfig, input: usize) -> usize {
    let mut s = input;
    for _ in 0..cfg.disc_layers {
        s = (s + 2 - 4) / 2 + 1;
    }
    // stride-1 4x4 conv with pad 1 shrinks by one, twice
    s - 2
}

fn build_unet(cfg: &RunConfig, seed: u64) -> Network {
    let mut b = Builder::new(seed);
    let widths: Vec<usize> = (0..cfg.seg_depth).map(|i| cfg.seg_base_width << i).collect();
    let mut down = Vec::new();
    let mut cin = cfg.image_channels;
    for (i, &w) in widths.iter().enumerate() {
        if i > 0 {
            b.note(format!("down{i}: maxpool2"));
        }
        let mut pair = Vec::new();
        for j in 0..2 {
            let name = format!("down{i}.conv{j}");
            let c = b.conv(&name, if j == 0 { cin } else { w }, w, 3, 1, 1, 0, false, Init::He);
            let n = b.norm(&format!("{name}.norm"), w, false);
            b.note(format!("{name}: relu"));
            pair.push((c, n));
        }
        down.push([pair[0], pair[1]]);
        cin = w;
    }
    let mut up = Vec::new();
    for i in (0..widths.len() - 1).rev() {
        let name = format!("up{i}");
        let t = b.conv_t(&name, widths[i + 1], widths[i], 2, 2, 0, 0, true, Init::He);
        b.note(format!("{name}: concat skip{i}"));
        let mut pair = Vec::new();
        for j in 0..2 {
            let cname = format!("{name}.conv{j}");
            let cin = if j == 0 { 2 * widths[i] } else { widths[i] };
            let c = b.conv(&cname, cin, widths[i], 3, 1, 1, 0, false, Init::He);
            let n = b.norm(&format!("{cname}.norm"), widths[i], false);
            b.note(format!("{cname}: relu"));
            pair.push((c, n));
        }
        up.push((t, [pair[0], pair[1]]));
    }
    let out = b.conv("out", widths[0], 1, 1, 1, 0, 0, true, Init::He);
    b.note("out: sigmoid");
    b.finish(NetKind::Segmenter, Arch::Unet { down, up, out })
}

/// Small strided CNN whose globally pooled activations are the evaluation
/// features; the linear head on top is only used to train it.
pub fn build_extractor(cfg: &RunConfig, seed: u64) -> Network {
    let mut b = Builder::new(seed);
    let d = cfg.extractor_dim;
    let widths = [cfg.image_channels, 16, 32, 64];
    let mut layers = Vec::new();
    for i in 0..3 {
        let name = format!("conv{i}");
        let c = b.conv(&name, widths[i], widths[i + 1], 3, 2, 1, 0, i == 0, Init::He);
        let n = (i > 0).then(|| b.norm(&format!("{name}.norm"), widths[i + 1], false));
        b.note(format!("{name}: lrelu0.2"));
        layers.push((c, n));
    }
    let c = b.conv("conv3", widths[3], d, 3, 1, 1, 0, false, Init::He);
    let n = b.norm("conv3.norm", d, false);
    b.note("conv3: lrelu0.2");
    layers.push((c, Some(n)));
    b.note("pool: global average -> features");
    let out = b.conv("head", d, 1, 1, 1, 0, 0, true, Init::He);
    b.finish(NetKind::Extractor, Arch::Classifier { layers, out })
}

/// Initializes the U-Net segmenter from `seed`.
pub fn init_segmenter(cfg: &RunConfig, seed: u64) -> Network {
    build_unet(cfg, seed)
}

/// Builds a network of `kind` with fresh parameters.
pub fn build_network(kind: NetKind, cfg: &RunConfig, seed: u64) -> Network {
    let seed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(kind.seed_offset());
    let c = cfg.image_channels;
    match kind {
        NetKind::EncoderBg | NetKind::EncoderVess => build_encoder(kind, cfg, seed),
        NetKind::Predictor => build_predictor(cfg, seed),
        NetKind::GenBg => build_decoder(kind, cfg, c, Head::Tanh, seed),
        NetKind::GenVessAttn => build_decoder(kind, cfg, 1, Head::Sigmoid, seed),
        NetKind::GenVessCtx => build_decoder(kind, cfg, c, Head::Tanh, seed),
        NetKind::DiscAngio | NetKind::DiscBg => build_discriminator(kind, cfg, c, seed),
        NetKind::DiscSem => build_discriminator(kind, cfg, 1, seed),
        NetKind::Segmenter => build_unet(cfg, seed),
        NetKind::Extractor => build_extractor(cfg, seed),
    }
}

impl Network {
    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn layers(&self) -> &[String] {
        &self.layers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Output widths of the predictor's layers starting with its input width.
    pub fn predictor_widths(&self) -> Option<Vec<usize>> {
        match &self.arch {
            Arch::Predictor { layers } => {
                let mut w = vec![self.params[layers[0].w].value.shape()[1]];
                w.extend(layers.iter().map(|l| self.params[l.w].value.shape()[0]));
                Some(w)
            }
            _ => None,
        }
    }

    /// Replaces every parameter value, checking names and shapes.
    pub fn load_params(&mut self, values: Vec<Param>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} parameters, found {}",
                self.kind,
                self.params.len(),
                values.len()
            )));
        }
        for (dst, src) in self.params.iter().zip(&values) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter {} {:?} does not match {} {:?}",
                    self.kind,
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
        }
        self.params = values;
        Ok(())
    }

    /// Zeroes the output convolution (weights and bias).
    pub fn zero_output_layer(&mut self) {
        let out = match &self.arch {
            Arch::Decoder { out, .. }
            | Arch::Discriminator { out, .. }
            | Arch::Unet { out, .. }
            | Arch::Classifier { out, .. } => *out,
            Arch::Predictor { layers } => *layers.last().unwrap(),
            Arch::Encoder { .. } => return,
        };
        for idx in std::iter::once(out.w).chain(out.b) {
            self.params[idx].value.data_mut().fill(0.0);
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn conv(&self, g: &mut Graph, b: &Bound, s: &ConvSpec, x: Var) -> Var {
        let x = if s.reflect > 0 { g.reflect_pad(x, s.reflect) } else { x };
        g.conv2d(x, b.vars[s.w], s.b.map(|i| b.vars[i]), s.stride, s.pad)
    }

    fn conv_t(&self, g: &mut Graph, b: &Bound, s: &ConvTSpec, x: Var) -> Var {
        g.conv_transpose2d(x, b.vars[s.w], s.b.map(|i| b.vars[i]), s.stride, s.pad, s.out_pad)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, s: &NormSpec, x: Var) -> Var {
        g.instance_norm(x, b.vars[s.gamma], b.vars[s.beta])
    }

    fn res(&self, g: &mut Graph, b: &Bound, r: &ResBlock, x: Var) -> Var {
        let h = self.conv(g, b, &r.conv1, x);
        let h = self.norm(g, b, &r.norm1, h);
        let h = g.relu(h);
        let h = self.conv(g, b, &r.conv2, h);
        let h = self.norm(g, b, &r.norm2, h);
        g.add(x, h)
    }

    fn unet_body(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let Arch::Unet { down, up, out } = &self.arch else {
            unreachable!()
        };
        let mut skips = Vec::new();
        let mut h = x;
        for (i, pair) in down.iter().enumerate() {
            if i > 0 {
                h = g.max_pool2(h);
            }
            for (c, n) in pair {
                h = self.conv(g, b, c, h);
                h = self.norm(g, b, n, h);
                h = g.relu(h);
            }
            skips.push(h);
        }
        skips.pop();
        for (t, pair) in up {
            h = self.conv_t(g, b, t, h);
            let skip = skips.pop().expect("skip per level");
            h = g.concat_channels(h, skip);
            for (c, n) in pair {
                h = self.conv(g, b, c, h);
                h = self.norm(g, b, n, h);
                h = g.relu(h);
            }
        }
        self.conv(g, b, out, h)
    }

    /// Segmenter logits before the sigmoid head.
    pub fn forward_logits(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        match &self.arch {
            Arch::Unet { .. } => self.unet_body(g, b, x),
            Arch::Classifier { out, .. } => {
                let f = self.features(g, b, x);
                self.conv(g, b, out, f)
            }
            _ => self.forward(g, b, x),
        }
    }

    /// Pooled penultimate features of the extractor, `N x D x 1 x 1`.
    pub fn features(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let Arch::Classifier { layers, .. } = &self.arch else {
            panic!("features() is only defined for the extractor");
        };
        let mut h = x;
        for (c, n) in layers {
            h = self.conv(g, b, c, h);
            if let Some(n) = n {
                h = self.norm(g, b, n, h);
            }
            h = g.leaky_relu(h, 0.2);
        }
        g.global_avg_pool(h)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        match &self.arch {
            Arch::Encoder { stem, downs, res } => {
                let h = self.conv(g, b, &stem.0, x);
                let h = self.norm(g, b, &stem.1, h);
                let mut h = g.relu(h);
                for (c, n) in downs {
                    h = self.conv(g, b, c, h);
                    h = self.norm(g, b, n, h);
                    h = g.relu(h);
                }
                for r in res {
                    h = self.res(g, b, r, h);
                }
                h
            }
            Arch::Decoder {
                res,
                ups,
                out,
                head,
            } => {
                let mut h = x;
                for r in res {
                    h = self.res(g, b, r, h);
                }
                for (t, n) in ups {
                    h = self.conv_t(g, b, t, h);
                    h = self.norm(g, b, n, h);
                    h = g.relu(h);
                }
                let h = self.conv(g, b, out, h);
                match head {
                    Head::Linear => h,
                    Head::Tanh => g.tanh(h),
                    Head::Sigmoid => g.sigmoid(h),
                }
            }
            Arch::Predictor { layers } => {
                let mut h = x;
                for (i, l) in layers.iter().enumerate() {
                    h = self.conv(g, b, l, h);
                    // leaky: the C'/4 bottleneck dies easily at small widths
                    if i + 1 < layers.len() {
                        h = g.leaky_relu(h, 0.2);
                    }
                }
                h
            }
            Arch::Discriminator { layers, out } => {
                let mut h = x;
                for (c, n) in layers {
                    h = self.conv(g, b, c, h);
                    if let Some(n) = n {
                        h = self.norm(g, b, n, h);
                    }
                    h = g.leaky_relu(h, 0.2);
                }
                self.conv(g, b, out, h)
            }
            Arch::Unet { .. } => {
                let l = self.unet_body(g, b, x);
                g.sigmoid(l)
            }
            Arch::Classifier { .. } => self.forward_logits(g, b, x),
        }
    }

    /// Applies the network to a plain tensor with frozen parameters.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv);
        g.value(y).clone()
    }
}

/// Parameters of all ten networks. The segmenter is absent until trained or
/// loaded and is never updated by translation training.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBundle {
    pub config: RunConfig,
    pub seed: u64,
    pub e_bg: Network,
    pub e_vess: Network,
    pub predictor: Network,
    pub g_bg: Network,
    pub g_attn: Network,
    pub g_ctx: Network,
    pub d_angio: Network,
    pub d_bg: Network,
    pub d_sem: Network,
    pub segmenter: Option<Network>,
}

/// Selects one of the three discriminators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discriminator {
    Angio,
    Bg,
    Sem,
}

/// Initializes the nine trainable networks deterministically from `seed`.
pub fn init_networks(cfg: &RunConfig, seed: u64) -> Result<NetworkBundle> {
    cfg.validate()?;
    Ok(NetworkBundle {
        config: cfg.clone(),
        seed,
        e_bg: build_network(NetKind::EncoderBg, cfg, seed),
        e_vess: build_network(NetKind::EncoderVess, cfg, seed),
        predictor: build_network(NetKind::Predictor, cfg, seed),
        g_bg: build_network(NetKind::GenBg, cfg, seed),
        g_attn: build_network(NetKind::GenVessAttn, cfg, seed),
        g_ctx: build_network(NetKind::GenVessCtx, cfg, seed),
        d_angio: build_network(NetKind::DiscAngio, cfg, seed),
        d_bg: build_network(NetKind::DiscBg, cfg, seed),
        d_sem: build_network(NetKind::DiscSem, cfg, seed),
        segmenter: None,
    })
}

impl NetworkBundle {
    pub fn net(&self, kind: NetKind) -> Option<&Network> {
        Some(match kind {
            NetKind::EncoderBg => &self.e_bg,
            NetKind::EncoderVess => &self.e_vess,
            NetKind::Predictor => &self.predictor,
            NetKind::GenBg => &self.g_bg,
            NetKind::GenVessAttn => &self.g_attn,
            NetKind::GenVessCtx => &self.g_ctx,
            NetKind::DiscAngio => &self.d_angio,
            NetKind::DiscBg => &self.d_bg,
            NetKind::DiscSem => &self.d_sem,
            NetKind::Segmenter => return self.segmenter.as_ref(),
            NetKind::Extractor => return None,
        })
    }

    pub fn net_mut(&mut self, kind: NetKind) -> Option<&mut Network> {
        Some(match kind {
            NetKind::EncoderBg => &mut self.e_bg,
            NetKind::EncoderVess => &mut self.e_vess,
            NetKind::Predictor => &mut self.predictor,
            NetKind::GenBg => &mut self.g_bg,
            NetKind::GenVessAttn => &mut self.g_attn,
            NetKind::GenVessCtx => &mut self.g_ctx,
            NetKind::DiscAngio => &mut self.d_angio,
            NetKind::DiscBg => &mut self.d_bg,
            NetKind::DiscSem => &mut self.d_sem,
            NetKind::Segmenter => return self.segmenter.as_mut(),
            NetKind::Extractor => return None,
        })
    }

    pub fn discriminator(&self, which: Discriminator) -> &Network {
        match which {
            Discriminator::Angio => &self.d_angio,
            Discriminator::Bg => &self.d_bg,
            Discriminator::Sem => &self.d_sem,
        }
    }

    pub fn install_segmenter(&mut self, net: Network) -> Result<()> {
        let expected = build_unet(&self.config, 0);
        if net.kind != NetKind::Segmenter || !same_layout(&expected, &net) {
            return Err(Error::Shape(
                "segmenter layout does not match the bundle config".into(),
            ));
        }
        self.segmenter = Some(net);
        Ok(())
    }

    pub fn segmenter(&self) -> Result<&Network> {
        self.segmenter
            .as_ref()
            .ok_or_else(|| Error::State("segmenter not initialized or loaded".into()))
    }

    /// Patch discriminator stride-2 depth and the score-map extent at the
    /// configured image size.
    pub fn patch_geometry(&self) -> (usize, usize) {
        (
            self.config.disc_layers,
            patch_extent(&self.config, self.config.image_size),
        )
    }
}

fn same_layout(a: &Network, b: &Network) -> bool {
    a.params.len() == b.params.len()
        && a
            .params
            .iter()
            .zip(&b.params)
            .all(|(x, y)| x.name == y.name && x.value.shape() == y.value.shape())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term: what.into() })
    }
}

/// Validates an image batch against the config: 4-d, configured channel
/// count and spatial size, finite entries.
pub fn check_image(cfg: &RunConfig, img: &Tensor, channels: usize) -> Result<()> {
    let (_, c, h, w) = img.dims4()?;
    if c != channels {
        return Err(Error::Shape(format!(
            "expected {channels} channel(s), got {c} in {:?}",
            img.shape()
        )));
    }
    let r = cfg.downsample_ratio;
    if h == 0 || w == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by the downsampling ratio {r}"
        )));
    }
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Shape(format!(
            "image {h}x{w} does not match the configured size {0}x{0}",
            cfg.image_size
        )));
    }
    check_finite(img, "image")
}

/// Validates a latent batch: `C'` channels and finite entries.
pub fn check_latent(cfg: &RunConfig, z: &Tensor) -> Result<()> {
    let (_, c, _, _) = z.dims4()?;
    if c != cfg.latent_channels {
        return Err(Error::Shape(format!(
            "latent has {c} channels, expected {}",
            cfg.latent_channels
        )));
    }
    check_finite(z, "latent")
}

pub fn encode_bg(bundle: &NetworkBundle, img: &Image) -> Result<LatentMap> {
    check_image(&bundle.config, img, bundle.config.image_channels)?;
    Ok(bundle.e_bg.apply(img))
}

pub fn encode_vess(bundle: &NetworkBundle, img: &Image) -> Result<LatentMap> {
    check_image(&bundle.config, img, bundle.config.image_channels)?;
    Ok(bundle.e_vess.apply(img))
}

pub fn predict_vess(bundle: &NetworkBundle, z_bg: &LatentMap) -> Result<LatentMap> {
    check_latent(&bundle.config, z_bg)?;
    Ok(bundle.predictor.apply(z_bg))
}

pub fn decode_bg(bundle: &NetworkBundle, z: &LatentMap) -> Result<Image> {
    check_latent(&bundle.config, z)?;
    Ok(bundle.g_bg.apply(z))
}

pub fn decode_masks(bundle: &NetworkBundle, z_vess: &LatentMap) -> Result<MaskPair> {
    check_latent(&bundle.config, z_vess)?;
    Ok(MaskPair {
        attention: bundle.g_attn.apply(z_vess),
        context: bundle.g_ctx.apply(z_vess),
    })
}

pub fn discriminate(bundle: &NetworkBundle, which: Discriminator, img: &Tensor) -> Result<PatchScores> {
    let channels = match which {
        Discriminator::Sem => 1,
        _ => bundle.config.image_channels,
    };
    check_image(&bundle.config, img, channels)?;
    Ok(bundle.discriminator(which).apply(img))
}

pub fn segment(bundle: &NetworkBundle, img: &Image) -> Result<SemanticMap> {
    let seg = bundle.segmenter()?;
    check_image(&bundle.config, img, bundle.config.image_channels)?;
    Ok(seg.apply(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn small_cfg() -> RunConfig {
        RunConfig {
            image_size: 16,
            latent_channels: 8,
            gen_base_width: 4,
            n_res_blocks: 2,
            disc_base_width: 4,
            disc_layers: 2,
            seg_depth: 2,
            seg_base_width: 4,
            ..RunConfig::default()
        }
    }

    fn rand_img(cfg: &RunConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        Tensor::uniform(&[1, cfg.image_channels, s, s], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_cfg();
        let a = init_networks(&cfg, 7).unwrap();
        let b = init_networks(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_networks(&cfg, 8).unwrap();
        assert_ne!(a.e_bg, c.e_bg);
    }

    #[test]
    fn predictor_widths_follow_bottleneck_schedule() {
        let mut cfg = RunConfig::default();
        let b = build_network(NetKind::Predictor, &cfg, 0);
        assert_eq!(b.predictor_widths().unwrap(), vec![64, 32, 16, 32, 64]);
        cfg.latent_channels = 256;
        let b = build_network(NetKind::Predictor, &cfg, 0);
        assert_eq!(b.predictor_widths().unwrap(), vec![256, 128, 64, 128, 256]);
    }

    #[test]
    fn encoder_shapes_and_contract() {
        let cfg = RunConfig {
            n_res_blocks: 2,
            ..RunConfig::default()
        };
        let bundle = init_networks(&cfg, 1).unwrap();
        let x = rand_img(&cfg, 3);
        let z = encode_bg(&bundle, &x).unwrap();
        assert_eq!(z.shape(), &[1, 64, 16, 16]);
        let zv = encode_vess(&bundle, &x).unwrap();
        assert_eq!(zv.shape(), &[1, 64, 16, 16]);
        assert_ne!(z, zv);
        let bad = Tensor::zeros(&[1, 1, 60, 64]);
        assert!(matches!(encode_bg(&bundle, &bad), Err(Error::Shape(_))));
        assert!(matches!(encode_vess(&bundle, &bad), Err(Error::Shape(_))));
        let zero = encode_vess(&bundle, &Tensor::zeros(&[1, 1, 64, 64])).unwrap();
        assert!(zero.is_finite());
    }

    #[test]
    fn full_scale_latent_shape() {
        let cfg = RunConfig {
            image_size: 256,
            latent_channels: 256,
            gen_base_width: 4,
            n_res_blocks: 0,
            ..RunConfig::default()
        };
        let e = build_network(NetKind::EncoderBg, &cfg, 0);
        let z = e.apply(&Tensor::zeros(&[1, 1, 256, 256]));
        assert_eq!(z.shape(), &[1, 256, 64, 64]);
    }

    #[test]
    fn predictor_is_spatially_equivariant() {
        let cfg = small_cfg();
        let bundle = init_networks(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng);
        let out = predict_vess(&bundle, &z).unwrap();
        assert_eq!(out.shape(), z.shape());
        // reverse the 16 spatial positions of every channel
        let permute = |t: &Tensor| {
            let mut d = t.data().to_vec();
            for ch in d.chunks_mut(16) {
                ch.reverse();
            }
            Tensor::new(t.shape(), d).unwrap()
        };
        let out_p = predict_vess(&bundle, &permute(&z)).unwrap();
        assert_eq!(out_p, permute(&out));

        let mut d = vec![0.0; 8 * 16];
        for (c, ch) in d.chunks_mut(16).enumerate() {
            ch.fill(c as f64 * 0.3 - 1.0);
        }
        let constant = Tensor::new(&[1, 8, 4, 4], d).unwrap();
        let out = predict_vess(&bundle, &constant).unwrap();
        for ch in out.data().chunks(16) {
            assert!(ch.iter().all(|&v| v == ch[0]));
        }
        assert!(predict_vess(&bundle, &Tensor::zeros(&[1, 4, 4, 4])).is_err());
    }

    #[test]
    fn decoder_ranges_and_guards() {
        let cfg = small_cfg();
        let bundle = init_networks(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z1 = Tensor::randn(&[1, 8, 4, 4], 3.0, &mut rng);
        let z2 = Tensor::randn(&[1, 8, 4, 4], 3.0, &mut rng);
        let x1 = decode_bg(&bundle, &z1).unwrap();
        let x2 = decode_bg(&bundle, &z2).unwrap();
        assert_eq!(x1.shape(), &[1, 1, 16, 16]);
        assert!(x1.min() >= -1.0 && x1.max() <= 1.0);
        assert_ne!(x1, x2);
        let mut nan = z1.clone();
        nan.data_mut()[3] = f64::NAN;
        assert!(matches!(decode_bg(&bundle, &nan), Err(Error::NonFinite { .. })));

        let m = decode_masks(&bundle, &z1).unwrap();
        assert_eq!(m.attention.shape(), &[1, 1, 16, 16]);
        assert_eq!(m.context.shape(), &[1, 1, 16, 16]);
        assert!(m.attention.min() >= 0.0 && m.attention.max() <= 1.0);
        assert!(m.context.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zeroed_attention_head_gives_half() {
        let cfg = small_cfg();
        let mut bundle = init_networks(&cfg, 3).unwrap();
        bundle.g_attn.zero_output_layer();
        let m = decode_masks(&bundle, &Tensor::zeros(&[1, 8, 4, 4])).unwrap();
        assert!(m.attention.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn discriminator_patch_shapes() {
        let cfg = RunConfig {
            n_res_blocks: 0,
            ..RunConfig::default()
        };
        let bundle = init_networks(&cfg, 4).unwrap();
        let x = rand_img(&cfg, 1);
        let s = discriminate(&bundle, Discriminator::Angio, &x).unwrap();
        // 64 -> 32 -> 16 -> 8 (stride 2), then 7 -> 6 (stride 1 heads)
        assert_eq!(s.shape(), &[1, 1, 6, 6]);
        assert_eq!(bundle.patch_geometry(), (3, 6));
        assert_eq!(patch_extent(&cfg, 256), 30);
        assert_eq!(s, discriminate(&bundle, Discriminator::Angio, &x).unwrap());
        let sem = discriminate(&bundle, Discriminator::Sem, &x).unwrap();
        assert_eq!(sem.shape(), &[1, 1, 6, 6]);
        let three = Tensor::zeros(&[1, 3, 64, 64]);
        assert!(matches!(
            discriminate(&bundle, Discriminator::Sem, &three),
            Err(Error::Shape(_))
        ));
        assert!(discriminate(&bundle, Discriminator::Bg, &three).is_err());
    }

    #[test]
    fn segmenter_contract() {
        let cfg = small_cfg();
        let mut bundle = init_networks(&cfg, 5).unwrap();
        let x = rand_img(&cfg, 2);
        assert!(matches!(segment(&bundle, &x), Err(Error::State(_))));
        bundle.install_segmenter(init_segmenter(&cfg, 1)).unwrap();
        let s = segment(&bundle, &x).unwrap();
        assert_eq!(s.shape(), &[1, 1, 16, 16]);
        assert!(s.min() >= 0.0 && s.max() <= 1.0);

        let rgb = RunConfig {
            image_channels: 3,
            ..small_cfg()
        };
        let mut b3 = init_networks(&rgb, 5).unwrap();
        b3.install_segmenter(init_segmenter(&rgb, 1)).unwrap();
        let s3 = segment(&b3, &Tensor::zeros(&[2, 3, 16, 16])).unwrap();
        assert_eq!(s3.shape(), &[2, 1, 16, 16]);
    }

    #[test]
    fn shape_algebra_round_trip() {
        let cfg = small_cfg();
        let bundle = init_networks(&cfg, 6).unwrap();
        let x = rand_img(&cfg, 4);
        let z = encode_bg(&bundle, &x).unwrap();
        assert_eq!(decode_bg(&bundle, &z).unwrap().shape(), x.shape());
        let m = decode_masks(&bundle, &predict_vess(&bundle, &z).unwrap()).unwrap();
        assert_eq!(m.attention.shape(), &[1, 1, 16, 16]);
    }
}
