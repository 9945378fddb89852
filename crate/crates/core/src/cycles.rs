//! Forward cycle `x -> y_g -> x_c`, backward cycle `y -> x_g -> y_c` and the
//! two reconstruction paths.
//!
//! The graph-level builders ([`forward_graph`], [`backward_graph`]) are what
//! the trainer differentiates through; [`run_forward`] and [`run_backward`]
//! evaluate the same wiring on plain tensors.

use crate::error::{Error, Result};
use crate::graph::{compose_values, Graph, Var};
use crate::nets::{check_image, Bound, Image, LatentMap, MaskPair, NetworkBundle};
use crate::tensor::Tensor;

/// The six translation networks bound into one graph.
pub struct GenBinding<'a> {
    pub nets: &'a NetworkBundle,
    pub e_bg: Bound,
    pub e_vess: Bound,
    pub predictor: Bound,
    pub g_bg: Bound,
    pub g_attn: Bound,
    pub g_ctx: Bound,
}

impl<'a> GenBinding<'a> {
    pub fn bind(nets: &'a NetworkBundle, g: &mut Graph, trainable: bool) -> Self {
        Self {
            nets,
            e_bg: nets.e_bg.bind(g, trainable),
            e_vess: nets.e_vess.bind(g, trainable),
            predictor: nets.predictor.bind(g, trainable),
            g_bg: nets.g_bg.bind(g, trainable),
            g_attn: nets.g_attn.bind(g, trainable),
            g_ctx: nets.g_ctx.bind(g, trainable),
        }
    }

    pub fn encode_bg(&self, g: &mut Graph, x: Var) -> Var {
        self.nets.e_bg.forward(g, &self.e_bg, x)
    }

    pub fn encode_vess(&self, g: &mut Graph, x: Var) -> Var {
        self.nets.e_vess.forward(g, &self.e_vess, x)
    }

    pub fn predict(&self, g: &mut Graph, z: Var) -> Var {
        self.nets.predictor.forward(g, &self.predictor, z)
    }

    pub fn decode_bg(&self, g: &mut Graph, z: Var) -> Var {
        self.nets.g_bg.forward(g, &self.g_bg, z)
    }

    /// `(attention, context)` for a vessel latent.
    pub fn decode_masks(&self, g: &mut Graph, z: Var) -> (Var, Var) {
        let a = self.nets.g_attn.forward(g, &self.g_attn, z);
        let c = self.nets.g_ctx.forward(g, &self.g_ctx, z);
        (a, c)
    }

    /// All bound parameter variables in the fixed network order.
    pub fn vars(&self) -> Vec<&Bound> {
        vec![
            &self.e_bg,
            &self.e_vess,
            &self.predictor,
            &self.g_bg,
            &self.g_attn,
            &self.g_ctx,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub x: Var,
    pub z_x_bg: Var,
    pub z_x_vess: Var,
    pub attn: Var,
    pub ctx: Var,
    pub y_g: Var,
    pub z_yg_bg: Var,
    pub z_yg_vess: Var,
    pub x_c: Var,
    pub x_r: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardVars {
    pub y: Var,
    pub z_y_bg: Var,
    pub z_y_vess: Var,
    pub x_g: Var,
    pub z_xg_bg: Var,
    pub z_xg_vess: Var,
    pub attn_c: Var,
    pub ctx_c: Var,
    pub y_c: Var,
    pub attn_r: Var,
    pub ctx_r: Var,
    pub y_r: Var,
}

pub fn forward_graph(g: &mut Graph, b: &GenBinding, x: Var) -> ForwardVars {
    let z_x_bg = b.encode_bg(g, x);
    let z_x_vess = b.predict(g, z_x_bg);
    let (attn, ctx) = b.decode_masks(g, z_x_vess);
    let y_g = g.compose(x, attn, ctx);
    let z_yg_bg = b.encode_bg(g, y_g);
    let z_yg_vess = b.encode_vess(g, y_g);
    let x_c = b.decode_bg(g, z_yg_bg);
    let x_r = b.decode_bg(g, z_x_bg);
    ForwardVars {
        x,
        z_x_bg,
        z_x_vess,
        attn,
        ctx,
        y_g,
        z_yg_bg,
        z_yg_vess,
        x_c,
        x_r,
    }
}

pub fn backward_graph(g: &mut Graph, b: &GenBinding, y: Var) -> BackwardVars {
    let z_y_bg = b.encode_bg(g, y);
    let z_y_vess = b.encode_vess(g, y);
    let x_g = b.decode_bg(g, z_y_bg);
    let z_xg_bg = b.encode_bg(g, x_g);
    let z_xg_vess = b.predict(g, z_xg_bg);
    let (attn_c, ctx_c) = b.decode_masks(g, z_xg_vess);
    let y_c = g.compose(x_g, attn_c, ctx_c);
    // G_BG(E_BG(y)) is x_g itself; the real vessel latent supplies the masks
    let (attn_r, ctx_r) = b.decode_masks(g, z_y_vess);
    let y_r = g.compose(x_g, attn_r, ctx_r);
    BackwardVars {
        y,
        z_y_bg,
        z_y_vess,
        x_g,
        z_xg_bg,
        z_xg_vess,
        attn_c,
        ctx_c,
        y_c,
        attn_r,
        ctx_r,
        y_r,
    }
}

/// Every intermediate of the forward cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBundle {
    pub x: Image,
    pub z_x_bg: LatentMap,
    pub z_x_vess: LatentMap,
    pub masks: MaskPair,
    pub y_g: Image,
    pub z_yg_bg: LatentMap,
    pub z_yg_vess: LatentMap,
    pub x_c: Image,
    /// `G_BG(E_BG(x))`.
    pub x_r: Image,
}

/// Every intermediate of the backward cycle plus the angiography
/// reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardBundle {
    pub y: Image,
    pub z_y_bg: LatentMap,
    pub z_y_vess: LatentMap,
    pub x_g: Image,
    pub z_xg_bg: LatentMap,
    pub z_xg_vess: LatentMap,
    pub masks_c: MaskPair,
    pub y_c: Image,
    /// `compose(G_BG(E_BG(y)), decode_masks(E_Vess(y)))`.
    pub y_r: Image,
}

impl ForwardBundle {
    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("x", &self.x),
            ("z_x_bg", &self.z_x_bg),
            ("z_x_vess", &self.z_x_vess),
            ("attention", &self.masks.attention),
            ("context", &self.masks.context),
            ("y_g", &self.y_g),
            ("z_yg_bg", &self.z_yg_bg),
            ("z_yg_vess", &self.z_yg_vess),
            ("x_c", &self.x_c),
            ("x_r", &self.x_r),
        ]
    }
}

impl BackwardBundle {
    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("y", &self.y),
            ("z_y_bg", &self.z_y_bg),
            ("z_y_vess", &self.z_y_vess),
            ("x_g", &self.x_g),
            ("z_xg_bg", &self.z_xg_bg),
            ("z_xg_vess", &self.z_xg_vess),
            ("attention_c", &self.masks_c.attention),
            ("context_c", &self.masks_c.context),
            ("y_c", &self.y_c),
            ("y_r", &self.y_r),
        ]
    }
}

/// `x * (1 - A) + C * A` with the single-channel attention broadcast over
/// the channels of `x`.
pub fn compose(x: &Image, masks: &MaskPair) -> Result<Image> {
    let (n, c, h, w) = x.dims4()?;
    if masks.attention.shape() != [n, 1, h, w] {
        return Err(Error::Shape(format!(
            "attention {:?} does not fit image {:?}",
            masks.attention.shape(),
            x.shape()
        )));
    }
    x.expect_same_shape(&masks.context)?;
    if masks
        .attention
        .data()
        .iter()
        .any(|a| !(0.0..=1.0).contains(a))
    {
        return Err(Error::Precondition("attention values outside [0, 1]".into()));
    }
    let out = compose_values(
        x.data(),
        masks.attention.data(),
        masks.context.data(),
        n,
        c,
        h * w,
    );
    Tensor::new(x.shape(), out)
}

fn check_all_finite(fields: Vec<(&'static str, &Tensor)>) -> Result<()> {
    for (name, t) in fields {
        if !t.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    Ok(())
}

pub fn run_forward(bundle: &NetworkBundle, x: &Image) -> Result<ForwardBundle> {
    check_image(&bundle.config, x, bundle.config.image_channels)?;
    let mut g = Graph::new();
    let b = GenBinding::bind(bundle, &mut g, false);
    let xv = g.constant(x.clone());
    let f = forward_graph(&mut g, &b, xv);
    let v = |var: Var| g.value(var).clone();
    let out = ForwardBundle {
        x: x.clone(),
        z_x_bg: v(f.z_x_bg),
        z_x_vess: v(f.z_x_vess),
        masks: MaskPair {
            attention: v(f.attn),
            context: v(f.ctx),
        },
        y_g: v(f.y_g),
        z_yg_bg: v(f.z_yg_bg),
        z_yg_vess: v(f.z_yg_vess),
        x_c: v(f.x_c),
        x_r: v(f.x_r),
    };
    check_all_finite(out.fields())?;
    Ok(out)
}

pub fn run_backward(bundle: &NetworkBundle, y: &Image) -> Result<BackwardBundle> {
    check_image(&bundle.config, y, bundle.config.image_channels)?;
    let mut g = Graph::new();
    let b = GenBinding::bind(bundle, &mut g, false);
    let yv = g.constant(y.clone());
    let r = backward_graph(&mut g, &b, yv);
    let v = |var: Var| g.value(var).clone();
    let out = BackwardBundle {
        y: y.clone(),
        z_y_bg: v(r.z_y_bg),
        z_y_vess: v(r.z_y_vess),
        x_g: v(r.x_g),
        z_xg_bg: v(r.z_xg_bg),
        z_xg_vess: v(r.z_xg_vess),
        masks_c: MaskPair {
            attention: v(r.attn_c),
            context: v(r.ctx_c),
        },
        y_c: v(r.y_c),
        y_r: v(r.y_r),
    };
    check_all_finite(out.fields())?;
    Ok(out)
}
