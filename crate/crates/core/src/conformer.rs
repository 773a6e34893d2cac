//! Conformer sublayers and the per-block wiring of the three branches.
//!
//! Every sublayer is pre-norm with a full residual add, and zeroes padded rows
//! of its output. Per block:
//!
//! ```text
//! antigen:  FF -> MHSA -> slide vs Ab-H ┐
//!                      -> slide vs Ab-L ┴-> α·X_H + (1-α)·X_L -> Conv -> FF
//! antibody: FF -> (updated by the sliding above) -> Conv -> FF
//! ```
//!
//! Both slidings start from the same post-MHSA antigen embeddings.

use ndarray::{Array2, ArrayView2};

use crate::batch::TokenMask;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::sliding::{self, RunVars, SlidingSettings, SlidingVars};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForwardParams {
    pub norm_scale: ParamId,
    pub norm_offset: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl FeedForwardParams {
    pub fn register(b: &mut ParamBuilder, name: &str, d_model: usize, dim_ff: usize) -> Self {
        let (norm_scale, norm_offset) = b.norm(&format!("{name}.norm"), d_model);
        let (w_in, b_in) = b.affine(&format!("{name}.in"), d_model, dim_ff);
        let (w_out, b_out) = b.affine(&format!("{name}.out"), dim_ff, d_model);
        FeedForwardParams {
            norm_scale,
            norm_offset,
            w_in,
            b_in,
            w_out,
            b_out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MhsaParams {
    pub norm_scale: ParamId,
    pub norm_offset: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    /// Keys carry no bias: it would shift every score of a row equally.
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl MhsaParams {
    pub fn register(b: &mut ParamBuilder, name: &str, d_model: usize) -> Self {
        let (norm_scale, norm_offset) = b.norm(&format!("{name}.norm"), d_model);
        let (w_q, b_q) = b.affine(&format!("{name}.query"), d_model, d_model);
        let bound = 1.0 / (d_model as f64).sqrt();
        let w_k = b.add(
            format!("{name}.key.weight"),
            (d_model, d_model),
            Init::Uniform(bound),
        );
        let (w_v, b_v) = b.affine(&format!("{name}.value"), d_model, d_model);
        let (w_o, b_o) = b.affine(&format!("{name}.output"), d_model, d_model);
        MhsaParams {
            norm_scale,
            norm_offset,
            w_q,
            b_q,
            w_k,
            w_v,
            b_v,
            w_o,
            b_o,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvParams {
    pub norm_scale: ParamId,
    pub norm_offset: ParamId,
    /// `kernel x d_model`, one filter per channel.
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: ParamId,
    pub pointwise_bias: ParamId,
}

impl ConvParams {
    pub fn register(b: &mut ParamBuilder, name: &str, d_model: usize, kernel: usize) -> Self {
        let (norm_scale, norm_offset) = b.norm(&format!("{name}.norm"), d_model);
        let bound = 1.0 / (kernel as f64).sqrt();
        let depthwise = b.add(
            format!("{name}.depthwise.weight"),
            (kernel, d_model),
            Init::Uniform(bound),
        );
        let depthwise_bias = b.add(
            format!("{name}.depthwise.bias"),
            (1, d_model),
            Init::Uniform(bound),
        );
        let (pointwise, pointwise_bias) = b.affine(&format!("{name}.pointwise"), d_model, d_model);
        ConvParams {
            norm_scale,
            norm_offset,
            depthwise,
            depthwise_bias,
            pointwise,
            pointwise_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlidingParamIds {
    pub e_s: ParamId,
    pub e_r: ParamId,
    pub e_x: ParamId,
    pub e_y: ParamId,
}

impl SlidingParamIds {
    pub fn register(b: &mut ParamBuilder, name: &str, d_model: usize) -> Self {
        let bound = Init::Uniform(1.0 / (d_model as f64).sqrt());
        let shape = (d_model, d_model);
        SlidingParamIds {
            e_s: b.add(format!("{name}.e_s"), shape, bound),
            e_r: b.add(format!("{name}.e_r"), shape, bound),
            e_x: b.add(format!("{name}.e_x"), shape, bound),
            e_y: b.add(format!("{name}.e_y"), shape, bound),
        }
    }

    pub fn bind(&self, p: &Bound) -> SlidingVars {
        SlidingVars {
            e_s: p[self.e_s],
            e_r: p[self.e_r],
            e_x: p[self.e_x],
            e_y: p[self.e_y],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntigenBranch {
    pub ff_pre: FeedForwardParams,
    pub mhsa: MhsaParams,
    pub slide_h: SlidingParamIds,
    pub slide_l: SlidingParamIds,
    pub conv: ConvParams,
    pub ff_post: FeedForwardParams,
}

/// Antibody branches carry no self-attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AntibodyBranch {
    pub ff_pre: FeedForwardParams,
    pub conv: ConvParams,
    pub ff_post: FeedForwardParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub antigen: AntigenBranch,
    pub heavy: AntibodyBranch,
    pub light: AntibodyBranch,
}

impl LayerParams {
    pub fn register(b: &mut ParamBuilder, name: &str, config: &Config) -> Self {
        let (d, ff, k) = (config.d_model, config.dim_ff, config.conv_kernel);
        let antibody = |b: &mut ParamBuilder, branch: &str| AntibodyBranch {
            ff_pre: FeedForwardParams::register(b, &format!("{name}.{branch}.ff_pre"), d, ff),
            conv: ConvParams::register(b, &format!("{name}.{branch}.conv"), d, k),
            ff_post: FeedForwardParams::register(b, &format!("{name}.{branch}.ff_post"), d, ff),
        };
        let antigen = AntigenBranch {
            ff_pre: FeedForwardParams::register(b, &format!("{name}.ag.ff_pre"), d, ff),
            mhsa: MhsaParams::register(b, &format!("{name}.ag.mhsa"), d),
            slide_h: SlidingParamIds::register(b, &format!("{name}.ag.slide_h"), d),
            slide_l: SlidingParamIds::register(b, &format!("{name}.ag.slide_l"), d),
            conv: ConvParams::register(b, &format!("{name}.ag.conv"), d, k),
            ff_post: FeedForwardParams::register(b, &format!("{name}.ag.ff_post"), d, ff),
        };
        let heavy = antibody(b, "h");
        let light = antibody(b, "l");
        LayerParams {
            antigen,
            heavy,
            light,
        }
    }
}

fn mask_rows(tape: &mut Tape<'_>, x: Var, mask: &TokenMask) -> Var {
    tape.row_scale(x, mask.to_vec())
}

/// `x + W_out·GELU(W_in·LN(x) + b_in) + b_out`, padded rows zeroed.
pub fn feed_forward(
    tape: &mut Tape<'_>,
    x: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &FeedForwardParams,
) -> Var {
    let h = tape.layer_norm(x, p[ids.norm_scale], p[ids.norm_offset]);
    let h = tape.matmul(h, p[ids.w_in]);
    let h = tape.add_bias(h, p[ids.b_in]);
    let h = tape.gelu(h);
    let h = tape.matmul(h, p[ids.w_out]);
    let h = tape.add_bias(h, p[ids.b_out]);
    let out = tape.add(x, h);
    mask_rows(tape, out, mask)
}

/// Pre-norm multi-head self-attention; padded keys get zero weight.
pub fn mhsa(
    tape: &mut Tape<'_>,
    x: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &MhsaParams,
    n_heads: usize,
) -> Var {
    let d = tape.shape(x).1;
    let head = d / n_heads;
    let h = tape.layer_norm(x, p[ids.norm_scale], p[ids.norm_offset]);
    let project = |tape: &mut Tape<'_>, w: ParamId, b: ParamId| {
        let v = tape.matmul(h, p[w]);
        tape.add_bias(v, p[b])
    };
    let q = project(tape, ids.w_q, ids.b_q);
    let k = tape.matmul(h, p[ids.w_k]);
    let v = project(tape, ids.w_v, ids.b_v);
    let heads: Vec<Var> = (0..n_heads)
        .map(|i| {
            let qh = tape.slice_cols(q, i * head, head);
            let kh = tape.slice_cols(k, i * head, head);
            let vh = tape.slice_cols(v, i * head, head);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, 1.0 / (head as f64).sqrt());
            let weights = tape.masked_softmax(scores, mask.valid());
            tape.matmul(weights, vh)
        })
        .collect();
    let merged = tape.concat_cols(&heads);
    let out = tape.matmul(merged, p[ids.w_o]);
    let out = tape.add_bias(out, p[ids.b_o]);
    let out = tape.add(x, out);
    mask_rows(tape, out, mask)
}

/// Depthwise convolution followed by pointwise mixing.
pub fn depthwise_pointwise(tape: &mut Tape<'_>, h: Var, p: &Bound, ids: &ConvParams) -> Var {
    let h = tape.depthwise_conv(h, p[ids.depthwise], p[ids.depthwise_bias]);
    let h = tape.matmul(h, p[ids.pointwise]);
    tape.add_bias(h, p[ids.pointwise_bias])
}

/// Pre-residual path of the convolution block: `SiLU(pointwise(depthwise(LN(x))))`
/// with padded rows zeroed ahead of the convolution.
pub fn conv_path(
    tape: &mut Tape<'_>,
    x: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &ConvParams,
) -> Var {
    let h = tape.layer_norm(x, p[ids.norm_scale], p[ids.norm_offset]);
    let h = mask_rows(tape, h, mask);
    let h = depthwise_pointwise(tape, h, p, ids);
    tape.silu(h)
}

pub fn conv_block(
    tape: &mut Tape<'_>,
    x: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &ConvParams,
) -> Var {
    let x = mask_rows(tape, x, mask);
    let h = conv_path(tape, x, mask, p, ids);
    let out = tape.add(x, h);
    mask_rows(tape, out, mask)
}

pub fn combine_on_tape(tape: &mut Tape<'_>, x_h: Var, x_l: Var, alpha: f64) -> Var {
    let a = tape.scale(x_h, alpha);
    let b = tape.scale(x_l, 1.0 - alpha);
    tape.add(a, b)
}

/// `α·X_H + (1-α)·X_L`.
pub fn combine_hl(
    x_h: ArrayView2<'_, f64>,
    x_l: ArrayView2<'_, f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if x_h.dim() != x_l.dim() {
        return Err(Error::Shape(format!(
            "combine: {:?} vs {:?}",
            x_h.dim(),
            x_l.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config("alpha out of [0,1]".into()));
    }
    let mut tape = Tape::new();
    let (h, l) = (tape.constant_view(x_h), tape.constant_view(x_l));
    let out = combine_on_tape(&mut tape, h, l, alpha);
    Ok(tape.value(out).to_owned())
}

/// Antibody sublayers before sliding.
pub fn antibody_pre(
    tape: &mut Tape<'_>,
    ab: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &AntibodyBranch,
) -> Var {
    feed_forward(tape, ab, mask, p, &ids.ff_pre)
}

/// Antibody sublayers after sliding.
pub fn antibody_post(
    tape: &mut Tape<'_>,
    ab: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &AntibodyBranch,
) -> Var {
    let ab = conv_block(tape, ab, mask, p, &ids.conv);
    feed_forward(tape, ab, mask, p, &ids.ff_post)
}

/// Antibody branch with no sliding in between (FF -> Conv -> FF).
pub fn antibody_layer(
    tape: &mut Tape<'_>,
    ab: Var,
    mask: &TokenMask,
    p: &Bound,
    ids: &AntibodyBranch,
) -> Var {
    let ab = antibody_pre(tape, ab, mask, p, ids);
    antibody_post(tape, ab, mask, p, ids)
}

pub struct ChainVars<'m> {
    pub x: Var,
    pub mask: &'m TokenMask,
}

/// Output handles of [`antigen_layer`].
pub struct AntigenLayerVars {
    pub antigen: Var,
    pub heavy: Var,
    pub light: Var,
    pub slide_h: RunVars,
    pub slide_l: RunVars,
}

/// Antigen branch of one block. `heavy` and `light` are the antibody
/// embeddings after their pre-feedforward; they come back updated by sliding.
pub fn antigen_layer(
    tape: &mut Tape<'_>,
    antigen: ChainVars<'_>,
    heavy: ChainVars<'_>,
    light: ChainVars<'_>,
    p: &Bound,
    ids: &AntigenBranch,
    config: &Config,
) -> Result<AntigenLayerVars> {
    let settings = SlidingSettings::from(config);
    let mask = antigen.mask;
    let ag = feed_forward(tape, antigen.x, mask, p, &ids.ff_pre);
    let ag = mhsa(tape, ag, mask, p, &ids.mhsa, config.n_heads);
    let slide_h = sliding::run_on_tape(
        tape,
        ag,
        heavy.x,
        mask,
        heavy.mask,
        ids.slide_h.bind(p),
        &settings,
    )?;
    let slide_l = sliding::run_on_tape(
        tape,
        ag,
        light.x,
        mask,
        light.mask,
        ids.slide_l.bind(p),
        &settings,
    )?;
    let combined = combine_on_tape(tape, slide_h.x, slide_l.x, config.alpha);
    let ag = conv_block(tape, combined, mask, p, &ids.conv);
    let ag = feed_forward(tape, ag, mask, p, &ids.ff_post);
    Ok(AntigenLayerVars {
        antigen: ag,
        heavy: slide_h.y,
        light: slide_l.y,
        slide_h,
        slide_l,
    })
}
