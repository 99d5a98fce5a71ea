//! Residual trunk producing the shared feature map `F`.
//!
//! Stem: 3x3 conv, norm, relu at full resolution. Then one stage per entry of
//! `stage_channels`; the first block of every stage has stride 2. A block is
//! `skip(x) + relu(norm2(conv2(relu(norm1(conv1(x))))))` where `skip` is the
//! identity or, when the shape changes, a strided 1x1 conv with norm.
//! With IBN enabled, `norm1` of the first two stages is an instance/batch split.

use super::{Builder, Ctx, ModelConfig};
use crate::error::Result;
use crate::numerics::{NormKind, Scalar, Var};

fn norm1_kind(cfg: &ModelConfig, stage: usize) -> NormKind {
    if cfg.backbone.ibn && stage < 2 {
        NormKind::IbnSplit
    } else {
        NormKind::Batch
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.s{stage}.b{block}")
}

pub(crate) fn build(b: &mut Builder, cfg: &ModelConfig) {
    let bb = &cfg.backbone;
    let c0 = bb.stem_channels;
    b.kaiming("backbone.stem.conv.w".into(), &[c0, 3, 3, 3], 27);
    b.norm("backbone.stem.norm", c0, NormKind::Batch);
    let mut c_in = c0;
    for (s, &c) in bb.stage_channels.iter().enumerate() {
        for k in 0..bb.blocks_per_stage {
            let p = block_prefix(s, k);
            let cin = if k == 0 { c_in } else { c };
            b.kaiming(format!("{p}.conv1.w"), &[c, cin, 3, 3], cin * 9);
            b.norm(&format!("{p}.norm1"), c, norm1_kind(cfg, s));
            b.kaiming(format!("{p}.conv2.w"), &[c, c, 3, 3], c * 9);
            b.norm(&format!("{p}.norm2"), c, NormKind::Batch);
            if k == 0 {
                b.kaiming(format!("{p}.proj.w"), &[c, cin, 1, 1], cin);
                b.norm(&format!("{p}.proj_norm"), c, NormKind::Batch);
            }
        }
        c_in = c;
    }
}

/// One residual block.
pub fn block<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    prefix: &str,
    stride: usize,
    norm1: NormKind,
) -> Result<Var> {
    let w1 = ctx.p(&format!("{prefix}.conv1.w"));
    let h = ctx.tape.conv2d(x, w1, None, stride, 1)?;
    let h = ctx.norm(h, &format!("{prefix}.norm1"), norm1)?;
    let h = ctx.tape.relu(h);
    let w2 = ctx.p(&format!("{prefix}.conv2.w"));
    let h = ctx.tape.conv2d(h, w2, None, 1, 1)?;
    let h = ctx.norm(h, &format!("{prefix}.norm2"), NormKind::Batch)?;
    let h = ctx.tape.relu(h);
    let proj = format!("{prefix}.proj.w");
    let skip = if ctx.has(&proj) {
        let wp = ctx.p(&proj);
        let s = ctx.tape.conv2d(x, wp, None, stride, 0)?;
        ctx.norm(s, &format!("{prefix}.proj_norm"), NormKind::Batch)?
    } else {
        x
    };
    ctx.tape.add(skip, h)
}

pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
    let cfg = ctx.state.config.clone();
    let w = ctx.p("backbone.stem.conv.w");
    let h = ctx.tape.conv2d(images, w, None, 1, 1)?;
    let h = ctx.norm(h, "backbone.stem.norm", NormKind::Batch)?;
    let mut h = ctx.tape.relu(h);
    for s in 0..cfg.backbone.stage_channels.len() {
        for k in 0..cfg.backbone.blocks_per_stage {
            let stride = if k == 0 { 2 } else { 1 };
            h = block(ctx, h, &block_prefix(s, k), stride, norm1_kind(&cfg, s))?;
        }
    }
    Ok(h)
}
