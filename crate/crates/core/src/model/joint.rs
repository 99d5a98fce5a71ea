//! Joint module: fuse the attribute maps, distill them and compensate `F`.
//!
//! `S = sum_i A_i`, `G = S + relu(bn(conv1x1(S)))`, `g = GAP(G)`,
//! `G_reid = t_g1(t_g2(G))` with `t = relu(bn(conv3x3(.)))`, `J = F + G_reid`,
//! `j = W_j GAP(J) + b_j`. The attention flavour replaces the last two steps
//! with `J = F * CBAM(G) + F`, where the CBAM gate is a channel gate
//! (shared MLP over average and max pooled `G`) times a spatial gate (k x k
//! conv over channel mean and max of the channel-gated `G`).

use super::heads::BranchOut;
use super::{Builder, Ctx, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{NormKind, Scalar, Var};

#[derive(Clone, Debug)]
pub struct JointOut {
    pub gmap: Var,
    /// `GAP(G)`, input of the attribute-pattern triplet loss.
    pub g: Var,
    /// Distilled map; absent in the attention flavour.
    pub g_reid: Option<Var>,
    /// CBAM channel (`n x c`) and spatial (`n x 1 x h x w`) gates.
    pub cbam: Option<(Var, Var)>,
    pub jmap: Var,
    pub j: Var,
    pub j_logits: Var,
}

pub(crate) fn build(b: &mut Builder, cfg: &ModelConfig) {
    let c = cfg.backbone.out_channels();
    b.kaiming("joint.a.w".into(), &[c, c, 1, 1], c);
    b.norm("joint.a.norm", c, NormKind::Batch);
    if cfg.variant == Variant::AnetAtt {
        let r = (c / cfg.se_reduction).max(1);
        b.normal("joint.cbam.fc1.w".into(), &[r, c], (1.0 / c as f64).sqrt());
        b.constant("joint.cbam.fc1.b".into(), &[r], 0.0);
        b.normal("joint.cbam.fc2.w".into(), &[c, r], (1.0 / r as f64).sqrt());
        b.constant("joint.cbam.fc2.b".into(), &[c], 0.0);
        let k = cfg.cbam_kernel;
        b.normal("joint.cbam.spatial.w".into(), &[1, 2, k, k], (1.0 / (2 * k * k) as f64).sqrt());
        b.constant("joint.cbam.spatial.b".into(), &[1], 0.0);
    } else {
        for name in ["g2", "g1"] {
            b.kaiming(format!("joint.{name}.w"), &[c, c, 3, 3], 9 * c);
            b.norm(&format!("joint.{name}.norm"), c, NormKind::Batch);
        }
    }
    b.normal("joint.w".into(), &[cfg.s_j, c], (1.0 / c as f64).sqrt());
    b.constant("joint.b".into(), &[cfg.s_j], 0.0);
    b.normal("joint.cls.w".into(), &[cfg.id_classes, cfg.s_j], 0.01);
}

fn conv_norm_relu<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str, pad: usize) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"));
    let h = ctx.tape.conv2d(x, w, None, 1, pad)?;
    let h = ctx.norm(h, &format!("{prefix}.norm"), NormKind::Batch)?;
    Ok(ctx.tape.relu(h))
}

/// `G = S + relu(bn(conv1x1(S)))` with `S` the sum of the attribute maps.
pub fn fuse_attributes<T: Scalar>(ctx: &mut Ctx<'_, T>, maps: &[Var]) -> Result<Var> {
    let (&first, rest) = maps.split_first().ok_or_else(|| {
        Error::InvalidArgument("joint module needs at least one attribute map".into())
    })?;
    let mut s = first;
    for &m in rest {
        s = ctx.tape.add(s, m)?;
    }
    let t = conv_norm_relu(ctx, s, "joint.a", 0)?;
    ctx.tape.add(s, t)
}

/// `G_reid = t_g1(t_g2(G))`, spatial size preserved.
pub fn distill<T: Scalar>(ctx: &mut Ctx<'_, T>, gmap: Var) -> Result<Var> {
    let h = conv_norm_relu(ctx, gmap, "joint.g2", 1)?;
    conv_norm_relu(ctx, h, "joint.g1", 1)
}

/// CBAM gates of `G`: channel `n x c` and spatial `n x 1 x h x w`.
pub fn cbam_gates<T: Scalar>(ctx: &mut Ctx<'_, T>, gmap: Var) -> Result<(Var, Var)> {
    let avg = ctx.tape.gap(gmap)?;
    let max = ctx.tape.global_max(gmap)?;
    let (w1, b1) = (ctx.p("joint.cbam.fc1.w"), ctx.p("joint.cbam.fc1.b"));
    let (w2, b2) = (ctx.p("joint.cbam.fc2.w"), ctx.p("joint.cbam.fc2.b"));
    let mut mlp = |x: Var| -> Result<Var> {
        let h = ctx.tape.linear(x, w1, Some(b1))?;
        let h = ctx.tape.relu(h);
        ctx.tape.linear(h, w2, Some(b2))
    };
    let za = mlp(avg)?;
    let zm = mlp(max)?;
    let z = ctx.tape.add(za, zm)?;
    let mc = ctx.tape.sigmoid(z);
    let gated = ctx.tape.mul_channel(gmap, mc)?;
    let cm = ctx.tape.channel_mean(gated)?;
    let cx = ctx.tape.channel_max(gated)?;
    let pooled = ctx.tape.concat(&[cm, cx])?;
    let (ws, bs) = (ctx.p("joint.cbam.spatial.w"), ctx.p("joint.cbam.spatial.b"));
    let k = ctx.state.config.cbam_kernel;
    let zs = ctx.tape.conv2d(pooled, ws, Some(bs), 1, k / 2)?;
    let ms = ctx.tape.sigmoid(zs);
    Ok((mc, ms))
}

/// `J = F * (Mc * Ms) + F`.
pub fn attention_compensate<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    fmap: Var,
    mc: Var,
    ms: Var,
) -> Result<Var> {
    let h = ctx.tape.mul_channel(fmap, mc)?;
    let h = ctx.tape.mul_spatial(h, ms)?;
    ctx.tape.add(h, fmap)
}

/// `j = W_j GAP(J) + b_j` and its identity logits.
pub fn joint_embed<T: Scalar>(ctx: &mut Ctx<'_, T>, jmap: Var) -> Result<(Var, Var)> {
    let pooled = ctx.tape.gap(jmap)?;
    let (w, b) = (ctx.p("joint.w"), ctx.p("joint.b"));
    let j = ctx.tape.linear(pooled, w, Some(b))?;
    let cls = ctx.p("joint.cls.w");
    let logits = ctx.tape.linear(j, cls, None)?;
    Ok((j, logits))
}

pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, fmap: Var, branches: &[BranchOut]) -> Result<JointOut> {
    let maps = branches
        .iter()
        .map(|b| {
            b.amap.ok_or_else(|| {
                Error::InvalidArgument("joint module needs attention branches (A_i maps)".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gmap = fuse_attributes(ctx, &maps)?;
    let g = ctx.tape.gap(gmap)?;
    let (g_reid, cbam, jmap) = if ctx.state.config.variant == Variant::AnetAtt {
        let (mc, ms) = cbam_gates(ctx, gmap)?;
        let jmap = attention_compensate(ctx, fmap, mc, ms)?;
        (None, Some((mc, ms)), jmap)
    } else {
        let g_reid = distill(ctx, gmap)?;
        let jmap = ctx.tape.add(fmap, g_reid)?;
        (Some(g_reid), None, jmap)
    };
    let (j, j_logits) = joint_embed(ctx, jmap)?;
    Ok(JointOut {
        gmap,
        g,
        g_reid,
        cbam,
        jmap,
        j,
        j_logits,
    })
}
