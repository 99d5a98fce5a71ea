//! Re-id head `f = W_f GAP(F) + b_f` and the attribute branches.
//!
//! An attention branch gates `F` per channel with an SE block,
//! `A_i = F * sigmoid(W2 relu(W1 GAP(F) + b1) + b2)`, then embeds
//! `a_i = W_ai GAP(A_i) + b_ai`. The FC flavour skips the gate. Classifiers are
//! bias-free linear layers on the embeddings.

use super::{BranchKind, Builder, Ctx, ModelConfig};
use crate::error::Result;
use crate::numerics::{Scalar, Tape, Var};

/// Outputs of one attribute branch.
#[derive(Clone, Debug)]
pub struct BranchOut {
    /// SE gate, `n x c`; absent for FC branches.
    pub gate: Option<Var>,
    /// Gated map `A_i`; absent for FC branches.
    pub amap: Option<Var>,
    pub a: Var,
    pub logits: Var,
}

pub fn branch_prefix(i: usize) -> String {
    format!("attr.{i}")
}

fn linear_init(b: &mut Builder, prefix: &str, out: usize, inp: usize, bias: bool) {
    b.normal(format!("{prefix}.w"), &[out, inp], (1.0 / inp as f64).sqrt());
    if bias {
        b.constant(format!("{prefix}.b"), &[out], 0.0);
    }
}

pub(crate) fn build(b: &mut Builder, cfg: &ModelConfig) {
    let c = cfg.backbone.out_channels();
    linear_init(b, "reid", cfg.s_f, c, true);
    b.normal("reid.cls.w".into(), &[cfg.id_classes, cfg.s_f], 0.01);
    let r = (c / cfg.se_reduction).max(1);
    for (i, &m) in cfg.attr_classes.iter().enumerate().take(cfg.attributes()) {
        let p = branch_prefix(i);
        if cfg.branch == BranchKind::Attention {
            linear_init(b, &format!("{p}.se1"), r, c, true);
            linear_init(b, &format!("{p}.se2"), c, r, true);
        }
        linear_init(b, &p, cfg.s_a, c, true);
        b.normal(format!("{p}.cls.w"), &[m, cfg.s_a], 0.01);
    }
}

/// `f` and its identity logits.
pub fn reid<T: Scalar>(ctx: &mut Ctx<'_, T>, fmap: Var) -> Result<(Var, Var)> {
    let pooled = ctx.tape.gap(fmap)?;
    let (w, b) = (ctx.p("reid.w"), ctx.p("reid.b"));
    let f = ctx.tape.linear(pooled, w, Some(b))?;
    let cls = ctx.p("reid.cls.w");
    let logits = ctx.tape.linear(f, cls, None)?;
    Ok((f, logits))
}

/// SE channel gate of branch `i` computed from `F`.
pub fn se_gate<T: Scalar>(ctx: &mut Ctx<'_, T>, fmap: Var, prefix: &str) -> Result<Var> {
    let pooled = ctx.tape.gap(fmap)?;
    let (w1, b1) = (ctx.p(&format!("{prefix}.se1.w")), ctx.p(&format!("{prefix}.se1.b")));
    let h = ctx.tape.linear(pooled, w1, Some(b1))?;
    let h = ctx.tape.relu(h);
    let (w2, b2) = (ctx.p(&format!("{prefix}.se2.w")), ctx.p(&format!("{prefix}.se2.b")));
    let z = ctx.tape.linear(h, w2, Some(b2))?;
    Ok(ctx.tape.sigmoid(z))
}

/// Branch `i` forward in the flavour the config selects.
pub fn attribute<T: Scalar>(ctx: &mut Ctx<'_, T>, fmap: Var, i: usize) -> Result<BranchOut> {
    let p = branch_prefix(i);
    let (gate, amap, pooled) = match ctx.state.config.branch {
        BranchKind::Attention => {
            let gate = se_gate(ctx, fmap, &p)?;
            let amap = ctx.tape.mul_channel(fmap, gate)?;
            let pooled = ctx.tape.gap(amap)?;
            (Some(gate), Some(amap), pooled)
        }
        BranchKind::Fc => (None, None, ctx.tape.gap(fmap)?),
    };
    let (w, b) = (ctx.p(&format!("{p}.w")), ctx.p(&format!("{p}.b")));
    let a = ctx.tape.linear(pooled, w, Some(b))?;
    let cls = ctx.p(&format!("{p}.cls.w"));
    let logits = ctx.tape.linear(a, cls, None)?;
    Ok(BranchOut {
        gate,
        amap,
        a,
        logits,
    })
}

/// `[f, a_1, ..., a_n]` along the feature axis.
pub fn concat_features<T: Scalar>(tape: &mut Tape<T>, f: Var, attrs: &[Var]) -> Result<Var> {
    if attrs.is_empty() {
        return Ok(f);
    }
    let mut parts = vec![f];
    parts.extend_from_slice(attrs);
    tape.concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, BackboneConfig, ModelState, Variant};
    use crate::numerics::Tensor;

    fn state(branch: BranchKind) -> ModelState<f64> {
        let cfg = ModelConfig {
            variant: Variant::Van,
            image_size: 8,
            backbone: BackboneConfig {
                stem_channels: 4,
                stage_channels: vec![4, 4],
                blocks_per_stage: 1,
                ibn: false,
            },
            s_f: 4,
            s_a: 2,
            id_classes: 3,
            attr_classes: vec![3, 2],
            branch,
            ..Default::default()
        };
        ModelState::init(&cfg, 5).unwrap().cast()
    }

    fn fmap(tape: &mut Tape<f64>, v: impl Fn(usize) -> f64) -> Var {
        tape.constant(Tensor::from_fn(&[2, 4, 3, 3], v))
    }

    #[test]
    fn identity_reid_head_passes_constant() {
        let mut s = state(BranchKind::Attention);
        let w = s.param_mut("reid.w").unwrap();
        w.value = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, false);
        let x = fmap(ctx.tape, |_| 2.5);
        let (f, _) = reid(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(f).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn zero_weight_reid_head_returns_bias() {
        let mut s = state(BranchKind::Attention);
        s.param_mut("reid.w").unwrap().value.data_mut().fill(0.0);
        s.param_mut("reid.b").unwrap().value = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, false);
        let x = fmap(ctx.tape, |i| i as f64);
        let (f, _) = reid(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.value(f).row(1), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn reid_matches_loop_oracle() {
        let s = state(BranchKind::Attention);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, false);
        let val = |i: usize| ((i * 31) % 17) as f64 / 17.0 - 0.4;
        let x = fmap(ctx.tape, val);
        let (f, _) = reid(&mut ctx, x).unwrap();
        let w = &s.param("reid.w").unwrap().value;
        let b = &s.param("reid.b").unwrap().value;
        for n in 0..2 {
            for o in 0..4 {
                let mut acc = b.data()[o];
                for c in 0..4 {
                    let mut pool = 0.0;
                    for k in 0..9 {
                        pool += val((n * 4 + c) * 9 + k);
                    }
                    acc += w.data()[o * 4 + c] * pool / 9.0;
                }
                assert!((ctx.tape.value(f).row(n)[o] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_se_weights_halve_the_map() {
        let mut s = state(BranchKind::Attention);
        for n in ["attr.0.se1.w", "attr.0.se2.w", "attr.0.se1.b", "attr.0.se2.b"] {
            s.param_mut(n).unwrap().value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, false);
        let x = fmap(ctx.tape, |i| i as f64 - 20.0);
        let out = attribute(&mut ctx, x, 0).unwrap();
        let a = ctx.tape.value(out.amap.unwrap());
        for (p, q) in a.data().iter().zip(ctx.tape.value(x).data()) {
            assert_eq!(*p, 0.5 * q);
        }
    }

    #[test]
    fn zero_map_gives_bias_embedding() {
        for kind in [BranchKind::Attention, BranchKind::Fc] {
            let s = state(kind);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &s, false);
            let x = fmap(ctx.tape, |_| 0.0);
            let out = attribute(&mut ctx, x, 1).unwrap();
            let b = s.param("attr.1.b").unwrap().value.data().to_vec();
            assert_eq!(ctx.tape.value(out.a).row(0), &b[..]);
        }
    }

    #[test]
    fn gate_bounds_and_magnitude() {
        let s = state(BranchKind::Attention);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &s, false);
        let x = fmap(ctx.tape, |i| ((i * 7919) % 23) as f64 - 11.0);
        let out = attribute(&mut ctx, x, 0).unwrap();
        let g = ctx.tape.value(out.gate.unwrap());
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let a = ctx.tape.value(out.amap.unwrap());
        for (p, q) in a.data().iter().zip(ctx.tape.value(x).data()) {
            assert!(p.abs() <= q.abs() && p * q >= 0.0);
        }
    }

    #[test]
    fn fc_branch_equals_attention_with_unit_gate() {
        let fc = state(BranchKind::Fc);
        let mut att = state(BranchKind::Attention);
        for name in ["attr.0.w", "attr.0.b", "attr.0.cls.w"] {
            att.param_mut(name).unwrap().value = fc.param(name).unwrap().value.clone();
        }
        // A huge SE bias saturates the gate to exactly one.
        att.param_mut("attr.0.se2.w").unwrap().value.data_mut().fill(0.0);
        att.param_mut("attr.0.se2.b").unwrap().value.data_mut().fill(100.0);
        let run = |s: &ModelState<f64>| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, s, false);
            let x = fmap(ctx.tape, |i| (i % 5) as f64);
            let out = attribute(&mut ctx, x, 0).unwrap();
            ctx.tape.value(out.a).clone()
        };
        let (p, q) = (run(&fc), run(&att));
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_and_attention_differ_for_random_se() {
        let fc = state(BranchKind::Fc);
        let att = state(BranchKind::Attention);
        let x = Tensor::from_fn(&[1, 3, 8, 8], |i| (i % 9) as f64 / 9.0);
        let run = |s: &ModelState<f64>| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, s, false);
            let xv = ctx.tape.constant(x.clone());
            let out = forward(&mut ctx, xv).unwrap();
            ctx.tape.value(out.branches[0].a).clone()
        };
        assert_ne!(run(&fc), run(&att));
    }

    #[test]
    fn concat_layout() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
        let a1 = tape.constant(Tensor::from_fn(&[1, 2], |i| 10.0 + i as f64));
        let a2 = tape.constant(Tensor::from_fn(&[1, 2], |i| 20.0 + i as f64));
        let cat = concat_features(&mut tape, f, &[a1, a2]).unwrap();
        let v = tape.value(cat).data().to_vec();
        assert_eq!(v.len(), 8);
        assert_eq!(&v[..4], tape.value(f).data());
        assert_eq!(&v[4..6], tape.value(a1).data());
        assert_eq!(&v[6..], tape.value(a2).data());
        assert_eq!(concat_features(&mut tape, f, &[]).unwrap(), f);
    }
}
