//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 3, 4, 5 and 8 share the directional experiment (three variants,
//! three seeds each), which dominates the runtime.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use anet::ablation::{directional_spec, run_cell_full, AblationTable, Cell};
use anet::data::Splits;
use anet::eval::{extract_features, rank_and_score, vehicleid_protocol, Labels};
use anet::losses::{compute, BatchLabels, LossWeights, Mining, Objective};
use anet::model::joint::fuse_attributes;
use anet::model::{forward, infer, Ctx, ModelState, Partition, Selector, Variant};
use anet::numerics::{Tape, Tensor};
use anet::train::{train, Checkpoint, TrainConfig, TrainOutcome, Trainer};
use anet::verify;
use anyhow::{bail, ensure, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = anyhow::Result<String>;

struct Experiment {
    table: AblationTable,
    anet_runs: Vec<TrainOutcome>,
    splits: Splits,
    seconds: f64,
}

fn run_experiment() -> anyhow::Result<Experiment> {
    let start = Instant::now();
    let spec = directional_spec();
    let splits = spec.splits()?;
    let mut cells: Vec<Cell> = Vec::new();
    let mut anet_runs = Vec::new();
    for &v in &spec.variants {
        for &seed in &spec.seeds {
            let (cell, outcome) = run_cell_full(&spec, &splits, v, seed)?;
            eprintln!(
                "  {v} seed {seed}: {} ({:.0}s)",
                cell.scores
                    .iter()
                    .map(|s| format!("{} mAP {:.4}", s.selector, s.map))
                    .collect::<Vec<_>>()
                    .join(", "),
                cell.seconds
            );
            cells.push(cell);
            if v == Variant::Anet {
                anet_runs.push(outcome);
            }
        }
    }
    Ok(Experiment {
        table: AblationTable::from_cells(spec, cells),
        anet_runs,
        splits,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn gradients() -> Check {
    let start = Instant::now();
    let prim = verify::primitive_checks(0)?;
    let comp = verify::composed_suite(0)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = |rs: &[anet::numerics::GradCheckReport]| {
        rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    };
    for r in prim.iter().chain(&comp) {
        ensure!(r.passed, "{r}");
    }
    ensure!(
        comp.iter().any(|r| r.name.contains("L'")),
        "composed suite lacks the second-stage objective"
    );
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{} primitives max {:.1e} (<= 1e-6), {} composed max {:.1e} (<= 1e-4), {secs:.1}s",
        prim.len(),
        worst(&prim),
        comp.len(),
        worst(&comp)
    ))
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut scored = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let inst = common::random_instance(&mut rng);
        let filter = rng.gen_bool(0.5);
        let (aps, cmc, excluded) = common::oracle(&inst, filter);
        let got = rank_and_score(
            &inst.q,
            Labels { ids: &inst.qids, cams: &inst.qcams },
            &inst.g,
            Labels { ids: &inst.gids, cams: &inst.gcams },
            filter,
        );
        if aps.is_empty() {
            ensure!(got.is_err(), "trial {trial}: expected every query excluded");
            continue;
        }
        let r = got?;
        scored += 1;
        ensure!(r.excluded_queries == excluded, "trial {trial}: excluded count");
        ensure!(r.per_query_ap.len() == aps.len() && r.cmc.len() == cmc.len(), "trial {trial}: lengths");
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        let errs = r
            .per_query_ap
            .iter()
            .zip(&aps)
            .chain(r.cmc.iter().zip(&cmc))
            .map(|(a, b)| (a - b).abs())
            .chain([(r.map - map).abs()]);
        for e in errs {
            worst = worst.max(e);
        }
        ensure!(worst <= 1e-9, "trial {trial}: error {worst:e}");
    }
    let q = Tensor::new(&[1, 1], vec![0.0]);
    let g = Tensor::new(&[3, 1], vec![0.1, 0.2, 0.3]);
    let r = rank_and_score(
        &q,
        Labels { ids: &[1], cams: &[0] },
        &g,
        Labels { ids: &[1, 2, 1], cams: &[1, 1, 1] },
        true,
    )?;
    ensure!((r.map - 5.0 / 6.0).abs() <= 1e-9, "hand case AP {}", r.map);
    Ok(format!(
        "1000 instances ({scored} scored) max |diff| {worst:.1e}; hand case AP {:.4}",
        r.map
    ))
}

fn directional(exp: &Experiment) -> Check {
    let t = &exp.table;
    let med = |v: Variant, s: Selector| -> anyhow::Result<f64> {
        t.row(v, s)
            .and_then(|r| r.median_map)
            .with_context(|| format!("no result for {v} {s}"))
    };
    for c in &t.cells {
        if let Some(e) = &c.error {
            bail!("{} seed {} failed: {e}", c.variant, c.seed);
        }
    }
    let (base, van, anet) = (
        med(Variant::Baseline, Selector::F)?,
        med(Variant::Van, Selector::F)?,
        med(Variant::Anet, Selector::J)?,
    );
    let detail = format!(
        "median mAP baseline(f) {base:.4}, van(f) {van:.4}, anet(j) {anet:.4}; {:.1} min",
        exp.seconds / 60.0
    );
    ensure!(anet >= van - 0.01, "anet(j) below van(f) - 0.01: {detail}");
    ensure!(van >= base - 0.01, "van(f) below baseline - 0.01: {detail}");
    ensure!(anet > base, "anet(j) not above baseline: {detail}");
    ensure!(exp.seconds < 45.0 * 60.0, "too slow: {detail}");
    Ok(detail)
}

fn amelioration(exp: &Experiment) -> Check {
    let mut parts = Vec::new();
    for c in exp.table.cells.iter().filter(|c| c.variant == Variant::Anet) {
        let (first, last) = match (c.ac_epochs.first(), c.ac_epochs.last()) {
            (Some(f), Some(l)) if c.ac_epochs.len() >= 2 => (f, l),
            _ => bail!("seed {}: fewer than two stage-2 epochs", c.seed),
        };
        ensure!(
            last.ac_id < first.ac_id,
            "seed {}: AC_ID first {:.4} last {:.4}",
            c.seed,
            first.ac_id,
            last.ac_id
        );
        let min = c.ac_min.context("no AC values")?;
        ensure!(min > 0.0, "seed {}: AC value {min}", c.seed);
        parts.push(format!("{:.4}->{:.4}", first.ac_id, last.ac_id));
    }
    Ok(format!("AC_ID first->last stage-2 epoch per seed: {}; all steps > 0", parts.join(", ")))
}

fn freezing(exp: &Experiment) -> Check {
    let (mut moved_total, mut frozen_total) = (0, 0);
    for (i, run) in exp.anet_runs.iter().enumerate() {
        let s1 = run.stage1_model.as_ref().context("no stage-1 snapshot")?;
        let mut frozen = 0;
        for p in run.model.params.iter().filter(|p| matches!(p.partition, Partition::Backbone | Partition::ReidHead)) {
            let before = &s1.param(&p.name).context("missing param")?.value;
            ensure!(
                p.value.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "run {i}: {} changed in stage 2",
                p.name
            );
            frozen += 1;
        }
        let moved = run
            .model
            .params
            .iter()
            .filter(|p| p.partition == Partition::JointModule)
            .filter(|p| s1.param(&p.name).is_none_or(|q| q.value != p.value))
            .count();
        ensure!(moved > 0, "run {i}: joint module did not move");
        moved_total += moved;
        frozen_total += frozen;
    }
    Ok(format!(
        "{} runs: {frozen_total} backbone and ReID-head tensors bitwise frozen, {moved_total} joint-module tensors moved",
        exp.anet_runs.len()
    ))
}

/// Gradients of every parameter for one crafted batch in which no sample
/// carries an attribute-0 label.
fn branch0_grads(variant: Variant) -> anyhow::Result<Vec<(String, Tensor<f32>)>> {
    let mc = common::small_model(variant, 16, 4);
    let state = ModelState::init(&mc, 3)?;
    let ds = common::small_data(4, 2, 16, 9);
    let images = Tensor::stack(&common::images(&ds));
    let labels = BatchLabels {
        ids: ds.samples.iter().map(|s| s.identity).collect(),
        attrs: ds.samples.iter().map(|s| vec![None, s.attributes[1]]).collect(),
    };
    let objective = if variant == Variant::Van { Objective::Van } else { Objective::L };
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &state, true);
    let x = ctx.tape.constant(images);
    let out = forward(&mut ctx, x)?;
    let (total, report) = compute(ctx.tape, &out, &labels, &LossWeights::default(), objective, Mining::JSpace, false)?;
    ensure!(report.att[0].is_none(), "attribute-0 loss was evaluated");
    ensure!(report.masked_counts[0] == ds.len(), "masked count {:?}", report.masked_counts);
    let vars = ctx.vars.clone();
    let grads = tape.backward(total);
    Ok(state
        .params
        .iter()
        .zip(vars)
        .filter(|(p, _)| p.name.starts_with("attr.0."))
        .map(|(p, v)| {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            (p.name.clone(), g)
        })
        .collect())
}

fn masking() -> Check {
    let van = branch0_grads(Variant::Van)?;
    for (name, g) in &van {
        ensure!(g.data().iter().all(|&v| v == 0.0), "van {name} has a nonzero gradient");
    }
    let anet = branch0_grads(Variant::Anet)?;
    let head = ["attr.0.w", "attr.0.b", "attr.0.cls.w"];
    let mut checked = 0;
    for (name, g) in anet.iter().filter(|(n, _)| head.contains(&n.as_str())) {
        ensure!(g.data().iter().all(|&v| v == 0.0), "anet {name} has a nonzero gradient");
        checked += 1;
    }
    ensure!(checked == head.len(), "missing anet branch-0 head parameters");
    Ok(format!(
        "van: all {} branch-0 tensors exactly zero; anet: branch-0 head ({}) exactly zero",
        van.len(),
        head.join(", ")
    ))
}

fn determinism() -> Check {
    let ds = common::small_data(8, 4, 32, 12);
    let mc = common::small_model(Variant::Anet, 32, 8);
    let cfg = TrainConfig {
        variant: Variant::Anet,
        epochs_total: 3,
        stage1_epochs: 2,
        lr: 1e-3,
        decay_epochs: vec![2],
        p: 4,
        k: 2,
        batches_per_epoch: Some(3),
        seed: 77,
        ..Default::default()
    };
    let a = train(&ds, &mc, &cfg)?;
    let b = train(&ds, &mc, &cfg)?;
    ensure!(a.log.len() >= 5, "fewer than 5 steps");
    let mut worst: f64 = 0.0;
    for (x, y) in a.log.iter().zip(&b.log).take(5) {
        worst = worst.max((x.report.total - y.report.total).abs());
        ensure!(x.report == y.report, "step {} reports differ", x.step);
    }
    ensure!(worst <= 1e-12, "loss difference {worst:e}");
    let (ba, bb) = (a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    ensure!(ba == bb, "final checkpoints differ");
    Ok(format!(
        "first 5 losses max |diff| {worst:.1e}; final checkpoints bitwise equal ({} bytes)",
        ba.len()
    ))
}

fn protocol(exp: &Experiment) -> Check {
    let model = &exp.anet_runs.first().context("no anet run")?.model;
    let held = exp.splits.held_out()?;
    let a = vehicleid_protocol(&held, model, Selector::J, 10, 31)?;
    let b = vehicleid_protocol(&held, model, Selector::J, 10, 31)?;
    ensure!(a.repeats == 10, "repeats {}", a.repeats);
    ensure!(a == b, "same seed gave different aggregates");
    let (ms, rs) = (a.map_std.context("no mAP std")?, a.r1_std.context("no R1 std")?);
    ensure!(a.r5_std.is_some(), "no R5 std");
    Ok(format!(
        "10 repeats: mAP {:.4} +- {ms:.4}, R1 {:.4} +- {rs:.4}, R5 {:.4} +- {:.4}; reproduced exactly",
        a.map,
        a.r1,
        a.r5,
        a.r5_std.unwrap_or(0.0)
    ))
}

fn structure() -> Check {
    let ds = common::small_data(2, 2, 16, 4);
    let images = Tensor::stack(&common::images(&ds));

    let mut s = ModelState::init(&common::small_model(Variant::Anet, 16, 2), 5)?;
    for name in ["joint.g1", "joint.g2"] {
        for suffix in ["w", "norm.gamma", "norm.beta"] {
            s.param_mut(&format!("{name}.{suffix}"))
                .context("joint layer")?
                .value
                .data_mut()
                .fill(0.0);
        }
    }
    let (tape, out) = infer(&s, images.clone())?;
    let fmap = tape.value(out.fmap);
    let j = tape.value(out.joint.as_ref().context("joint")?.j);
    let (n, c, hw) = (fmap.dim(0), fmap.dim(1), fmap.dim(2) * fmap.dim(3));
    let (w, b) = (&s.param("joint.w").unwrap().value, &s.param("joint.b").unwrap().value);
    let dj = w.dim(0);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| fmap.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
            .collect();
        for o in 0..dj {
            let expect: f64 = b.data()[o] as f64 + (0..c).map(|ch| w.data()[o * c + ch] as f64 * pooled[ch]).sum::<f64>();
            worst = worst.max((j.data()[i * dj + o] as f64 - expect).abs() / expect.abs().max(1.0));
        }
    }
    ensure!(worst < 1e-5, "j differs from the head over F by {worst:e}");
    let jmap = tape.value(out.joint.as_ref().unwrap().jmap);
    ensure!(jmap == fmap, "J != F with the distiller zeroed");

    let s = ModelState::init(&common::small_model(Variant::Anet, 16, 2), 6)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &s, false);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shape = [2, 16, 4, 4];
    let a0 = ctx.tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(0.0f32..1.0)));
    let a1 = ctx.tape.constant(Tensor::from_fn(&shape, |_| rng.gen_range(0.0f32..1.0)));
    let g01 = fuse_attributes(&mut ctx, &[a0, a1])?;
    let g10 = fuse_attributes(&mut ctx, &[a1, a0])?;
    let bits = |v| ctx.tape.value(v).data().iter().map(|x: &f32| x.to_bits()).collect::<Vec<_>>();
    ensure!(bits(g01) == bits(g10), "fusion depends on branch order");

    let s = ModelState::init(&common::small_model(Variant::AnetAtt, 16, 2), 7)?;
    let (tape, out) = infer(&s, images)?;
    let f = tape.value(out.fmap);
    let jm = tape.value(out.joint.as_ref().unwrap().jmap);
    for (&fv, &jv) in f.data().iter().zip(jm.data()) {
        let (lo, hi) = if fv >= 0.0 { (fv, 2.0 * fv) } else { (2.0 * fv, fv) };
        ensure!(jv >= lo && jv <= hi, "attention J {jv} outside [{lo}, {hi}]");
    }
    Ok(format!(
        "zeroed distiller: J == F, j vs head(F) rel {worst:.1e}; fusion order bitwise invariant; attention J within [F, 2F] on {} elements",
        f.len()
    ))
}

fn round_trip() -> Check {
    let train_ds = common::small_data(8, 4, 32, 21);
    let mc = common::small_model(Variant::Anet, 32, 8);
    let cfg = TrainConfig {
        variant: Variant::Anet,
        epochs_total: 2,
        stage1_epochs: 1,
        p: 4,
        k: 2,
        batches_per_epoch: Some(2),
        seed: 5,
        ..Default::default()
    };
    let mut t = Trainer::new(&train_ds, &mc, &cfg)?;
    while !t.finished() {
        t.run_epoch(|_| {})?;
    }
    let probe = common::small_data(25, 4, 32, 99);
    ensure!(probe.len() == 100, "probe set size {}", probe.len());
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.anet");
    t.checkpoint().save(&path)?;
    let mut loaded = ModelState::init(&mc, 1234)?;
    Checkpoint::load(&path)?.restore(&mut loaded, None)?;
    let mut compared = 0;
    for sel in [Selector::F, Selector::Fa, Selector::J] {
        let before = extract_features(&probe, &t.model, sel)?;
        let after = extract_features(&probe, &loaded, sel)?;
        let same = before
            .data()
            .iter()
            .zip(after.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "{sel} features differ after reload");
        compared += before.len();
    }
    Ok(format!("100 images, selectors f/fa/j: {compared} values bitwise identical"))
}

fn report(n: usize, name: &str, r: Check, failures: &mut usize) {
    match r {
        Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
        Err(e) => {
            *failures += 1;
            println!("FAIL {n:>2} {name}: {e:#}");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, "gradient correctness", gradients(), &mut failures);
    report(2, "metric oracle equivalence", metrics(), &mut failures);
    eprintln!("running the directional experiment (9 training runs)...");
    let exp = run_experiment();
    match &exp {
        Ok(exp) => {
            report(3, "directional improvement", directional(exp), &mut failures);
            report(4, "amelioration constraints", amelioration(exp), &mut failures);
            report(5, "freezing exactness", freezing(exp), &mut failures);
        }
        Err(e) => {
            for (n, name) in [(3, "directional improvement"), (4, "amelioration constraints"), (5, "freezing exactness")] {
                report(n, name, Err(anyhow::anyhow!("experiment failed: {e:#}")), &mut failures);
            }
        }
    }
    report(6, "masking exactness", masking(), &mut failures);
    report(7, "determinism", determinism(), &mut failures);
    match &exp {
        Ok(exp) => report(8, "protocol fidelity", protocol(exp), &mut failures),
        Err(e) => report(8, "protocol fidelity", Err(anyhow::anyhow!("experiment failed: {e:#}")), &mut failures),
    }
    report(9, "structural identities", structure(), &mut failures);
    report(10, "checkpoint round-trip", round_trip(), &mut failures);
    if failures == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 criteria failed");
        ExitCode::FAILURE
    }
}
