//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. The desk-scale ablation makes this the slowest target (about 17
//! minutes on one core).

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use acal_core::data::{load_idx, parse_idx_images, parse_idx_labels, strip_labels, DataError, DomainPair, Split};
use acal_core::eval::{render_csv, run_ablation, AblationConfig, AblationOptions, AblationReport};
use acal_core::objectives::{Supervision, VariantName, VariantSpec};
use acal_core::sweep::{run_sweep, SweepOptions};
use acal_core::trainer::{
    init_source_model, init_state, pretrain_source, sample_batches, train_step, train_until, BranchMode,
    PretrainConfig, TrainConfig,
};
use common::*;

fn gradient_integrity() -> Check {
    let opts = SweepOptions::default();
    let r = run_sweep(&opts).map_err(|e| e.to_string())?;
    let max = r.max_rel_error();
    let detail = format!(
        "{} cases, h={:e}, max relative error {max:.3e}, {:.1}s",
        r.cases.len(),
        r.h,
        r.elapsed_s
    );
    if r.passed && max < 1e-4 && r.elapsed_s < 120.0 {
        Ok(detail)
    } else {
        let failed: Vec<&str> = r.cases.iter().filter(|c| !c.report.passed).map(|c| c.name.as_str()).collect();
        Err(format!("{detail}; failing cases {failed:?}"))
    }
}

fn fidelity_config(name: VariantName, supervision: Supervision, steps: usize) -> TrainConfig {
    TrainConfig {
        variant: VariantSpec::new(name).with_supervision(supervision),
        steps,
        batch_size: 4,
        eval_every: 25,
        seed: 13,
        branch_mode: BranchMode::PerBatch,
        check_isolation: true,
        pretrain: PretrainConfig {
            steps: 20,
            batch_size: 8,
            lr: 1e-3,
        },
        ..TrainConfig::default()
    }
}

/// Every phase of 100 steps changes only networks it owns, and over the run
/// each phase changes every network it is meant to train.
fn parameter_isolation() -> Check {
    let cfg = fidelity_config(VariantName::Acal, Supervision::Semi { labeled_fraction: 0.5 }, 100);
    let pair = tiny_pair(13, 0.5);
    let init = init_source_model(cfg.seed, SHAPE, CLASSES).map_err(|e| e.to_string())?;
    let m_s = pretrain_source(&init, &pair.source_train, &cfg).map_err(|e| e.to_string())?;
    let mut state = init_state(&cfg, &pair, &m_s).map_err(|e| e.to_string())?;
    let owned = |phase: &str| -> &[&str] {
        match phase {
            "discriminators" => &["d_s", "d_t"],
            "generators" => &["g_st", "g_ts"],
            "task_models" => &["m_s", "m_t"],
            _ => &[],
        }
    };
    let mut seen: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut branches = BTreeSet::new();
    let mut phases = 0;
    for t in 0..cfg.steps as u64 {
        let batches = sample_batches(&cfg, &pair.source_train, &pair.target_train, t).map_err(|e| e.to_string())?;
        let before = state.nets.clone();
        let out = train_step(&mut state, &cfg, &batches).map_err(|e| format!("step {t}: {e}"))?;
        branches.insert(format!("{:?}", out.record.branch));
        let mut claimed = BTreeSet::new();
        for a in &out.audits {
            phases += 1;
            for net in &a.changed {
                if !owned(a.phase).contains(net) {
                    return Err(format!("step {t}: phase {} changed {net}", a.phase));
                }
                seen.insert((a.phase, net));
                claimed.insert(*net);
            }
        }
        // Cross-check the audits against a comparison of the whole step.
        for (prefix, net) in state.nets.iter() {
            let moved = !net.params_bit_eq(before.get(prefix).unwrap());
            if moved != claimed.contains(prefix) {
                return Err(format!("step {t}: {prefix} moved={moved} but audits disagree"));
            }
        }
    }
    for phase in ["discriminators", "generators", "task_models"] {
        for net in owned(phase) {
            if !seen.contains(&(phase, *net)) {
                return Err(format!("phase {phase} never updated {net}"));
            }
        }
    }
    if branches.len() < 2 {
        return Err(format!("only branches {branches:?} were exercised"));
    }
    Ok(format!("{phases} phases over {} steps, branches {branches:?}", cfg.steps))
}

/// With no target labels kept, corrupting the target training labels before
/// they are stripped leaves the run bit-identical.
fn poisoned_labels() -> Check {
    let cfg = fidelity_config(VariantName::Acal, Supervision::Unsupervised, 100);
    let clean = tiny_pair(14, 0.0);
    let full = tiny_pair(14, 1.0);
    let poisoned_sample = full.target_train.map_labels(|l| (l + 7) % CLASSES);
    if poisoned_sample.labels() == full.target_train.labels() {
        return Err("poisoning left the labels unchanged".into());
    }
    let poisoned = DomainPair {
        target_train: strip_labels(&poisoned_sample, 0.0, 99).map_err(|e| e.to_string())?,
        ..clean.clone()
    };
    let init = init_source_model(cfg.seed, SHAPE, CLASSES).map_err(|e| e.to_string())?;
    let m_s = pretrain_source(&init, &clean.source_train, &cfg).map_err(|e| e.to_string())?;
    let run = |pair: &DomainPair| -> Result<_, String> {
        let mut s = init_state(&cfg, pair, &m_s).map_err(|e| e.to_string())?;
        train_until(&mut s, &cfg, pair, cfg.steps as u64, None).map_err(|e| e.to_string())?;
        Ok(s)
    };
    let a = run(&clean)?;
    let b = run(&poisoned)?;
    if a.history.iter().any(|r| format!("{:?}", r.branch) != "Unsupervised") {
        return Err("a step left the unsupervised branch".into());
    }
    let same_nets = a.nets.iter().all(|(p, n)| n.params_bit_eq(b.nets.get(p).unwrap()));
    let same_history = a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            x.diagnostics.len() == y.diagnostics.len()
                && x.diagnostics.iter().zip(&y.diagnostics).all(|((k, u), (l, v))| k == l && u.to_bits() == v.to_bits())
                && x == y
        });
    if same_nets && same_history {
        Ok(format!("{} steps bit-identical", a.history.len()))
    } else {
        Err(format!("nets identical: {same_nets}, history identical: {same_history}"))
    }
}

fn algorithm_fidelity() -> Check {
    let a = parameter_isolation().map_err(|e| format!("isolation: {e}"))?;
    let b = poisoned_labels().map_err(|e| format!("poisoned labels: {e}"))?;
    Ok(format!("isolation: {a}; poisoned labels: {b}"))
}

fn table1_config() -> AblationConfig {
    AblationConfig::default()
}

fn final_mean(report: &AblationReport, v: VariantName) -> Result<f64, String> {
    report
        .row(v)
        .filter(|r| r.runs.len() == 3)
        .map(|r| r.final_mean)
        .ok_or_else(|| format!("{v} lacks three seeds"))
}

fn table1_ordering(report: &AblationReport, elapsed: Duration) -> Check {
    let acal = final_mean(report, VariantName::Acal)?;
    let rcal = final_mean(report, VariantName::Rcal)?;
    let none = final_mean(report, VariantName::NoAdaptation)?;
    let cyc = final_mean(report, VariantName::Cyclegan)?;
    let pct = |x: f64| 100.0 * x;
    let conds = [
        ("acal >= no_adaptation + 5", acal >= none + 0.05),
        ("acal >= cyclegan + 5", acal >= cyc + 0.05),
        ("rcal >= cyclegan", rcal >= cyc),
        ("runtime < 30 min", elapsed < Duration::from_secs(30 * 60)),
    ];
    let best: Vec<String> = [VariantName::Acal, VariantName::Rcal, VariantName::NoAdaptation, VariantName::Cyclegan]
        .iter()
        .filter_map(|&v| report.row(v).map(|r| format!("{v} {:.2}", pct(r.best_mean))))
        .collect();
    let seeds: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            let finals: Vec<String> = r.runs.iter().map(|s| format!("{:.1}", pct(s.final_acc))).collect();
            format!("{} [{}]", r.variant, finals.join(" "))
        })
        .collect();
    let detail = format!(
        "acal {:.2}, rcal {:.2}, no_adaptation {:.2}, cyclegan {:.2} (mean final test %; per seed: {}; best-by-val: {}), {:.0}s",
        pct(acal),
        pct(rcal),
        pct(none),
        pct(cyc),
        seeds.join(", "),
        best.join(", "),
        elapsed.as_secs_f64()
    );
    let failed: Vec<&str> = conds.iter().filter(|c| !c.1).map(|c| c.0).collect();
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; violated: {}", failed.join(", ")))
    }
}

fn semi_supervised(table1: &AblationReport) -> Check {
    let mut cfg = table1_config();
    cfg.variants = vec![VariantName::Acal];
    cfg.train.variant = cfg.train.variant.with_supervision(Supervision::Unsupervised);
    let unsup = run_ablation(&cfg, &AblationOptions::default()).map_err(|e| e.to_string())?;
    let full = final_mean(table1, VariantName::Acal)?;
    let none = final_mean(&unsup, VariantName::Acal)?;
    let detail = format!("fraction 1.0: {:.2}%, fraction 0.0: {:.2}%", 100.0 * full, 100.0 * none);
    if full >= none {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn csv_determinism() -> Check {
    let cfg = AblationConfig {
        variants: vec![VariantName::NoAdaptation, VariantName::Cyclegan, VariantName::Acal],
        seeds: vec![1, 2],
        train: TrainConfig {
            steps: 30,
            eval_every: 10,
            pretrain: PretrainConfig {
                steps: 30,
                ..PretrainConfig::default()
            },
            ..TrainConfig::default()
        },
        ..AblationConfig::default()
    };
    let opts = AblationOptions {
        metrics_dir: None,
        zero_wall_time: true,
    };
    let a = render_csv(&run_ablation(&cfg, &opts).map_err(|e| e.to_string())?);
    let b = render_csv(&run_ablation(&cfg, &opts).map_err(|e| e.to_string())?);
    if a == b {
        Ok(format!("{} bytes, {} rows identical", a.len(), a.lines().count()))
    } else {
        Err("reports differ".into())
    }
}

fn parse_error(r: Result<impl std::fmt::Debug, DataError>) -> Result<(usize, String), String> {
    match r {
        Err(DataError::Parse { offset, detail }) => Ok((offset, detail)),
        other => Err(format!("expected a parse error, got {other:?}")),
    }
}

fn idx_ingestion() -> Check {
    let f = |n: &str| fixtures_dir().join(n);
    let ds = load_idx(f("four-images.idx"), f("four-labels.idx"), "fixture", 10, Split::Test).map_err(|e| e.to_string())?;
    if ds.image_shape() != [1, 28, 28] || ds.labels() != [Some(3), Some(1), Some(4), Some(1)] {
        return Err(format!("shape {:?}, labels {:?}", ds.image_shape(), ds.labels()));
    }
    for i in 0..4 {
        for r in 0..28 {
            for c in 0..28 {
                let byte = match (i, r, c) {
                    (0, 0, 0) => 0,
                    (0, 0, 1) => 255,
                    _ => (i * 64 + r * 9 + c * 5) % 256,
                };
                let want = byte as f64 / 127.5 - 1.0;
                if ds.image(i)[r * 28 + c] != want {
                    return Err(format!("pixel ({i},{r},{c})"));
                }
            }
        }
    }
    let read = |n: &str| std::fs::read(f(n)).map_err(|e| e.to_string());
    type Case<'a> = (&'a str, Result<(usize, String), String>, usize, &'a str);
    let cases: Vec<Case> = vec![
        (
            "bad-magic-images.idx",
            parse_error(parse_idx_images(&read("bad-magic-images.idx")?)),
            0,
            "bad magic 0x00000804, expected 0x00000803",
        ),
        (
            "labels-with-image-magic.idx",
            parse_error(parse_idx_labels(&read("labels-with-image-magic.idx")?)),
            0,
            "bad magic 0x00000803, expected 0x00000801",
        ),
        (
            "truncated-header-images.idx",
            parse_error(parse_idx_images(&read("truncated-header-images.idx")?)),
            8,
            "truncated header: missing dimension",
        ),
        (
            "truncated-images.idx",
            parse_error(parse_idx_images(&read("truncated-images.idx")?)),
            16 + 4 * 784 - 10,
            "truncated payload: header declares 3136 bytes, found 3126",
        ),
        (
            "trailing-images.idx",
            parse_error(parse_idx_images(&read("trailing-images.idx")?)),
            16 + 4 * 784,
            "3 trailing bytes",
        ),
        (
            "three-labels.idx",
            parse_error(load_idx(f("four-images.idx"), f("three-labels.idx"), "f", 10, Split::Test)),
            4,
            "label count 3 does not match 4 images",
        ),
        (
            "out-of-range-labels.idx",
            parse_error(load_idx(f("four-images.idx"), f("out-of-range-labels.idx"), "f", 10, Split::Test)),
            10,
            "label 12 outside 0..10",
        ),
    ];
    let n = cases.len();
    for (name, got, off, detail) in cases {
        let (o, d) = got.map_err(|e| format!("{name}: {e}"))?;
        if o != off || d != detail {
            return Err(format!("{name}: offset {o} '{d}', expected offset {off} '{detail}'"));
        }
    }
    Ok(format!("4-image fixture exact, {n} malformed fixtures rejected as documented"))
}

fn report(name: &str, r: &Check, started: Instant) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match r {
        Ok(d) => println!("PASS {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("FAIL {name}: {d} [{secs:.1}s]"),
    }
    r.is_ok()
}

fn main() {
    let mut ok = true;
    let timed = |f: &dyn Fn() -> Check| {
        let t = Instant::now();
        (f(), t)
    };
    let simple: [(&str, &dyn Fn() -> Check); 4] = [
        ("gradient integrity", &gradient_integrity),
        ("loss identities", &check_loss_identities),
        ("objective composition contract", &check_composition_contract),
        ("update schedule fidelity", &algorithm_fidelity),
    ];
    for (name, f) in simple {
        let (r, t) = timed(f);
        ok &= report(name, &r, t);
    }

    let t = Instant::now();
    let table1 = run_ablation(&table1_config(), &AblationOptions::default());
    let elapsed = t.elapsed();
    match &table1 {
        Ok(rep) => {
            ok &= report("desk-scale ablation ordering", &table1_ordering(rep, elapsed), t);
            let t = Instant::now();
            ok &= report("semi-supervised monotonicity", &semi_supervised(rep), t);
        }
        Err(e) => {
            let r: Check = Err(e.to_string());
            ok &= report("desk-scale ablation ordering", &r, t);
            ok &= report("semi-supervised monotonicity", &Err("ablation did not complete".into()), t);
        }
    }

    for (name, f) in [
        ("report determinism", &csv_determinism as &dyn Fn() -> Check),
        ("IDX ingestion", &idx_ingestion),
    ] {
        let (r, t) = timed(f);
        ok &= report(name, &r, t);
    }
    if !ok {
        std::process::exit(1);
    }
}
