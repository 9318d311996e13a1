use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use acal_core::data::{encode_pgm, export_pgm, write_idx, DomainPair};
use acal_core::eval::{
    emit_report, render, run_ablation, AblationFailure, AblationOptions, AblationReport, ReportFormat,
};
use acal_core::nets::{encode, load_checkpoint_as, save_checkpoint, Network, Role};
use acal_core::sweep::{run_sweep, CaseKind, SweepOptions};
use acal_core::trainer::{init_source_model, pretrain_source, run_training, TrainState};
use acal_core::{eval::accuracy, sha256_hex};
use anyhow::{bail, Context, Result};
use serde_json::json;

use crate::config::{load_config, RunConfig};
use crate::{Command, ConfigArgs};

/// A check that ran to completion and found numerical disagreement.
#[derive(Debug)]
struct NumericalFailure(String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = if let Some(err) = e.downcast_ref::<acal_core::Error>() {
        err.is_numerical()
    } else if let Some(f) = e.downcast_ref::<AblationFailure>() {
        f.error.is_numerical()
    } else {
        e.downcast_ref::<NumericalFailure>().is_some()
    };
    if numerical {
        2
    } else {
        1
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn effective_config(args: &ConfigArgs, extra: Vec<String>) -> Result<RunConfig> {
    let mut sets = args.sets.clone();
    sets.extend(extra);
    if let Some(out) = &args.out {
        sets.push(format!("output.dir={}", json_string(&out.to_string_lossy())));
    }
    let cfg = load_config(args.config.as_deref(), &sets)?;
    cfg.trainer.validate()?;
    Ok(cfg)
}

fn write_run_json(cfg: &RunConfig, command: &str, fingerprints: &BTreeMap<String, String>) -> Result<()> {
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let canonical = cfg.canonical();
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.trainer.seed,
        "config": serde_json::from_str::<serde_json::Value>(&canonical)?,
        "config_fingerprint": sha256_hex(canonical.as_bytes()),
        "fingerprints": fingerprints,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(dir.join("run.json"), text)?;
    Ok(())
}

fn data_fingerprints(pair: &DomainPair) -> BTreeMap<String, String> {
    pair.parts()
        .iter()
        .map(|(name, ds)| (format!("data/{name}"), ds.fingerprint()))
        .collect()
}

fn net_fingerprint(net: &Network) -> String {
    sha256_hex(&encode(net))
}

fn build_pair(cfg: &RunConfig) -> Result<DomainPair> {
    let fraction = cfg.trainer.variant.supervision.labeled_fraction();
    Ok(cfg.data.build(cfg.trainer.seed, fraction)?)
}

fn pretrained_source(cfg: &RunConfig, pair: &DomainPair) -> Result<Network> {
    let src = &pair.source_train;
    let init = init_source_model(cfg.trainer.seed, src.image_shape(), src.class_count())?;
    Ok(pretrain_source(&init, src, &cfg.trainer)?)
}

pub fn run(command: Command, args: &ConfigArgs) -> Result<()> {
    match command {
        Command::PrintConfig => {
            let cfg = load_config(args.config.as_deref(), &with_out(args))?;
            print!("{}", cfg.canonical());
            Ok(())
        }
        Command::GenData { export } => gen_data(&effective_config(args, vec![])?, export),
        Command::Pretrain => pretrain(&effective_config(args, vec![])?),
        Command::Train {
            variant,
            steps,
            seed,
            source_model,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = variant {
                extra.push(format!("trainer.variant.name={}", json_string(&v)));
            }
            if let Some(s) = steps {
                extra.push(format!("trainer.steps={s}"));
            }
            if let Some(s) = seed {
                extra.push(format!("trainer.seed={s}"));
            }
            train(&effective_config(args, extra)?, source_model.as_deref())
        }
        Command::Ablate => ablate(&effective_config(args, vec![])?),
        Command::Gradcheck { coords, json } => gradcheck(coords, json.as_deref()),
        Command::Report { input, format, output } => report(&input, &format, output.as_deref()),
        Command::DumpSamples { state, count } => {
            let cfg = effective_config(args, vec![])?;
            let state = state.unwrap_or_else(|| cfg.output.dir.join("state"));
            dump_samples(&cfg, &state, count)
        }
    }
}

fn with_out(args: &ConfigArgs) -> Vec<String> {
    let mut sets = args.sets.clone();
    if let Some(out) = &args.out {
        sets.push(format!("output.dir={}", json_string(&out.to_string_lossy())));
    }
    sets
}

fn gen_data(cfg: &RunConfig, export: bool) -> Result<()> {
    // Corpora are written fully labeled; label stripping belongs to training.
    let pair = cfg.data.build(cfg.trainer.seed, 1.0)?;
    let dir = cfg.output.dir.join("data");
    fs::create_dir_all(&dir)?;
    for (name, ds) in pair.parts() {
        write_idx(
            ds,
            dir.join(format!("{name}-images.idx")),
            dir.join(format!("{name}-labels.idx")),
        )?;
        if export {
            export_pgm(ds, dir.join("pgm").join(name))?;
        }
        println!("{name}: {} images {:?}", ds.len(), ds.image_shape());
    }
    write_run_json(cfg, "gen-data", &data_fingerprints(&pair))
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let pair = build_pair(cfg)?;
    let m_s = pretrained_source(cfg, &pair)?;
    let path = cfg.output.dir.join("m_s.acnt");
    fs::create_dir_all(&cfg.output.dir)?;
    save_checkpoint(&m_s, &path)?;
    println!("source val accuracy {:.4}", accuracy(&m_s, &pair.source_val)?);
    println!("target test accuracy {:.4}", accuracy(&m_s, &pair.target_test)?);
    println!("wrote {}", path.display());
    let mut fps = data_fingerprints(&pair);
    fps.insert("m_s".into(), net_fingerprint(&m_s));
    write_run_json(cfg, "pretrain", &fps)
}

fn train(cfg: &RunConfig, source_model: Option<&Path>) -> Result<()> {
    let pair = build_pair(cfg)?;
    let m_s = match source_model {
        Some(p) => load_checkpoint_as(p, Role::Classifier).with_context(|| format!("loading {}", p.display()))?,
        None => pretrained_source(cfg, &pair)?,
    };
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let mut fps = data_fingerprints(&pair);
    fps.insert("m_s".into(), net_fingerprint(&m_s));
    // Written before training so an aborted run is still reproducible.
    write_run_json(cfg, "train", &fps)?;

    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let (state, row) = run_training(&cfg.trainer, &pair, &m_s, Some(&mut metrics))?;
    metrics.flush()?;
    state.save(dir.join("state"))?;
    let mut summary = serde_json::to_string_pretty(&row)?;
    summary.push('\n');
    fs::write(dir.join("summary.json"), summary)?;

    fps.insert("m_t".into(), net_fingerprint(&state.nets.m_t));
    fps.insert("best_m_t".into(), net_fingerprint(&state.best.m_t));
    write_run_json(cfg, "train", &fps)?;
    println!(
        "{} seed {}: final {:.4} best {:.4} (step {}) in {:.1}s",
        row.variant, row.seed, row.final_acc, row.best_acc, row.best_step, row.wall_s
    );
    Ok(())
}

fn write_reports(report: &AblationReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in ReportFormat::ALL {
        emit_report(report, f, dir.join(format!("report.{}", f.extension())))?;
    }
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let acfg = cfg.ablation_config();
    let dir = &cfg.output.dir;
    let mut fps = BTreeMap::new();
    fps.insert("ablation".into(), acfg.fingerprint());
    write_run_json(cfg, "ablate", &fps)?;
    let opts = AblationOptions {
        metrics_dir: Some(dir.join("metrics")),
        zero_wall_time: cfg.ablation.zero_wall_time,
    };
    match run_ablation(&acfg, &opts) {
        Ok(report) => {
            write_reports(&report, dir)?;
            for row in &report.rows {
                println!(
                    "{:<20} final {:.4} ± {:.4}  best {:.4} ± {:.4}",
                    row.variant.as_str(),
                    row.final_mean,
                    row.final_std,
                    row.best_mean,
                    row.best_std
                );
            }
            println!("wrote {}", dir.join("report.{csv,json,svg}").display());
            Ok(())
        }
        Err(failure) => {
            write_reports(&failure.partial, dir)?;
            eprintln!("partial report with {} rows written", failure.partial.rows.len());
            Err(anyhow::Error::new(failure))
        }
    }
}

fn gradcheck(coords: usize, json_path: Option<&Path>) -> Result<()> {
    let opts = SweepOptions {
        network_coords: coords,
        ..SweepOptions::default()
    };
    let report = run_sweep(&opts)?;
    println!("{:<8} {:<22} {:>7} {:>6} {:>12}", "kind", "case", "coords", "kinks", "max_rel_err");
    for case in &report.cases {
        let kind = match case.kind {
            CaseKind::Op => "op",
            CaseKind::Network => "network",
        };
        let checked: usize = case.report.params.iter().map(|p| p.checked).sum();
        println!(
            "{:<8} {:<22} {:>7} {:>6} {:>12.3e} {}",
            kind,
            case.name,
            checked,
            case.report.kinks(),
            case.report.max_rel_error(),
            if case.report.passed { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "max relative error {:.3e} (tol {:.0e}, h {:.0e}) in {:.1}s",
        report.max_rel_error(),
        report.tol,
        report.h,
        report.elapsed_s
    );
    if let Some(p) = json_path {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?;
    }
    if !report.passed {
        let failed: Vec<&str> = report
            .cases
            .iter()
            .filter(|c| !c.report.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(NumericalFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn report(input: &Path, format: &str, output: Option<&Path>) -> Result<()> {
    let format: ReportFormat = format.parse()?;
    let text = fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
    let report: AblationReport =
        serde_json::from_str(&text).with_context(|| format!("{} is not an ablation report", input.display()))?;
    match output {
        Some(p) => emit_report(&report, format, p)?,
        None => print!("{}", render(&report, format)?),
    }
    Ok(())
}

fn dump_samples(cfg: &RunConfig, state_dir: &Path, count: usize) -> Result<()> {
    if count == 0 {
        bail!(acal_core::Error::config("--count must be positive"));
    }
    let state = TrainState::load(state_dir).with_context(|| format!("loading state from {}", state_dir.display()))?;
    let pair = build_pair(cfg)?;
    let out: PathBuf = cfg.output.dir.join("samples");
    let directions = [
        ("s2t", &pair.source_val, &state.nets.g_st, &state.nets.g_ts),
        ("t2s", &pair.target_val, &state.nets.g_ts, &state.nets.g_st),
    ];
    for (name, ds, forward, back) in directions {
        let [c, h, w] = ds.image_shape();
        if c != 1 {
            bail!(acal_core::Error::config(format!("sample export needs one channel, got {c}")));
        }
        let n = count.min(ds.len());
        let idx: Vec<usize> = (0..n).collect();
        let (x, _) = ds.batch(&idx);
        let mapped = forward.predict(&x)?;
        let cycled = back.predict(&mapped)?;
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let per = h * w;
        for i in 0..n {
            for (tag, t) in [("real", &x), ("mapped", &mapped), ("cycled", &cycled)] {
                let pixels = &t.data()[i * per..(i + 1) * per];
                fs::write(dir.join(format!("{i:03}_{tag}.pgm")), encode_pgm(pixels, h, w))?;
            }
        }
        println!("{name}: {n} triplets in {}", dir.display());
    }
    Ok(())
}
