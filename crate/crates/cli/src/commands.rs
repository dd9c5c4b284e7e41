use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;

use qexpand_core::classic::{Method, QeConfig};
use qexpand_core::dba::augment_database_with_fallbacks;
use qexpand_core::eval::{evaluate, group_analysis, paired_aps, Benchmark, EvalReport, Grouping};
use qexpand_core::io::{
    self, load_benchmark, load_checkpoint, load_corpus, save_checkpoint, save_corpus, save_embeddings,
};
use qexpand_core::lattqe::{LAttQe, LAttQeConfig};
use qexpand_core::synth::{calibrate_sigma, generate_corpus, Split, Stage, SynthConfig};
use qexpand_core::train::{fit, fit_dba_temperature, FitOutcome, TrainConfig, TrainSet};
use qexpand_core::{EmbeddingMatrix, Error, Expander};

use crate::args::*;
use crate::manifest::{dataset_files, sha256_file, Run};

/// What a command read and wrote, for the manifest.
#[derive(Default)]
pub struct Artifacts {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn out_dir(common: &Common) -> Result<&Path> {
    let dir = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("`--out` is required".into()))?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: PathBuf, contents: &str, art: &mut Artifacts) -> Result<()> {
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    art.outputs.push(path);
    Ok(())
}

fn write_json(path: PathBuf, value: &impl serde::Serialize, art: &mut Artifacts) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"), art)
}

fn stage(name: &str) -> Stage {
    if name == "val" {
        Stage::Val
    } else {
        Stage::Test
    }
}

fn bench(data: &DataArgs, art: &mut Artifacts) -> Result<Benchmark> {
    art.inputs.extend(dataset_files(&data.data));
    Ok(load_benchmark(&data.data, stage(&data.stage))?)
}

fn learned(
    checkpoint: Option<&Path>,
    nqe: usize,
    mode: Option<qexpand_core::WeightMode>,
    art: &mut Artifacts,
) -> Result<Expander> {
    let path = checkpoint.ok_or_else(|| Error::Config("method `lattqe` needs `--checkpoint`".into()))?;
    let (model, _) = load_checkpoint(path)?;
    art.inputs.push(path.to_path_buf());
    let mode = mode.unwrap_or(model.config().weight_mode);
    Ok(Expander::learned(Arc::new(model), nqe, mode)?)
}

fn expander(qe: &QeArgs, seed: u64, art: &mut Artifacts) -> Result<Expander> {
    if qe.method == Method::Lattqe {
        return learned(qe.checkpoint.as_deref(), qe.nqe, qe.weight_mode, art);
    }
    let cfg = QeConfig {
        method: qe.method,
        nqe: qe.nqe,
        alpha: qe.alpha,
        svm_c: qe.svm_c,
        neg: qe.neg,
        seed,
        ..QeConfig::default()
    };
    Ok(Expander::classic(cfg)?)
}

fn dba_expander(dba: &DbaArgs, seed: u64, art: &mut Artifacts) -> Result<Expander> {
    expander(
        &QeArgs {
            method: dba.dba_method,
            nqe: dba.ndba,
            alpha: dba.dba_alpha,
            svm_c: 0.1,
            neg: 5,
            checkpoint: dba.dba_checkpoint.clone(),
            weight_mode: dba.dba_weight_mode,
        },
        seed,
        art,
    )
}

/// Replaces the database by its augmented version when `ndba > 0`.
fn with_dba(bench: Benchmark, dba: &DbaArgs, seed: u64, art: &mut Artifacts) -> Result<(Benchmark, Vec<usize>)> {
    if dba.ndba == 0 {
        return Ok((bench, Vec::new()));
    }
    let e = dba_expander(dba, seed, art)?;
    let (db, fallbacks) = augment_database_with_fallbacks(&bench.database, &e, dba.ndba)?;
    Ok((bench.with_database(db)?, fallbacks))
}

fn ids_file(m: &EmbeddingMatrix) -> String {
    m.ids().iter().map(|id| format!("{id}\n")).collect()
}

pub fn synth(a: &SynthArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let mut cfg = SynthConfig {
        classes: a.classes,
        items_per_class: (a.min_items, a.max_items),
        dim: a.dim,
        sigma: a.sigma,
        distractors: a.distractors,
        train_distractors: a.train_distractors,
        query_fraction: a.query_fraction,
        train_fraction: a.train_fraction,
        val_fraction: a.val_fraction,
        easy_fraction: a.easy_fraction,
        seed: a.common.seed,
    };
    cfg.validate()?;
    let probes = match a.calibrate {
        Some(target) => {
            let probes = calibrate_sigma(&cfg, target, (0.0, 0.5), 12)?;
            cfg.sigma = probes.last().expect("at least one probe").0;
            probes
        }
        None => Vec::new(),
    };
    let corpus = generate_corpus(&cfg)?;
    art.outputs.extend(save_corpus(out, &corpus)?);
    let count = |s: Split| corpus.metadata.iter().filter(|m| m.split == s).count();
    write_json(
        out.join("synth.json"),
        &json!({
            "config": cfg,
            "calibration": probes.iter().map(|(s, m)| json!({"sigma": s, "val_map": m})).collect::<Vec<_>>(),
            "rows": corpus.embeddings.len(),
            "val_queries": count(Split::ValQuery),
            "test_queries": count(Split::TestQuery),
        }),
        art,
    )?;
    println!(
        "{} rows (dim {}, σ = {:.4}): {} val queries, {} test queries",
        corpus.embeddings.len(),
        cfg.dim,
        cfg.sigma,
        count(Split::ValQuery),
        count(Split::TestQuery)
    );
    Ok(())
}

pub fn index(a: &IndexArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let b = bench(&a.data, art)?;
    let norms: Vec<f64> = b
        .database
        .rows()
        .map(|r| r.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt())
        .collect();
    let db = b.database.normalize_rows()?;
    let path = out.join("database.qexp");
    save_embeddings(&path, &db)?;
    let sha = sha256_file(&path)?;
    art.outputs.push(path);
    write(out.join("database.ids"), &ids_file(&db), art)?;
    let (min, max) = norms
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &n| (lo.min(n), hi.max(n)));
    write_json(
        out.join("index.json"),
        &json!({"rows": db.len(), "dim": db.dim(), "min_norm": min, "max_norm": max, "sha256": sha}),
        art,
    )?;
    println!(
        "indexed {} rows of dim {} (input norms {min:.6}..{max:.6})",
        db.len(),
        db.dim()
    );
    Ok(())
}

pub fn search(a: &SearchArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let (b, _) = with_dba(bench(&a.data, art)?, &a.dba, a.common.seed, art)?;
    let e = expander(&a.qe, a.common.seed, art)?;
    let lists = (0..b.len())
        .into_par_iter()
        .map(|i| {
            let q = b.queries.row(i);
            let exclude: Vec<usize> = b.database.position(b.queries.id(i)).into_iter().collect();
            let x = e.expand(q, &b.database, &exclude)?;
            b.database.knn(&x, a.k, &exclude)
        })
        .collect::<qexpand_core::Result<Vec<_>>>()?;
    let mut csv = String::from("query,rank,item,similarity\n");
    for (i, list) in lists.iter().enumerate() {
        for (rank, n) in list.entries.iter().enumerate() {
            writeln!(
                csv,
                "{},{},{},{:.6}",
                b.queries.id(i),
                rank + 1,
                b.database.id(n.row),
                n.similarity
            )?;
        }
    }
    write(out.join("results.csv"), &csv, art)?;
    println!("{} queries, top {} each ({})", b.len(), a.k, e.label());
    Ok(())
}

pub fn expand(a: &ExpandArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let b = bench(&a.data, art)?;
    let e = expander(&a.qe, a.common.seed, art)?;
    let rows = (0..b.len())
        .into_par_iter()
        .map(|i| {
            let exclude: Vec<usize> = b.database.position(b.queries.id(i)).into_iter().collect();
            e.expand(b.queries.row(i), &b.database, &exclude)
        })
        .collect::<qexpand_core::Result<Vec<_>>>()?;
    let m = EmbeddingMatrix::new(b.queries.dim(), rows.concat(), b.queries.ids().to_vec())?;
    let path = out.join("expanded.qexp");
    save_embeddings(&path, &m)?;
    art.outputs.push(path);
    write(out.join("expanded.ids"), &ids_file(&m), art)?;
    println!("expanded {} queries ({})", m.len(), e.label());
    Ok(())
}

fn train_config(o: &OptimArgs, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        margin: o.margin,
        lr: o.lr,
        lr_decay: o.lr_decay,
        weight_decay: o.weight_decay,
        batch_size: o.batch_size,
        negatives: o.negatives,
        pool_size: o.pool_size,
        pool_refresh: o.pool_refresh,
        neighbors: (o.min_neighbors, o.max_neighbors),
        max_drop: o.max_drop,
        aux_weight: o.aux_weight,
        epochs,
        val_nqe: o.val_nqe,
        seed,
        ..TrainConfig::default()
    }
}

fn training_data(
    train: &Path,
    val: Option<&Path>,
    max_neighbors: usize,
    art: &mut Artifacts,
) -> Result<(TrainSet, Benchmark)> {
    let corpus = load_corpus(train)?;
    art.inputs.extend(dataset_files(train));
    let (emb, labels) = corpus.train_split()?;
    let set = TrainSet::new(emb, labels, max_neighbors)?;
    let val_dir = val.unwrap_or(train);
    if val.is_some() {
        art.inputs.extend(dataset_files(val_dir));
    }
    Ok((set, load_benchmark(val_dir, Stage::Val)?))
}

fn write_curve(out: &Path, o: &FitOutcome, art: &mut Artifacts) -> Result<()> {
    let mut csv = format!("epoch,update,loss,val_map,lr\n0,0,,{:.6},\n", o.initial_val_map);
    for r in &o.curve {
        writeln!(
            csv,
            "{},{},{:.8},{:.6},{:e}",
            r.epoch, r.update, r.loss, r.val_map, r.lr
        )?;
    }
    write(out.join("curve.csv"), &csv, art)
}

fn best_map(o: &FitOutcome) -> f64 {
    o.best_epoch.map_or(o.initial_val_map, |e| o.curve[e - 1].val_map)
}

pub fn train(a: &TrainArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let cfg = train_config(&a.optim, a.epochs, a.common.seed);
    let (set, val) = training_data(&a.train_data, a.val_data.as_deref(), cfg.neighbors.1, art)?;
    let model = match &a.init_checkpoint {
        Some(p) => {
            art.inputs.push(p.clone());
            load_checkpoint(p)?.0
        }
        None => {
            let m = &a.model;
            let mc = LAttQeConfig {
                dim: set.embeddings.dim(),
                layers: m.layers,
                heads: m.heads,
                kmax: m.kmax,
                use_positional_encoding: !m.no_positional_encoding,
                position_only: m.position_only,
                use_self_attention: !m.no_self_attention,
                use_aux_head: !m.no_aux_head,
                ..LAttQeConfig::default()
            };
            LAttQe::new(mc, a.common.seed)?
        }
    };
    println!(
        "training on {} queries, validating on {}",
        set.queries().len(),
        val.len()
    );
    let mut stdout = std::io::stdout();
    let o = fit(model, &set, &val, &cfg, Some(&mut stdout))?;
    let path = out.join("model.lqem");
    save_checkpoint(
        &path,
        &o.model,
        json!({"train": cfg, "best_epoch": o.best_epoch, "initial_val_map": o.initial_val_map, "val_map": best_map(&o)}),
    )?;
    art.outputs.push(path);
    write_curve(out, &o, art)?;
    println!(
        "val mAP {:.4} -> {:.4} (epoch {})",
        o.initial_val_map,
        best_map(&o),
        o.best_epoch.map_or("initial".into(), |e| e.to_string())
    );
    Ok(())
}

pub fn fit_temperature(a: &FitTemperatureArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let cfg = TrainConfig {
        temperature_lr: a.temperature_lr,
        temperature_epochs: a.temperature_epochs,
        ..train_config(&a.optim, 0, a.common.seed)
    };
    let (model, header) = load_checkpoint(&a.checkpoint)?;
    art.inputs.push(a.checkpoint.clone());
    let (set, val) = training_data(&a.train_data, a.val_data.as_deref(), cfg.neighbors.1, art)?;
    let mut stdout = std::io::stdout();
    let o = fit_dba_temperature(model, &set, &val, &cfg, Some(&mut stdout))?;
    let path = out.join("model.lqem");
    save_checkpoint(
        &path,
        &o.model,
        json!({"source": header.extra, "temperature_fit": cfg, "best_epoch": o.best_epoch}),
    )?;
    art.outputs.push(path);
    write_curve(out, &o, art)?;
    println!(
        "temperature {:.6}, val mAP {:.4} -> {:.4}",
        o.model.temperature(),
        o.initial_val_map,
        best_map(&o)
    );
    Ok(())
}

pub fn dba(a: &DbaCommandArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let b = bench(&a.data, art)?;
    let e = dba_expander(&a.dba, a.common.seed, art)?;
    let (db, fallbacks) = augment_database_with_fallbacks(&b.database, &e, a.dba.ndba)?;
    let path = out.join("augmented.qexp");
    save_embeddings(&path, &db)?;
    art.outputs.push(path);
    write(out.join("augmented.ids"), &ids_file(&db), art)?;
    let checkpoint = match &a.dba.dba_checkpoint {
        Some(p) if a.dba.dba_method == Method::Lattqe => Some(json!({"path": p, "sha256": sha256_file(p)?})),
        _ => None,
    };
    write_json(
        out.join("dba.json"),
        &json!({
            "source": dataset_files(&a.data.data).iter()
                .map(|p| Ok(json!({"path": p, "sha256": sha256_file(p)?})))
                .collect::<Result<Vec<_>>>()?,
            "stage": a.data.stage,
            "method": e.label(),
            "ndba": a.dba.ndba,
            "checkpoint": checkpoint,
            "rows": db.len(),
            "fallback_ids": fallbacks.iter().map(|&r| db.id(r)).collect::<Vec<_>>(),
        }),
        art,
    )?;
    println!(
        "augmented {} rows with {} ({} fallbacks)",
        db.len(),
        e.label(),
        fallbacks.len()
    );
    Ok(())
}

fn report_csv(reports: &[EvalReport]) -> String {
    let mut csv = format!("{}\n", EvalReport::csv_header());
    for r in reports {
        for row in r.csv_rows() {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    csv
}

pub fn eval(a: &EvalArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let (b, fallbacks) = with_dba(bench(&a.data, art)?, &a.dba, a.common.seed, art)?;
    if !fallbacks.is_empty() {
        log::warn!("{} database rows kept their original vector", fallbacks.len());
    }
    let e = expander(&a.qe, a.common.seed, art)?;
    let report = evaluate(&b, &e, &a.protocols, a.dba.ndba)?;
    let csv = report_csv(std::slice::from_ref(&report));
    write(out.join("eval.csv"), &csv, art)?;
    write_json(out.join("eval.json"), &report, art)?;
    let mut per_query = String::from("query,protocol,ap\n");
    for r in &report.results {
        for (id, ap) in report.query_ids.iter().zip(&r.per_query) {
            writeln!(
                per_query,
                "{id},{},{}",
                r.protocol,
                ap.map_or(String::new(), |v| format!("{v:.6}"))
            )?;
        }
    }
    write(out.join("per_query.csv"), &per_query, art)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(a: &SweepArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let b = bench(&a.data, art)?;
    let mut reports = Vec::new();
    for &method in &a.methods {
        let base = expander(
            &QeArgs {
                method,
                nqe: 0,
                alpha: a.alpha,
                svm_c: a.svm_c,
                neg: a.neg,
                checkpoint: a.checkpoint.clone(),
                weight_mode: a.weight_mode,
            },
            a.common.seed,
            art,
        )?;
        for &n in &a.nqe {
            reports.push(evaluate(&b, &base.with_nqe(n)?, &a.protocols, 0)?);
        }
    }
    let csv = report_csv(&reports);
    write(out.join("sweep.csv"), &csv, art)?;
    print!("{csv}");
    Ok(())
}

pub fn groups(a: &GroupsArgs, art: &mut Artifacts) -> Result<()> {
    let out = out_dir(&a.common)?;
    let b = bench(&a.data, art)?;
    let e = expander(&a.qe, a.common.seed, art)?;
    let before = evaluate(&b, &Expander::none(), &a.protocols, 0)?;
    let after = evaluate(&b, &e, &a.protocols, 0)?;
    let mut csv = String::from("protocol,group,count,mean_statistic,map_before,map_after,relative_improvement\n");
    for &p in &a.protocols {
        let (idx, bs, afs) = paired_aps(&before, &after, p)?;
        let statistic: Vec<f64> = match a.by {
            Grouping::ByRelevantCount => {
                let counts = b.relevant_counts(p);
                idx.iter().map(|&i| counts[i] as f64).collect()
            }
            Grouping::ByPreQeAp => bs.clone(),
        };
        for g in group_analysis(&bs, &afs, &statistic)? {
            writeln!(
                csv,
                "{p},{},{},{:.6},{:.6},{:.6},{}",
                g.group,
                g.count,
                g.mean_statistic,
                g.map_before,
                g.map_after,
                g.relative_improvement.map_or(String::new(), |v| format!("{v:.4}"))
            )?;
        }
    }
    write(out.join("groups.csv"), &csv, art)?;
    print!("{csv}");
    Ok(())
}

pub fn inspect(a: &InspectArgs, art: &mut Artifacts) -> Result<()> {
    let (model, header) = load_checkpoint(&a.checkpoint)?;
    art.inputs.push(a.checkpoint.clone());
    let params: Vec<_> = model
        .params()
        .iter()
        .map(|p| {
            let l2 = p
                .value
                .data()
                .iter()
                .map(|&x| f64::from(x) * f64::from(x))
                .sum::<f64>()
                .sqrt();
            json!({"name": p.name, "shape": p.value.shape(), "l2": l2})
        })
        .collect();
    let total: usize = model.params().iter().map(|p| p.value.data().len()).sum();
    let summary = json!({
        "format_version": io::LQEM_VERSION,
        "sha256": sha256_file(&a.checkpoint)?,
        "config": header.model,
        "temperature": model.temperature(),
        "parameters": total,
        "tensors": params,
        "extra": header.extra,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    if a.common.out.is_some() {
        write(out_dir(&a.common)?.join("inspect.json"), &text, art)?;
    }
    print!("{text}");
    Ok(())
}

pub fn run(cmd: &Command, threads: usize) -> Result<()> {
    let mut art = Artifacts::default();
    match cmd {
        Command::Synth(a) => synth(a, &mut art)?,
        Command::Index(a) => index(a, &mut art)?,
        Command::Search(a) => search(a, &mut art)?,
        Command::Expand(a) => expand(a, &mut art)?,
        Command::Train(a) => train(a, &mut art)?,
        Command::FitTemperature(a) => fit_temperature(a, &mut art)?,
        Command::Dba(a) => dba(a, &mut art)?,
        Command::Eval(a) => eval(a, &mut art)?,
        Command::Sweep(a) => sweep(a, &mut art)?,
        Command::Groups(a) => groups(a, &mut art)?,
        Command::InspectCheckpoint(a) => inspect(a, &mut art)?,
    }
    let common = cmd.common();
    if let Some(out) = &common.out {
        art.inputs.sort();
        art.inputs.dedup();
        Run {
            command: cmd.name(),
            config: cmd.resolved(),
            seed: common.seed,
            threads,
        }
        .write(out, &art.inputs, &art.outputs)?;
    }
    Ok(())
}
