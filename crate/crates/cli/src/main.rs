use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use memspm::adaptation::history_csv;
use memspm::checkpoint::Checkpoint;
use memspm::data::{generate_synthetic, read_dataset, write_dataset};
use memspm::inspect::{memory_report, Pca2};
use memspm::pipeline::{
    eval_cluster_seed, evaluate, gradcheck, prepare, GradCheckConfig, PreparedData, RunConfig,
};
use memspm::{EmbeddingDataset, Model, Scenario};

#[derive(Parser)]
#[command(
    name = "memspm",
    version,
    about = "Memory-assisted sub-prototype mining on embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source/target pair with planted sub-clusters.
    Gen(Common),
    /// Train a model; writes checkpoint.bin, history.csv and config.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score a checkpoint on the target domain; writes metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export memory usage, assignments, projections and sub-cluster agreement.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to address (MSPM). Defaults to freshly generated source data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of most used sub-prototypes to decode.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Compare analytic gradients of the full loss with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of independent draws.
        #[arg(long, default_value_t = 1)]
        draws: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_subs: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    k_target: Option<usize>,
    #[arg(long)]
    scenario: Option<Scenario>,
}

#[derive(Args)]
struct DataArgs {
    /// Source MSPM file; both files default to data generated from the config.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => serde_json::from_str(
                &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )
            .with_context(|| format!("parsing {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.synthetic.seed = s;
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(n) = self.n_items {
            cfg.memory.n_items = n;
        }
        if let Some(s) = self.n_subs {
            cfg.memory.n_subs = s;
        }
        if let Some(k) = self.top_k {
            cfg.memory.top_k = k;
        }
        if let Some(k) = self.k_target {
            cfg.train.k_target = Some(k);
        }
        if let Some(s) = self.scenario {
            cfg.scenario = s;
        }
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        write_json(&self.out.join("config.json"), &cfg)?;
        Ok(cfg)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(cfg: &RunConfig, data: &DataArgs) -> Result<PreparedData> {
    let (source, target) = match (&data.source, &data.target) {
        (Some(s), Some(t)) => (read_dataset(s)?, read_dataset(t)?),
        _ => {
            let d = generate_synthetic(&cfg.synthetic)?;
            (d.source, d.target)
        }
    };
    Ok(prepare(&source, &target, &cfg.split())?)
}

fn load_checkpoint(path: &Path) -> Result<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((Model::new(ck.model)?, ck))
}

#[derive(Serialize)]
struct GenReport<'a> {
    spec: &'a memspm::SyntheticSpec,
    stats: &'a memspm::data::GeneratorStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
}

fn cmd_gen(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let d = generate_synthetic(&cfg.synthetic)?;
    write_dataset(&d.source, common.out.join("source.mspm"))?;
    write_dataset(&d.target, common.out.join("target.mspm"))?;
    if !d.stats.passed {
        log::warn!(
            "sub-cluster means closer than the noise diameter ({:.3} < {:.3})",
            d.stats.min_mean_distance,
            d.stats.required_distance
        );
    }
    let report = GenReport {
        spec: &cfg.synthetic,
        stats: &d.stats,
        note: (!d.stats.has_substructure).then_some("no sub-structure: one sub-cluster per class"),
    };
    write_json(&common.out.join("gen.json"), &report)?;
    println!(
        "wrote {} source and {} target samples; min mean distance {:.4}",
        d.source.len(),
        d.target.len(),
        d.stats.min_mean_distance
    );
    Ok(())
}

fn cmd_train(common: &Common, data: &DataArgs) -> Result<()> {
    let cfg = common.resolve()?;
    let data = load_data(&cfg, data)?;
    let model = Model::new(cfg.model_config(data.source.dim(), data.n_classes))?;
    let out = memspm::adaptation::train(&model, &data.source, &data.target, &cfg.train)?;
    Checkpoint {
        model: model.config,
        iteration: out.iterations as u64,
        params: out.store,
    }
    .save(common.out.join("checkpoint.bin"))?;
    fs::write(common.out.join("history.csv"), history_csv(&out.history))?;
    if let Some(last) = out.history.last() {
        println!(
            "epoch {}: total {:.6} ce {:.6} consensus {} unknown {}",
            last.epoch, last.total, last.ce, last.n_consensus, last.n_unknown
        );
    }
    Ok(())
}

fn cmd_eval(common: &Common, data: &DataArgs, checkpoint: &Path) -> Result<()> {
    let cfg = common.resolve()?;
    let data = load_data(&cfg, data)?;
    let (model, ck) = load_checkpoint(checkpoint)?;
    if model.config.n_classes != data.n_classes {
        bail!(
            "checkpoint classifies {} classes but the split has {} source classes",
            model.config.n_classes,
            data.n_classes
        );
    }
    let k = cfg.train.k_target_for(data.n_classes);
    let ev = evaluate(
        &model,
        &ck.params,
        &data,
        k,
        cfg.train.cluster_space,
        eval_cluster_seed(cfg.train.seed),
    )?;
    write_json(&common.out.join("metrics.json"), &ev.metrics)?;
    let m = &ev.metrics;
    match (m.h_score, m.pda_accuracy) {
        (Some(h), _) => println!(
            "os* {:.4} unk {:.4} h {:.4}",
            m.os_star,
            m.unk.unwrap_or(0.0),
            h
        ),
        (None, Some(a)) => println!("os* {:.4} accuracy {a:.4}", m.os_star),
        _ => println!("os* {:.4}", m.os_star),
    }
    Ok(())
}

#[derive(Serialize)]
struct AriReport {
    per_class: std::collections::BTreeMap<i32, Option<f64>>,
    mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PcaRow {
    index: usize,
    label: i32,
    pc1: f64,
    pc2: f64,
}

#[derive(Serialize)]
struct ProtoPcaRow {
    item: usize,
    sub: usize,
    usage_count: usize,
    pc1: f64,
    pc2: f64,
}

fn cmd_inspect(common: &Common, checkpoint: &Path, data: Option<&Path>, top: usize) -> Result<()> {
    let cfg = common.resolve()?;
    let (model, ck) = load_checkpoint(checkpoint)?;
    let ds: EmbeddingDataset = match data {
        Some(p) => read_dataset(p)?,
        None => generate_synthetic(&cfg.synthetic)?.source,
    };
    let view = model.view(&ck.params)?;
    let report = memory_report(&view, &ds)?;
    let out = &common.out;
    write_csv(&out.join("usage.csv"), &report.usage)?;
    write_csv(&out.join("assignments.csv"), &report.assignments)?;

    let pca = Pca2::fit(&report.zhat)?;
    let truth = ds.ground_truth();
    write_csv(
        &out.join("pca_zhat.csv"),
        report.zhat.iter_rows().enumerate().map(|(i, z)| {
            let [pc1, pc2] = pca.project(z);
            PcaRow {
                index: i,
                label: truth[i],
                pc1,
                pc2,
            }
        }),
    )?;
    let bank = view
        .bank
        .as_ref()
        .expect("report succeeded, memory present");
    let row = |item: usize, sub: usize| bank.items.row(bank.config.row_index(item, sub));
    write_csv(
        &out.join("pca_subprototypes.csv"),
        report.usage.iter().filter(|u| u.usage_count > 0).map(|u| {
            let [pc1, pc2] = pca.project(row(u.item, u.sub));
            ProtoPcaRow {
                item: u.item,
                sub: u.sub,
                usage_count: u.usage_count,
                pc1,
                pc2,
            }
        }),
    )?;

    let top_rows = report.top_used(top);
    let mut decoded: Vec<Vec<f64>> = Vec::with_capacity(top_rows.len());
    for u in &top_rows {
        decoded.push(view.decode(row(u.item, u.sub)));
    }
    let mut w = csv::Writer::from_path(out.join("decoded_top.csv"))?;
    let width = decoded.first().map_or(0, Vec::len);
    let mut header = vec![
        "item".to_owned(),
        "sub".to_owned(),
        "usage_count".to_owned(),
    ];
    header.extend((0..width).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (u, x) in top_rows.iter().zip(&decoded) {
        let mut rec = vec![
            u.item.to_string(),
            u.sub.to_string(),
            u.usage_count.to_string(),
        ];
        rec.extend(x.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let note = if ds.subcluster_ids.is_none() {
        Some("ARI undefined: dataset has no planted sub-cluster ids".to_owned())
    } else if report.mean_ari.is_none() {
        Some("ARI undefined: no class has more than one planted sub-cluster".to_owned())
    } else {
        None
    };
    write_json(
        &out.join("ari.json"),
        &AriReport {
            per_class: report.per_class_ari.clone(),
            mean: report.mean_ari,
            note: note.clone(),
        },
    )?;
    match (report.mean_ari, note) {
        (Some(a), _) => println!("mean within-class ARI {a:.4}"),
        (None, Some(n)) => println!("{n}"),
        (None, None) => {}
    }
    Ok(())
}

#[derive(Serialize)]
struct GroupResult {
    draw: u64,
    group: String,
    max_rel_error: f64,
    passed: bool,
}

fn cmd_gradcheck(
    config: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
    draws: u64,
    corrupt: Option<&str>,
) -> Result<bool> {
    let cfg: GradCheckConfig = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => GradCheckConfig::default(),
    };
    let mut rows = Vec::new();
    let mut ok = true;
    for d in 0..draws {
        let (report, resampled) = gradcheck(&cfg, seed + d, corrupt)?;
        if resampled > 0 {
            log::info!("draw {d}: {resampled} draws re-sampled near a kink");
        }
        for p in &report.params {
            let passed = p.max_rel_error <= cfg.tol;
            println!(
                "{} {:<10} max rel error {:.3e}",
                if passed { "ok  " } else { "FAIL" },
                p.name,
                p.max_rel_error
            );
            ok &= passed;
            rows.push(GroupResult {
                draw: seed + d,
                group: p.name.clone(),
                max_rel_error: p.max_rel_error,
                passed,
            });
        }
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &cfg)?;
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    if !ok {
        let failed: Vec<&str> = rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.group.as_str())
            .collect();
        eprintln!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(ok)
}

fn threads() -> Result<usize> {
    match std::env::var("MEMSPM_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("MEMSPM_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = threads().and_then(|n| {
        log::debug!("thread cap {n}; all work runs on the calling thread");
        match &cli.command {
            Command::Gen(c) => cmd_gen(c).map(|_| true),
            Command::Train { common, data } => cmd_train(common, data).map(|_| true),
            Command::Eval {
                common,
                data,
                checkpoint,
            } => cmd_eval(common, data, checkpoint).map(|_| true),
            Command::Inspect {
                common,
                checkpoint,
                data,
                top,
            } => cmd_inspect(common, checkpoint, data.as_deref(), *top).map(|_| true),
            Command::Gradcheck {
                config,
                seed,
                out,
                draws,
                corrupt,
            } => cmd_gradcheck(
                config.as_deref(),
                *seed,
                out.as_deref(),
                *draws,
                corrupt.as_deref(),
            ),
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
