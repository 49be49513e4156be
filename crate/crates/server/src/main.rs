use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use obsimpact_core::eval::{aggregate_impacts, evaluate, fidelity_with_lrp, persistence, GroupKey, GroupingParams};
use obsimpact_core::lrp::{aggregate_contexts, lrp_explain, ExplanationExport, DEFAULT_EPSILON};
use obsimpact_core::model::{train_with_observer, Checkpoint};
use obsimpact_core::{forward, Dataset, DatasetConfig, ExplainTarget, NodeId, RegionName, Snapshot, TargetVariable, TrainConfig};
use obsimpact_server::{load_model, load_state, ServiceConfig};

#[derive(Parser)]
#[command(name = "obsimpact", version, about = "Observation impact analysis with graph networks and LRP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Train a model on a dataset and write a checkpoint.
    Train(Train),
    /// Run the HTTP service.
    Serve(Serve),
    /// Held-out metrics of a model next to the persistence baseline.
    Evaluate(ModelArgs),
    /// Explain one grid-node prediction.
    Explain(Explain),
    /// Grouped observation impacts.
    Impacts(Impacts),
    /// Occlusion fidelity on the held-out split.
    Fidelity(Fidelity),
}

#[derive(Args)]
struct GenData {
    /// Regions to include (repeatable); all four by default.
    #[arg(long = "region")]
    regions: Vec<String>,
    #[arg(long, default_value_t = 200)]
    snapshots: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// JSON file with training settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    /// JSON service config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the built UI bundle.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct Explain {
    #[command(flatten)]
    io: ModelArgs,
    #[arg(long)]
    region: String,
    #[arg(long)]
    time: u32,
    #[arg(long)]
    node: u64,
    #[arg(long, default_value = "ALL")]
    variable: String,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
}

#[derive(Args)]
struct Impacts {
    #[command(flatten)]
    io: ModelArgs,
    #[arg(long, default_value = "observation_type")]
    group_by: String,
    #[arg(long)]
    region: Option<String>,
    #[arg(long)]
    time_from: Option<u32>,
    #[arg(long)]
    time_to: Option<u32>,
    #[arg(long, default_value_t = 5)]
    time_window: u32,
    #[arg(long, default_value_t = 2.0)]
    grid_cell_deg: f64,
    /// Write CSV here instead of JSON to stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct Fidelity {
    #[command(flatten)]
    io: ModelArgs,
    #[arg(long)]
    region: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
}

fn parse_region(s: &str) -> anyhow::Result<RegionName> {
    s.parse().map_err(|_| anyhow::anyhow!("unknown region `{s}`"))
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_pair(io: &ModelArgs) -> anyhow::Result<(Dataset, obsimpact_server::LoadedModel)> {
    let ds = Dataset::load(&io.data).with_context(|| format!("loading dataset from {}", io.data.display()))?;
    Ok((ds, load_model(&io.model)?))
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut cfg = DatasetConfig {
        n_snapshots: a.snapshots,
        train_fraction: a.train_fraction,
        ..DatasetConfig::default().with_seed(a.seed)
    };
    if !a.regions.is_empty() {
        cfg.regions = a
            .regions
            .iter()
            .flat_map(|r| r.split(','))
            .map(parse_region)
            .collect::<anyhow::Result<_>>()?;
    }
    let ds = Dataset::build(&cfg)?;
    ds.save(&a.out)?;
    eprintln!("wrote {} snapshots to {}", ds.snapshots.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> anyhow::Result<()> {
    let ds = Dataset::load(&a.data).with_context(|| format!("loading dataset from {}", a.data.display()))?;
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<TrainConfig>(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(v) = a.epochs_pretrain {
        cfg.epochs_pretrain = v;
    }
    if let Some(v) = a.epochs_finetune {
        cfg.epochs_finetune = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.lambda_recon {
        cfg.lambda_recon = v;
    }
    let quiet = a.quiet;
    let (model, _) = train_with_observer(&cfg.init_model(), &ds, &cfg, |r| {
        if !quiet && (r.epoch % 10 == 0) {
            eprintln!(
                "epoch {:4} {:8} train {:.5} val {}",
                r.epoch,
                r.phase.as_str(),
                r.train_loss,
                r.val_loss.map_or("-".into(), |v| format!("{v:.5}"))
            );
        }
    })?;
    let ckpt = Checkpoint {
        model,
        train_config: Some(cfg),
        norm_stats: ds.norm_stats,
    };
    ckpt.save(&a.out)?;
    let clim = ds.climatology();
    if ds.test().next().is_some() {
        let m = evaluate(&ckpt.model, ds.test(), clim)?;
        let p = persistence(ds.test(), clim)?;
        eprintln!("held-out: rmse {:.4} mae {:.4} acc {:.4} (persistence rmse {:.4} acc {:.4})", m.rmse, m.mae, m.acc, p.rmse, p.acc);
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

async fn serve(a: Serve) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    };
    if a.data.is_some() {
        cfg.data_dir = a.data;
    }
    if a.model.is_some() {
        cfg.model_path = a.model;
    }
    if let Some(addr) = a.addr {
        cfg.addr = addr;
    }
    if a.ui.is_some() {
        cfg.ui_dir = a.ui;
    }
    let addr = cfg.socket_addr()?;
    let state = Arc::new(load_state(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    obsimpact_server::serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

fn explain(a: Explain) -> anyhow::Result<()> {
    let (ds, m) = load_pair(&a.io)?;
    let region = parse_region(&a.region)?;
    let s = ds.find(region, a.time).with_context(|| format!("no snapshot for {region} at t={}", a.time))?;
    let variable: TargetVariable = a.variable.parse()?;
    let cache = forward(&m.model, &s.graph)?;
    let rel = lrp_explain(&m.model, &s.graph, &cache, ExplainTarget { node_id: NodeId(a.node), variable }, a.epsilon)?;
    print_json(&ExplanationExport::from(&rel))
}

fn impacts(a: Impacts) -> anyhow::Result<()> {
    let (ds, m) = load_pair(&a.io)?;
    let key: GroupKey = a.group_by.parse()?;
    let region = a.region.as_deref().map(parse_region).transpose()?;
    let slice: Vec<&Snapshot> = ds
        .snapshots
        .iter()
        .filter(|s| a.time_from.is_none_or(|t| s.time_index >= t))
        .filter(|s| a.time_to.is_none_or(|t| s.time_index <= t))
        .filter(|s| region.is_none_or(|r| s.region.name == r))
        .collect();
    if slice.is_empty() {
        bail!("no snapshots in the requested window");
    }
    let impacts = aggregate_contexts(&m.model, slice.iter().map(|s| &s.graph), |_| true)?;
    let params = GroupingParams {
        time_window: a.time_window,
        grid_cell_deg: a.grid_cell_deg,
    };
    let table = aggregate_impacts(slice.iter().copied(), &impacts, key, params)?;
    match a.csv {
        Some(path) => {
            table.write_csv(std::fs::File::create(&path)?)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => print_json(&table),
    }
}

fn fidelity(a: Fidelity) -> anyhow::Result<()> {
    let (ds, m) = load_pair(&a.io)?;
    let region = a.region.as_deref().map(parse_region).transpose()?;
    let snaps: Vec<&Snapshot> = ds.test().filter(|s| region.is_none_or(|r| s.region.name == r)).collect();
    let (report, _) = fidelity_with_lrp(&m.model, &snaps, ds.climatology(), a.fraction, DEFAULT_EPSILON)?;
    print_json(&report)
}

fn evaluate_cmd(a: ModelArgs) -> anyhow::Result<()> {
    let (ds, m) = load_pair(&a)?;
    let clim = ds.climatology();
    let model = evaluate(&m.model, ds.test(), clim)?;
    let baseline = persistence(ds.test(), clim)?;
    print_json(&serde_json::json!({ "model": model, "persistence": baseline }))
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(serve(a)),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Explain(a) => explain(a),
        Command::Impacts(a) => impacts(a),
        Command::Fidelity(a) => fidelity(a),
    }
}
