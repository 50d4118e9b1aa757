use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use icrep::checkpoint::load_checkpoint;
use icrep::config::{AblationFlags, MemTarget, RunConfig};
use icrep::corpus::{generate_synthetic, generator_self_check, ingest_folder, split, write_corpus, Corpus, MANIFEST_FILE};
use icrep::encoder::DualEncoderState;
use icrep::image::{load_image_any_size, patch_entropy, to_patch_grid};
use icrep::probe::{extract_embeddings, run_probe, write_embeddings, ProbeReport};
use icrep::train::{pretrain, PretrainOptions, TrainState, CHECKPOINT_FILE, METRICS_FILE};

const REPORT_FILE: &str = "report.json";
const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
const SWEEP_FILE: &str = "sweep.json";
const ENTROPY_MAP_FILE: &str = "entropy_map.json";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "icrep", version, about = "Self-supervised image-complexity representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (PNG files plus manifest.json).
    GenData(GenDataArgs),
    /// Pretrain the dual encoder; writes metrics.log and checkpoint.bin.
    Pretrain(PretrainArgs),
    /// Linear-probe a checkpoint (or an untrained encoder); writes report.json.
    Probe(ProbeArgs),
    /// Pretrain and probe once per mask ratio; writes sweep.json.
    SweepMask(SweepArgs),
    /// Per-patch Shannon entropy of one image; writes entropy_map.json.
    EntropyMap(EntropyMapArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelOverrides {
    /// Ablation preset a..f (SP / patch-wise loss / MEM on or off).
    #[arg(long)]
    ablation: Option<char>,
    /// Reconstruction target: entropy or pixels.
    #[arg(long = "mem_target", alias = "mem-target")]
    mem_target: Option<MemTarget>,
    #[arg(long = "mask_ratio", alias = "mask-ratio")]
    mask_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Directory holding manifest.json; otherwise the synthetic corpus is
    /// generated in memory from the configuration.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Number of images (defaults to generator.count).
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelOverrides,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many global steps (a checkpoint is written first).
    #[arg(long)]
    halt_after: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to probe; without it a freshly initialized encoder is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Also write embeddings.jsonl for every sample.
    #[arg(long = "export-embeddings")]
    export_embeddings: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelOverrides,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct EntropyMapArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 256)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, o: &ModelOverrides) -> Result<()> {
    if let Some(row) = o.ablation {
        let preset = AblationFlags::preset(row)?;
        cfg.ablation = AblationFlags { mem_target: cfg.ablation.mem_target, negatives: cfg.ablation.negatives, ..preset };
    }
    if let Some(t) = o.mem_target {
        cfg.ablation.mem_target = t;
    }
    if let Some(r) = o.mask_ratio {
        cfg.train.mask_ratio = r;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(c) = &o.corpus {
        cfg.train.corpus = Some(c.clone());
    }
    cfg.validate()?;
    Ok(())
}

fn load_corpus(cfg: &RunConfig, dir: Option<&Path>) -> Result<Corpus> {
    match dir.or(cfg.train.corpus.as_deref()) {
        Some(dir) => Ok(ingest_folder(dir, &dir.join(MANIFEST_FILE), cfg.encoder.image_size())?),
        None => Ok(generate_synthetic(cfg.generator.count, &cfg.generator, cfg.generator.seed)?.0),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.count {
        cfg.generator.count = n;
    }
    cfg.validate()?;
    let (corpus, manifest) = generate_synthetic(cfg.generator.count, &cfg.generator, cfg.generator.seed)?;
    let path = write_corpus(&args.common.out, &corpus, &manifest)?;
    for (class, rho) in generator_self_check(&corpus, cfg.train.entropy_bins).unwrap_or_default() {
        if rho < 0.9 {
            log::warn!("{class}: Spearman(score, entropy) = {rho:.3} is below 0.9");
        }
        println!("{class}: Spearman(score, entropy) = {rho:.4}");
    }
    println!("wrote {} images and {}", corpus.len(), path.display());
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_overrides(&mut cfg, &args.model)?;
    let corpus = load_corpus(&cfg, None)?;
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(args.common.out.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    let opts = PretrainOptions { out_dir: Some(args.common.out.clone()), resume: args.resume, halt_after: args.halt_after };
    let outcome = pretrain(&corpus, &cfg, &opts)?;
    if let Some(last) = outcome.log.last() {
        println!("step {} epoch {} total {:.6}", last.step, last.epoch, last.total);
    }
    println!(
        "wrote {} and {}",
        args.common.out.join(METRICS_FILE).display(),
        args.common.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ProbeDocument {
    untrained: bool,
    n_train: usize,
    n_test: usize,
    #[serde(flatten)]
    report: ProbeReport,
}

fn probe_model(cfg: &RunConfig, model: &DualEncoderState, corpus: &Corpus) -> Result<(ProbeReport, usize, usize)> {
    let parts = split(corpus, cfg.probe.split, cfg.probe.seed)?;
    if parts.train.is_empty() || parts.test.is_empty() {
        bail!("probe split left the train or test part empty ({} samples)", corpus.len());
    }
    let embeddings = extract_embeddings(corpus, model)?;
    let (_, report) = run_probe(&embeddings.subset(&parts.train), &embeddings.subset(&parts.test), &cfg.probe)?;
    Ok((report, parts.train.len(), parts.test.len()))
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let model = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            cfg.encoder = ckpt.config.encoder.clone();
            cfg.ablation = ckpt.config.ablation;
            cfg.validate()?;
            ckpt.model
        }
        None => TrainState::init(&cfg)?.model,
    };
    let corpus = load_corpus(&cfg, args.corpus.as_deref())?;
    std::fs::create_dir_all(&args.common.out)?;
    let (report, n_train, n_test) = probe_model(&cfg, &model, &corpus)?;
    println!("PCC {:.4}  SRCC {:.4}  per-class PCC variance {:.6}", report.pcc, report.srcc, report.pcc_variance);
    let doc = ProbeDocument { untrained: args.checkpoint.is_none(), n_train, n_test, report };
    write_json(&args.common.out.join(REPORT_FILE), &doc)?;
    if args.export_embeddings {
        let all = extract_embeddings(&corpus, &model)?;
        write_embeddings(&args.common.out.join(EMBEDDINGS_FILE), &all)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    mask_ratio: f64,
    pcc: f64,
    srcc: f64,
    final_l_rec: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_overrides(&mut cfg, &args.model)?;
    if args.ratios.is_empty() {
        bail!("no mask ratios given");
    }
    let corpus = load_corpus(&cfg, None)?;
    std::fs::create_dir_all(&args.common.out)?;
    let mut rows = Vec::new();
    println!("{:>6}  {:>8}  {:>8}", "ratio", "PCC", "SRCC");
    for &ratio in &args.ratios {
        let mut run = cfg.clone();
        run.train.mask_ratio = ratio;
        run.validate()?;
        let outcome = pretrain(&corpus, &run, &PretrainOptions::default())?;
        let (report, _, _) = probe_model(&run, &outcome.checkpoint.model, &corpus)?;
        println!("{ratio:>6.2}  {:>8.4}  {:>8.4}", report.pcc, report.srcc);
        rows.push(SweepRow {
            mask_ratio: ratio,
            pcc: report.pcc,
            srcc: report.srcc,
            final_l_rec: outcome.log.last().map_or(0.0, |r| r.l_rec),
        });
    }
    write_json(&args.common.out.join(SWEEP_FILE), &rows)
}

#[derive(Serialize)]
struct EntropyMap {
    patch_size: usize,
    bins: usize,
    rows: usize,
    cols: usize,
    bits: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
}

fn cmd_entropy_map(args: EntropyMapArgs) -> Result<()> {
    let img = load_image_any_size(&args.image)?;
    let grid = to_patch_grid(&img, args.patch_size)?;
    let (rows, cols) = (grid.grid_rows(), grid.grid_cols());
    let mut bits = vec![vec![0.0; cols]; rows];
    let mut normalized = vec![vec![0.0; cols]; rows];
    for (j, patch) in grid.patches().iter().enumerate() {
        let e = patch_entropy(patch.view(), args.bins)?;
        bits[j / cols][j % cols] = e.bits;
        normalized[j / cols][j % cols] = e.normalized;
    }
    for row in &bits {
        println!("{}", row.iter().map(|v| format!("{v:6.3}")).collect::<Vec<_>>().join(" "));
    }
    std::fs::create_dir_all(&args.out)?;
    write_json(
        &args.out.join(ENTROPY_MAP_FILE),
        &EntropyMap { patch_size: args.patch_size, bins: args.bins, rows, cols, bits, normalized },
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::SweepMask(a) => cmd_sweep(a),
        Command::EntropyMap(a) => cmd_entropy_map(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
