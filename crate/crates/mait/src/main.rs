//! Command-line harness for the masked-attention laboratory.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 1 runtime error.

use clap::{Parser, Subcommand};
use mait::error::{Error, Result};
use mait::harness::bench::{bench_attention, BenchKernel};
use mait::harness::config::FileConfig;
use mait::harness::dataset::{gen_local_task, read_dataset, write_dataset, Dataset};
use mait::harness::metrics_csv;
use mait::maskgen::PatchGrid;
use mait::metrics::{cross_layer_similarity, reduction_report, AttnMethod, CostQuery};
use mait::model::{init_params, load_checkpoint, save_checkpoint, ModelConfig, OptimizerConfig};
use mait::search::{quick_search, SearchConfig};
use mait::train::{als_table, evaluate, probe_record, train_loop, TrainOptions};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mait", version, about = "Masked-attention transformer laboratory")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, init, and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic bright-motif dataset (MDAT file).
    GenData {
        /// Patch grid, e.g. 8x8.
        #[arg(long, default_value = "8x8")]
        grid: String,
        #[arg(long, default_value_t = 4)]
        patch_px: usize,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Train a model on an MDAT dataset; writes checkpoint and metrics CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Report accuracy of a checkpoint on an MDAT dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Attention locality scores per layer and head.
    Als {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Neighborhood side for the locality window.
        #[arg(long, default_value_t = 3)]
        r: usize,
        #[arg(long, default_value_t = 256)]
        probe: usize,
    },
    /// Cross-layer attention-map similarity matrix for one head.
    Similarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 256)]
        probe: usize,
    },
    /// ALS-guided mask placement search; writes scheme and trace JSON.
    SearchMasks {
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytical attention-map FLOPs and reduction ratios.
    Flops {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        r: u64,
        /// Window side for the windowed-attention row.
        #[arg(long, default_value_t = 7)]
        m_win: u64,
    },
    /// Wall-clock attention kernel benchmark; prints a JSON report.
    Bench {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        r: usize,
        /// standard | dense | sparse
        #[arg(long, default_value = "sparse")]
        kernel: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmups: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn parse_grid(text: &str) -> Result<PatchGrid> {
    let mut it = text.split('x');
    let bad = || Error::Config(format!("grid '{text}' is not of the form RxC"));
    let rows = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let cols = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if it.next().is_some() {
        return Err(bad());
    }
    PatchGrid::new(rows, cols)
}

fn require_config(cli: &Cli) -> Result<FileConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this subcommand requires --config".into()))?;
    FileConfig::from_path(path)
}

fn check_dataset(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let want = (
        config.grid.rows * config.patch_px,
        config.grid.cols * config.patch_px,
        config.channels,
    );
    let got = (data.height, data.width, data.channels);
    if want != got {
        return Err(Error::Config(format!(
            "dataset images are {got:?} but the model expects {want:?}"
        )));
    }
    Ok(())
}

fn train_options(cfg: &FileConfig, epochs: usize, train_len: usize, seed: u64) -> TrainOptions {
    let t = &cfg.train;
    let steps = epochs * train_len.div_ceil(t.batch);
    let mut opt = OptimizerConfig::with_batch(t.batch, steps.max(1));
    if let Some(lr) = t.lr {
        opt.lr = lr;
    }
    if let Some(wd) = t.weight_decay {
        opt.weight_decay = wd;
    }
    TrainOptions {
        epochs,
        batch: t.batch,
        seed,
        opt,
        als_r: t.als_r,
        probe_samples: t.probe_samples,
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn probe_slice(pairs: &[(mait::numerics::Tensor, usize)], probe: usize) -> Result<&[(mait::numerics::Tensor, usize)]> {
    if probe == 0 {
        return Err(Error::param("probe must be >= 1"));
    }
    Ok(&pairs[..probe.min(pairs.len())])
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData {
            grid,
            patch_px,
            samples,
        } => {
            let grid = parse_grid(grid)?;
            let data = gen_local_task(grid, *patch_px, *samples, cli.seed)?;
            let path = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("dataset.mdat"));
            write_dataset(&data, &path)?;
            let ones = data.labels.iter().filter(|&&l| l == 1).count();
            println!(
                "wrote {} samples ({}x{}x{}, {} positive) to {}",
                data.len(),
                data.height,
                data.width,
                data.channels,
                ones,
                path.display()
            );
        }
        Cmd::Train { data, epochs } => {
            let cfg = require_config(cli)?;
            let model = cfg.model_config()?;
            let dataset = read_dataset(data)?;
            check_dataset(&model, &dataset)?;
            let (train, val) = dataset.split(cfg.train.val_frac);
            let epochs = epochs.unwrap_or(cfg.train.epochs);
            let opts = train_options(&cfg, epochs, train.len(), cli.seed);
            let mut params = init_params(&model, cli.seed)?;
            let outcome = train_loop(&model, &mut params, &train, &val, &opts)?;
            let dir = out_dir(cli)?;
            save_checkpoint(&params, &model, &dir.join("checkpoint.mait"))?;
            std::fs::write(
                dir.join("metrics.csv"),
                metrics_csv(&outcome.stats, model.layers),
            )?;
            for s in &outcome.stats {
                println!(
                    "epoch {}: loss {:.4}, val accuracy {:.4}",
                    s.epoch, s.mean_loss, s.val_accuracy
                );
            }
            println!("wrote checkpoint.mait and metrics.csv to {}", dir.display());
        }
        Cmd::Eval { checkpoint, data } => {
            let (params, model) = load_checkpoint(checkpoint)?;
            let dataset = read_dataset(data)?;
            check_dataset(&model, &dataset)?;
            let acc = evaluate(&model, &params, &dataset.pairs())?;
            println!("accuracy {:.4} on {} samples", acc, dataset.len());
        }
        Cmd::Als {
            checkpoint,
            data,
            r,
            probe,
        } => {
            let (params, model) = load_checkpoint(checkpoint)?;
            let dataset = read_dataset(data)?;
            check_dataset(&model, &dataset)?;
            let pairs = dataset.pairs();
            let record = probe_record(&model, &params, probe_slice(&pairs, *probe)?)?;
            let table = als_table(&record, *r)?;
            let mut csv = String::from("layer,head,als\n");
            for (l, row) in table.iter().enumerate() {
                for (h, v) in row.iter().enumerate() {
                    csv.push_str(&format!("{l},{h},{v}\n"));
                    println!("layer {l} head {h}: als {v:.4}");
                }
            }
            if let Some(out) = &cli.out {
                std::fs::write(out, csv)?;
            }
        }
        Cmd::Similarity {
            checkpoint,
            data,
            head,
            probe,
        } => {
            let (params, model) = load_checkpoint(checkpoint)?;
            let dataset = read_dataset(data)?;
            check_dataset(&model, &dataset)?;
            let pairs = dataset.pairs();
            let record = probe_record(&model, &params, probe_slice(&pairs, *probe)?)?;
            let sim = cross_layer_similarity(&record, *head)?;
            let mut csv = String::from("layer_i,layer_j,similarity\n");
            for i in 0..sim.rows() {
                let row: Vec<String> = (0..sim.cols())
                    .map(|j| {
                        csv.push_str(&format!("{i},{j},{}\n", sim.at(i, j)));
                        format!("{:.4}", sim.at(i, j))
                    })
                    .collect();
                println!("{}", row.join(" "));
            }
            if let Some(out) = &cli.out {
                std::fs::write(out, csv)?;
            }
        }
        Cmd::SearchMasks { data } => {
            let cfg = require_config(cli)?;
            let model = cfg.model_config()?;
            let dataset = read_dataset(data)?;
            check_dataset(&model, &dataset)?;
            let (train, val) = dataset.split(cfg.train.val_frac);
            let search = SearchConfig {
                seed: cli.seed,
                ..cfg.search.clone()
            };
            let opts = train_options(&cfg, search.probe_epochs, train.len(), cli.seed);
            let trainer = |scheme: &mait::maskgen::MaskScheme| {
                let mut candidate = model.clone();
                candidate.scheme = scheme.clone();
                let mut params = init_params(&candidate, cli.seed)?;
                let outcome = train_loop(&candidate, &mut params, &train, &val, &opts)?;
                outcome
                    .record
                    .ok_or_else(|| Error::contract("trainer produced no attention record"))
            };
            let (scheme, trace) = quick_search(trainer, &search, model.layers, model.heads)?;
            let dir = out_dir(cli)?;
            std::fs::write(dir.join("scheme.json"), scheme.to_json())?;
            std::fs::write(dir.join("trace.json"), trace.to_json())?;
            println!(
                "search finished in {} trainer invocations, {} heads removed",
                trace.trainer_invocations,
                trace.removed.len()
            );
            println!("wrote scheme.json and trace.json to {}", dir.display());
        }
        Cmd::Flops { n, d, r, m_win } => {
            let q = CostQuery {
                n: *n,
                d: *d,
                r: *r,
                m_win: *m_win,
            };
            println!(
                "attention-map flops  mha: {}",
                mait::metrics::attn_map_flops(&q, AttnMethod::Mha)
            );
            println!(
                "attention-map flops w-mha (window {}): {}",
                m_win,
                mait::metrics::attn_map_flops(&q, AttnMethod::WMha)
            );
            println!(
                "attention-map flops m-mha (mask {}x{}): {}",
                r,
                r,
                mait::metrics::attn_map_flops(&q, AttnMethod::MMha)
            );
            let stage = &reduction_report(&[q])?[0];
            println!(
                "m-mha/mha map ratio: {:.3}% ({} / {})",
                100.0 * (1.0 - stage.attn_map_reduction),
                r * r,
                n
            );
            println!(
                "block reduction: attention map {:.3}%, full block {:.3}%",
                100.0 * stage.attn_map_reduction,
                100.0 * stage.block_reduction
            );
            println!("convention: {}", mait::metrics::FLOPS_CONVENTION);
        }
        Cmd::Bench {
            n,
            d,
            r,
            kernel,
            repeats,
            warmups,
            workers,
        } => {
            let kernel = BenchKernel::parse(kernel)?;
            let report =
                bench_attention(*n, *d, *r, kernel, *repeats, *warmups, *workers, cli.seed)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Serde(e.to_string()))?
            );
            if let Some(out) = &cli.out {
                let text = serde_json::to_string_pretty(&report)
                    .map_err(|e| Error::Serde(e.to_string()))?;
                std::fs::write(out, text)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) => 2,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
