use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qprune::arch::{builtin, desk_cnn};
use qprune::data::{synth_images, DataSplit, Dataset};
use qprune::engine::evaluate;
use qprune::format::{load_model, save_model};
use qprune::metrics::DistanceKind;
use qprune::pipeline::{prune_network, rank_layer, Direction, RankMode, RunConfig};
use qprune::surgery::{format_kilo, format_mib, NetworkDef};
use qprune::train::train;
use qprune::Error;

const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Parser)]
#[command(name = "qprune", version, about = "Prune quantized neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a quantized desk-scale network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with `train/` and `val/` image sets.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank, search ratios and prune layer by layer, then fine-tune.
    Prune {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        metric: Option<DistanceKind>,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        direction: Option<Direction>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-layer CSV report.
        #[arg(long)]
        report: PathBuf,
        /// Writes one BO trace CSV per pruned layer into this directory.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Emit the ranking of one layer as CSV.
    Rank {
        #[arg(long)]
        model: String,
        /// Layer index or name.
        #[arg(long)]
        layer: String,
        #[arg(long)]
        mode: RankMode,
        #[arg(long, default_value = "angle")]
        metric: DistanceKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 error and latency on the validation split.
    Eval {
        #[arg(long)]
        model: String,
        /// Image set directory, or a directory holding `val/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer parameter and size table.
    Account {
        #[arg(long)]
        model: String,
    },
    /// Write the procedural 10-class dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn open_model(spec: &str) -> qprune::Result<NetworkDef> {
    match spec.strip_prefix(BUILTIN_PREFIX) {
        Some(name) => builtin(name),
        None => load_model(Path::new(spec)),
    }
}

fn run_config(path: Option<&Path>) -> qprune::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn resolve_layer(net: &NetworkDef, id: &str) -> qprune::Result<usize> {
    if let Ok(i) = id.parse::<usize>() {
        if i < net.layers.len() {
            return Ok(i);
        }
        return Err(Error::Index {
            index: i,
            extent: net.layers.len(),
        });
    }
    net.layers
        .iter()
        .position(|l| l.name == id)
        .ok_or_else(|| Error::Config(format!("no layer named {id:?}")))
}

fn run(cmd: Command) -> qprune::Result<()> {
    let mut stdout = io::stdout().lock();
    match cmd {
        Command::Train { config, data, out } => {
            let cfg = run_config(config.as_deref())?;
            let split = DataSplit::load_dir(&data, &cfg.norm)?;
            let net = desk_cnn(&cfg.arch, cfg.prune.train.seed)?;
            let (net, history) = train(&net, &split.train, Some(&split.val), &cfg.prune.train)?;
            for e in &history.epochs {
                writeln!(
                    stdout,
                    "epoch {} lr {:.6} loss {:.4} train {:.2}% val {:.2}%",
                    e.epoch,
                    e.lr,
                    e.train_loss,
                    e.train_acc_pct,
                    e.val_acc_pct.unwrap_or(f64::NAN)
                )?;
            }
            save_model(&net, &out)?;
        }
        Command::Prune {
            model,
            data,
            config,
            metric,
            alpha1,
            direction,
            seed,
            out,
            report,
            trace_dir,
        } => {
            let mut cfg = run_config(config.as_deref())?;
            let p = &mut cfg.prune;
            p.metric = metric.unwrap_or(p.metric);
            p.bo.alpha1 = alpha1.unwrap_or(p.bo.alpha1);
            p.direction = direction.unwrap_or(p.direction);
            p.seed = seed.unwrap_or(p.seed);
            let net = open_model(&model)?;
            let split = DataSplit::load_dir(&data, &cfg.norm)?;
            let (pruned, rep) = match prune_network(&net, &split, &cfg.prune) {
                Ok(r) => r,
                Err(Error::Aborted {
                    layer,
                    source,
                    checkpoint,
                }) => {
                    save_model(&checkpoint, &out)?;
                    return Err(Error::Aborted {
                        layer,
                        source,
                        checkpoint,
                    });
                }
                Err(e) => return Err(e),
            };
            save_model(&pruned, &out)?;
            rep.write_csv(File::create(&report)?)?;
            if let Some(dir) = trace_dir {
                fs::create_dir_all(&dir)?;
                for s in &rep.steps {
                    s.trace.write_csv(File::create(dir.join(format!("{}.csv", s.name)))?)?;
                }
            }
            write!(stdout, "{}", rep.render())?;
        }
        Command::Rank {
            model,
            layer,
            mode,
            metric,
            out,
        } => {
            let net = open_model(&model)?;
            let layer = resolve_layer(&net, &layer)?;
            let r = rank_layer(&net, layer, mode, metric)?;
            match out {
                Some(path) => r.write_csv(File::create(path)?)?,
                None => r.write_csv(&mut stdout)?,
            }
        }
        Command::Eval {
            model,
            data,
            config,
            passes,
            seed,
        } => {
            let cfg = run_config(config.as_deref())?;
            let net = open_model(&model)?;
            let dir = if data.join("val").is_dir() {
                data.join("val")
            } else {
                data
            };
            let val = Dataset::load_dir(&dir, &cfg.norm)?;
            let r = evaluate(&net, &val, passes, seed)?;
            writeln!(stdout, "top1_error_pct {:.4}", r.top1_error_pct)?;
            writeln!(stdout, "loss {:.6}", r.loss)?;
            writeln!(
                stdout,
                "latency_median_ms {:.3} (mean {:.3}, {} passes)",
                r.latency.median_s * 1e3,
                r.latency.mean_s * 1e3,
                r.latency.passes
            )?;
        }
        Command::Account { model } => {
            let net = open_model(&model)?;
            let rep = net.account();
            writeln!(
                stdout,
                "{:<12} {:>8} {:>10} {:>9} {:>8}",
                "layer", "scheme", "params", "size_MiB", "ratio_%"
            )?;
            for row in rep.layers.iter().filter(|r| r.params > 0) {
                writeln!(
                    stdout,
                    "{:<12} {:>8} {:>10} {:>9} {:>8.2}",
                    row.name,
                    row.scheme,
                    format_kilo(row.params),
                    format_mib(row.size_mib()),
                    row.pruned_ratio_pct()
                )?;
            }
            writeln!(
                stdout,
                "total {} params, {} bits, {} MiB",
                rep.total_params(),
                rep.total_bits(),
                format_mib(rep.total_mib())
            )?;
        }
        Command::Synth { out, train, val, seed } => {
            synth_images(train, seed).write_dir(&out.join("train"))?;
            synth_images(val, seed.wrapping_add(1_000_000)).write_dir(&out.join("val"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
