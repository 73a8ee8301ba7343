use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use riskcam::attrib::MethodKind;
use riskcam_cli::{
    cmd_evaluate, cmd_explain, cmd_gen_data, cmd_train, cmd_tstudy, init_threads, parse_methods, DataSource,
    EvaluateArgs, ExplainArgs, GenDataArgs, TStudyArgs, TrainArgs,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "riskcam", version, about = "Saliency maps with Monte-Carlo dropout risk maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic-shapes data, train the default CNN, write weights and a JSON report
    Train {
        #[arg(long, default_value = "weights.rcam")]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report path (default: <out>.report.json)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic-shapes dataset as PNGs plus labels.csv
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 2)]
        seed: u64,
    },
    /// Baseline map, enhanced map, risk map and overlay for one image
    Explain {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "grad-cam", value_parser = parse_method)]
        method: MethodKind,
        #[arg(long = "T", alias = "passes", default_value_t = 10)]
        passes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        layer: Option<usize>,
        /// Run the Monte-Carlo passes with dropout switched off
        #[arg(long)]
        no_dropout: bool,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
        #[arg(long, default_value = "explain")]
        out: PathBuf,
    },
    /// ADCC and latency of every method, single pass and Monte-Carlo
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// "all" or a comma-separated list
        #[arg(long, default_value = "all", value_parser = parse_method_list)]
        methods: MethodList,
        #[arg(long = "T", alias = "passes", default_value_t = 10)]
        passes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long)]
        layer: Option<usize>,
        /// Images timed per configuration (0 disables timing)
        #[arg(long, default_value_t = 5)]
        timing_images: usize,
        /// .csv or .json
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Mean ADCC and latency as a function of T
    Tstudy {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "grad-cam", value_parser = parse_method)]
        method: MethodKind,
        #[arg(long = "Ts", value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10,20")]
        ts: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 5)]
        timing_images: usize,
        #[arg(long, default_value = "tstudy.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory; when absent a synthetic split is generated
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seed of the generated split
    #[arg(long, default_value_t = 1001)]
    data_seed: u64,
    /// Images per class of the generated split
    #[arg(long, default_value_t = 20)]
    data_per_class: usize,
}

impl DataArgs {
    fn source(self) -> DataSource {
        match self.dataset {
            Some(dir) => DataSource::Directory(dir),
            None => DataSource::Generated {
                seed: self.data_seed,
                per_class: self.data_per_class,
            },
        }
    }
}

#[derive(Clone)]
struct MethodList(Vec<MethodKind>);

fn parse_method_list(s: &str) -> Result<MethodList, String> {
    parse_methods(s).map(MethodList)
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    s.parse().map_err(|e: riskcam::Error| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Train {
            out,
            classes,
            size,
            per_class,
            epochs,
            lr,
            seed,
            report,
        } => {
            let s = cmd_train(&TrainArgs {
                out,
                classes,
                size,
                per_class,
                epochs,
                lr,
                seed,
                report,
            })?;
            println!(
                "wrote {} (train accuracy {:.3}, held-out accuracy {:.3})",
                s.weights.display(),
                s.train_accuracy,
                s.heldout_accuracy
            );
        }
        Command::GenData {
            out,
            classes,
            size,
            per_class,
            seed,
        } => {
            let data = cmd_gen_data(&GenDataArgs {
                out: out.clone(),
                classes,
                size,
                per_class,
                seed,
            })?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
        Command::Explain {
            weights,
            image,
            method,
            passes,
            seed,
            layer,
            no_dropout,
            alpha,
            out,
        } => {
            let r = cmd_explain(&ExplainArgs {
                weights,
                image,
                method,
                passes,
                seed,
                out: out.clone(),
                layer,
                no_dropout,
                alpha,
            })?;
            println!(
                "{method}: class {}, undefined CV fraction {:.3}; wrote {}",
                r.enhanced_class,
                r.undefined_fraction,
                out.display()
            );
        }
        Command::Evaluate {
            weights,
            data,
            methods,
            passes,
            seed,
            limit,
            layer,
            timing_images,
            out,
        } => {
            let rows = cmd_evaluate(&EvaluateArgs {
                weights,
                data: data.source(),
                methods: methods.0,
                passes,
                seed,
                limit,
                layer,
                timing_images,
                out: out.clone(),
            })?;
            for r in &rows {
                println!(
                    "{:<16} {:<8} ADCC {:5.1}",
                    r.method.to_string(),
                    if r.mc { "proposed" } else { "original" },
                    r.adcc * 100.0
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Tstudy {
            weights,
            data,
            method,
            ts,
            seed,
            limit,
            layer,
            timing_images,
            out,
        } => {
            let study = cmd_tstudy(&TStudyArgs {
                weights,
                data: data.source(),
                method,
                ts,
                seed,
                limit,
                layer,
                timing_images,
                out: out.clone(),
            })?;
            match study.spearman {
                Some(r) => println!("Spearman(T, ADCC) = {r:.3}"),
                None => println!("Spearman(T, ADCC) undefined"),
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
