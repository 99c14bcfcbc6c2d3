use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Saliency-guided sparse attention for contrastive pretraining.
#[derive(Debug, Parser)]
#[command(name = "sparsecontrast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (SCDS).
    GenData {
        /// `key = value` generator spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining; writes a checkpoint, metrics CSV and attention cache.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning with the saliency predictor frozen.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and AUC on the images not used for fine-tuning.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Dense vs sparse attention cost and wall-clock report.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// e.g. `L=16,64,256;rho=0.1,0.3;d=64` (K= may replace rho=).
        #[arg(long)]
        sweep: Option<String>,
        /// Timed calls per path; 0 skips timing.
        #[arg(long, default_value_t = 30)]
        trials: usize,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: sparsecontrast::gradsuite::SuiteModule,
    },
    /// Dump one image's saliency heatmap and selected set.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image: usize,
        /// Output prefix: `<out>.pgm`, `<out>.set.txt`, `<out>.rows.txt`.
        #[arg(long)]
        out: PathBuf,
        /// Also write the first block's attention row sums.
        #[arg(long)]
        row_sums: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Pretrain { config, data, out } => commands::pretrain(&config, &data, &out),
        Command::Finetune {
            config,
            data,
            ckpt,
            cache,
            out,
        } => commands::finetune(&config, &data, &ckpt, cache.as_deref(), &out),
        Command::Eval {
            config,
            data,
            ckpt,
            cache,
        } => commands::eval(&config, &data, &ckpt, cache.as_deref()),
        Command::Bench {
            config,
            sweep,
            trials,
            csv,
        } => commands::bench(&config, sweep.as_deref(), trials, csv.as_deref()),
        Command::Gradcheck { module } => commands::gradcheck(module),
        Command::Inspect {
            ckpt,
            data,
            image,
            out,
            row_sums,
        } => commands::inspect(&ckpt, &data, image, &out, row_sums),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
