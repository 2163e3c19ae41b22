use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bhivae::checkpoint::{load_checkpoint, save_checkpoint};
use bhivae::config::{parse_config, DatasetSource};
use bhivae::data::{generate_from_config, load_dataset, save_dataset, DataGenConfig, Dataset};
use bhivae::train::write_trace;
use bhivae::{Error, Result};

#[derive(Parser)]
#[command(name = "bhivae", about = "Blocked hierarchical VAE trainer and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config; writes checkpoint and loss trace.
    Train { config: PathBuf },
    /// Score a checkpoint on a dataset (directory or generator spec JSON).
    Eval { ckpt: PathBuf, dataset: PathBuf },
    /// Render a latent traversal grid for one sample as binary PGM.
    Traverse {
        ckpt: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a mini-dSprites dataset from a spec JSON.
    GenData {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dataset_from_source(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Dir(dir) => load_dataset(dir),
        DatasetSource::Generate(cfg) => generate_from_config(cfg),
    }
}

/// A dataset argument is either a saved dataset directory or a generator
/// spec JSON file.
fn dataset_from_arg(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        return load_dataset(path);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: DataGenConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    generate_from_config(&cfg)
}

fn run_train(config_path: &Path) -> Result<()> {
    let config = parse_config(config_path)?;
    let out_dir = config.out_dir.clone().unwrap_or_else(|| {
        let stem = config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        config_path.with_file_name(format!("{stem}-run"))
    });
    std::fs::create_dir_all(&out_dir)?;

    let dataset = dataset_from_source(&config.dataset)?;
    let out = bhivae::train::train(&config, &dataset)?;

    let ckpt_path = out_dir.join("checkpoint.bhiv");
    let trace_path = out_dir.join("trace.jsonl");
    save_checkpoint(&out.checkpoint, &ckpt_path)?;
    write_trace(&trace_path, &out.trace)?;

    if let Some(last) = out.trace.last() {
        println!("step {} total {:.6}", last.step, last.total);
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("trace: {}", trace_path.display());
    Ok(())
}

fn run_eval(ckpt_path: &Path, dataset_path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let dataset = dataset_from_arg(dataset_path)?;
    let report = bhivae::eval::evaluate(&ckpt, &dataset, &ckpt.run.metrics, ckpt.run.seed)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    use std::io::Write as _;
    if let Err(e) = writeln!(std::io::stdout(), "{json}") {
        // A closed pipe (e.g. `| head`) is not an error worth reporting.
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    Ok(())
}

fn run_traverse(ckpt_path: &Path, sample: usize, steps: usize, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let dataset = dataset_from_source(&ckpt.run.dataset)?;
    let image = bhivae::traversal::emit_traversal(&ckpt, &dataset, sample, steps, out)?;
    println!(
        "wrote {} ({}x{} px)",
        out.display(),
        image.width,
        image.height
    );
    Ok(())
}

fn run_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec_path.display())))?;
    let cfg: DataGenConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let dataset = generate_from_config(&cfg)?;
    save_dataset(&dataset, out)?;
    println!(
        "wrote {} samples at {}x{} to {}",
        dataset.len(),
        dataset.resolution(),
        dataset.resolution(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => run_train(config),
        Command::Eval { ckpt, dataset } => run_eval(ckpt, dataset),
        Command::Traverse {
            ckpt,
            sample,
            steps,
            out,
        } => run_traverse(ckpt, *sample, *steps, out),
        Command::GenData { spec, out } => run_gen_data(spec, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
