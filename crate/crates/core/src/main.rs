use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gcnface::gcn::{read_checkpoint_file, write_checkpoint_file};
use gcnface::morphable::write_model_file;
use gcnface::pipeline::{
    checkpoint_params, evaluate, gradcheck_suite, infer, read_dataset_file, render_plain, synth_dataset, train,
    write_dataset_file, RunConfig, Sample, Setup, StepLog, TrainData, TrainState,
};
use gcnface::render::{write_mask_png, write_png, Shading};
use gcnface::{Error, Result};

#[derive(Parser)]
#[command(name = "gcnface", version, about = "Coarse-to-fine face texture reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset written by `synth`; regenerated from the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic model, dataset and preview images.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the refinement networks; writes checkpoint.ckpt and train_log.tsv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured number of steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruct one sample: OBJ meshes, renders and the projection mask.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Score coarse and refined renders of every sample; writes eval.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render one sample's ground truth and coarse reconstruction.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn dataset(setup: &Setup, data: &DataArg) -> Result<Vec<Sample>> {
    match &data.data {
        Some(p) => read_dataset_file(p),
        None => synth_dataset(setup, setup.config.data.count),
    }
}

fn pick(samples: &[Sample], i: usize) -> Result<&Sample> {
    samples
        .get(i)
        .ok_or_else(|| Error::Config(format!("sample {i} out of range (dataset has {})", samples.len())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_config(&common)?;
            let setup = Setup::new(cfg)?;
            let dir = out_dir(&setup.config)?;
            let samples = synth_dataset(&setup, setup.config.data.count)?;
            write_model_file(&setup.model, &dir.join("model.bin"))?;
            write_dataset_file(&samples, &dir.join("dataset.bin"))?;
            std::fs::write(dir.join("config.toml"), setup.config.to_toml())?;
            let size = setup.image_size();
            for (i, s) in samples.iter().enumerate() {
                write_png(&dir.join(format!("sample{i:05}.png")), &s.image, size, size)?;
                write_mask_png(&dir.join(format!("sample{i:05}_mask.png")), &s.face_mask, size, size)?;
            }
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Train {
            common,
            data,
            resume,
            steps,
        } => {
            let cfg = load_config(&common)?;
            let setup = Setup::new(cfg)?;
            let dir = out_dir(&setup.config)?.to_path_buf();
            let data = TrainData::new(&setup, dataset(&setup, &data)?)?;
            let mut state = match &resume {
                Some(p) => TrainState::from_checkpoint(&setup, &read_checkpoint_file(p)?)?,
                None => TrainState::new(&setup),
            };
            let steps = steps.unwrap_or(setup.config.train.steps);
            let log_path = dir.join("train_log.tsv");
            let mut log = if resume.is_some() && log_path.exists() {
                BufWriter::new(File::options().append(true).open(&log_path)?)
            } else {
                let mut f = BufWriter::new(File::create(&log_path)?);
                writeln!(f, "{}", StepLog::HEADER)?;
                f
            };
            let mut io_err = None;
            train(&setup, &data, &mut state, steps, Some(&dir), |entry, _| {
                if let Err(e) = writeln!(log, "{}", entry.to_tsv()).and_then(|_| log.flush()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            std::fs::write(dir.join("config.toml"), setup.config.to_toml())?;
            let ckpt = dir.join("checkpoint.ckpt");
            write_checkpoint_file(&state.to_checkpoint(&setup), &ckpt)?;
            println!("trained to step {}; checkpoint {}", state.step, ckpt.display());
        }
        Command::Infer {
            common,
            data,
            checkpoint,
            sample,
        } => {
            let cfg = load_config(&common)?;
            let setup = Setup::new(cfg)?;
            let params = checkpoint_params(&setup, &read_checkpoint_file(&checkpoint)?)?;
            let samples = dataset(&setup, &data)?;
            let out = infer(&setup, &params, pick(&samples, sample)?)?;
            let dir = out_dir(&setup.config)?.join(format!("sample{sample:05}"));
            for p in out.write(&setup, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let setup = Setup::new(cfg)?;
            let params = checkpoint_params(&setup, &read_checkpoint_file(&checkpoint)?)?;
            let data = TrainData::new(&setup, dataset(&setup, &data)?)?;
            let text = evaluate(&setup, &params, &data)?.to_text();
            std::fs::write(out_dir(&setup.config)?.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::Render { common, data, sample } => {
            let cfg = load_config(&common)?;
            let setup = Setup::new(cfg)?;
            let samples = dataset(&setup, &data)?;
            let s = pick(&samples, sample)?;
            let c = &s.coeffs;
            let shape = setup.model.shape_from_coeffs(&c.identity, &c.expression)?;
            let coarse = setup.model.texture_from_coeffs(&c.texture)?;
            let dir = out_dir(&setup.config)?;
            let size = setup.image_size();
            let (lit, mask) = render_plain(&setup, &shape, &coarse, c, Shading::Lit)?;
            let (flat, _) = render_plain(&setup, &shape, &coarse, c, Shading::AlbedoOnly)?;
            let outputs = [
                (format!("render{sample:05}_input.png"), &s.image),
                (format!("render{sample:05}_coarse.png"), &lit),
                (format!("render{sample:05}_coarse_albedo.png"), &flat),
            ];
            for (name, img) in outputs {
                write_png(&dir.join(&name), img, size, size)?;
                println!("{}", dir.join(name).display());
            }
            let m = dir.join(format!("render{sample:05}_mask.png"));
            write_mask_png(&m, &mask, size, size)?;
            println!("{}", m.display());
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            print!("{}", gradcheck_suite(cfg.seed, None)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"");
            eprintln!("error: kind={} message=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
