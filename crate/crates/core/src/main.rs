use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use waveunetd::disc::{WaveUNet, WaveUNetConfig};
use waveunetd::ensemble::{Ensemble, EnsembleConfig};
use waveunetd::generator::{Generator, GeneratorConfig};
use waveunetd::gradcheck;
use waveunetd::signal::{load_wav, log_mel, synth_corpus, write_wav, AudioClip, SAMPLE_RATE};
use waveunetd::train::config::parse_json;
use waveunetd::train::metrics::deterministic_from_env;
use waveunetd::train::{benchmark_disc, Checkpoint, TrainConfig, Trainer};
use waveunetd::{Error, Result};

#[derive(Parser)]
#[command(name = "waveunetd", version, about = "Wave-U-Net discriminator toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// batch 4 on short segments, sized for one CPU core
    Desk,
    /// batch 16, segment 8192
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Waveunet,
    Ensemble,
    Generator,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator against the Wave-U-Net discriminator.
    Train {
        /// JSON config; missing keys take the preset's values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Output directory for metrics.jsonl, config.json and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Override the number of steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Time discriminator forwards and compare the two models.
    Bench {
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 8192)]
        segment: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the results as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Count trainable parameters.
    Params {
        #[arg(long, value_enum, default_value = "waveunet")]
        model: Model,
        /// JSON model config; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the float64 finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Vocode a WAV file through the generator of a training checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the synthetic corpus as 16-bit WAV files.
    MakeCorpus {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_json(&text)
}

fn train(
    config: Option<PathBuf>,
    preset: Preset,
    out: PathBuf,
    resume: Option<PathBuf>,
    steps: Option<u64>,
) -> Result<()> {
    let mut trainer = if let Some(path) = resume {
        Trainer::from_checkpoint(&Checkpoint::load(path)?)?
    } else {
        let base = match preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Full => TrainConfig::default(),
        };
        let cfg = match config {
            Some(path) => {
                // overlay the file on the preset
                let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
                let patch: serde_json::Value = serde_json::from_str(&text)?;
                let mut merged = serde_json::to_value(&base)?;
                merge(&mut merged, patch);
                TrainConfig::from_json(&merged.to_string())?
            }
            None => base,
        };
        Trainer::new(cfg)?
    };
    if let Some(s) = steps {
        trainer.config.steps = s;
    }
    let summary = trainer.run(Some(&out), deterministic_from_env())?;
    println!("{}", serde_json::to_string(&summary)?);
    if let Some(step) = summary.saturation_tripped_at {
        eprintln!("warning: saturation monitor tripped at step {step}");
    }
    Ok(())
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn bench(batch: usize, segment: usize, warmup: usize, iters: usize, seed: u64, json: bool) -> Result<()> {
    let w = WaveUNet::<f32>::new(WaveUNetConfig::default(), seed)?;
    let e = Ensemble::<f32>::new(EnsembleConfig::default(), seed)?;
    let rw = benchmark_disc(&w, batch, segment, warmup, iters, seed)?;
    let re = benchmark_disc(&e, batch, segment, warmup, iters, seed)?;
    let param_ratio = re.params as f64 / rw.params as f64;
    let time_ratio = re.median / rw.median;
    if json {
        let v = serde_json::json!({
            "waveunet": rw,
            "ensemble": re,
            "param_ratio": param_ratio,
            "time_ratio": time_ratio,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("batch {batch} x {segment} samples, real + fake forward, 1 thread, median of {iters}");
        println!("waveunet  params {:>10}  time {:.4} s", rw.params, rw.median);
        println!("ensemble  params {:>10}  time {:.4} s", re.params, re.median);
        println!("param ratio {param_ratio:.2}");
        println!("time ratio  {time_ratio:.2}");
    }
    Ok(())
}

fn params(model: Model, config: Option<PathBuf>) -> Result<()> {
    let n = match model {
        Model::Waveunet => {
            let cfg = config.map(|p| read_config(&p)).transpose()?.unwrap_or_default();
            WaveUNet::<f32>::new(cfg, 0)?.param_count()
        }
        Model::Ensemble => {
            let cfg: EnsembleConfig = config.map(|p| read_config(&p)).transpose()?.unwrap_or_default();
            cfg.validate()?;
            cfg.param_count()
        }
        Model::Generator => {
            let cfg: GeneratorConfig = config.map(|p| read_config(&p)).transpose()?.unwrap_or_default();
            Generator::<f32>::new(cfg, 0)?.param_count()
        }
    };
    println!("{n}");
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    let report = gradcheck::run_suite(seed)?;
    for r in &report.results {
        println!("{:<24} {:>5} entries  max rel err {:.3e}", r.name, r.entries, r.max_rel_err);
    }
    println!(
        "max rel err {:.3e} (tolerance {:.0e})",
        report.max_rel_err(),
        gradcheck::TOLERANCE
    );
    Ok(report.passed())
}

fn synth(checkpoint: PathBuf, input: PathBuf, output: PathBuf) -> Result<()> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    if ckpt.header.kind != "train" {
        return Err(Error::Checkpoint(format!(
            "{} is a {:?} checkpoint; synth needs a training checkpoint",
            checkpoint.display(),
            ckpt.header.kind
        )));
    }
    let cfg: TrainConfig = serde_json::from_value(ckpt.header.config.clone())?;
    let mut gen = Generator::<f32>::new(cfg.generator.clone(), 0)?;
    gen.params_mut().load(ckpt.with_prefix("generator/"))?;
    let clip = load_wav(&input)?;
    let mel = log_mel(&clip.samples, &cfg.mel)?;
    let mut wave = gen.generate(&mel.to_tensor())?.into_vec();
    wave.truncate(clip.len());
    write_wav(&output, &AudioClip::new(wave, SAMPLE_RATE))
}

fn make_corpus(seed: u64, n: usize, out: PathBuf) -> Result<()> {
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    for (i, clip) in synth_corpus(n, seed).iter().enumerate() {
        let path = out.join(format!("clip_{i:03}.wav"));
        write_wav(&path, clip)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            preset,
            out,
            resume,
            steps,
        } => train(config, preset, out, resume, steps),
        Command::Bench {
            batch,
            segment,
            warmup,
            iters,
            seed,
            json,
        } => bench(batch, segment, warmup, iters, seed, json),
        Command::Params { model, config } => params(model, config),
        Command::Gradcheck { seed } => match run_gradcheck(seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Synth {
            checkpoint,
            input,
            output,
        } => synth(checkpoint, input, output),
        Command::MakeCorpus { seed, n, out } => make_corpus(seed, n, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
