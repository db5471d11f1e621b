use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lyricmuse_core::pipeline::{self, GenerateOptions, RunConfig, RunLayout};
use lyricmuse_service::{ModelBundle, ServiceConfig, DATA_DIR_ENV, DEFAULT_MAX_UPLOAD_BYTES};

#[derive(Debug, Parser)]
#[command(name = "lyricmuse", version, about = "Audio-conditioned lyric line generation")]
struct Cli {
    /// JSON run configuration; defaults are used for absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    /// Config override `dotted.key=value` (value parsed as JSON, else string).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; each stage writes to its own subdirectory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Compact,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the two-class dataset plus the alternating test song.
    SynthData,
    /// Segment, compute spectrograms, align lines and build the vocabulary.
    Preprocess {
        /// Dataset directory (with dataset.json); defaults to <out>/data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the spectrogram VAE and embed every clip.
    TrainSpecVae,
    /// Train the conditioned text VAE on aligned lines.
    TrainTextVae {
        /// Spectrogram VAE stage directory or its checkpoint directory.
        #[arg(long)]
        spec_checkpoint: Option<PathBuf>,
    },
    /// Generate lines for test clips (or the given clips).
    Generate {
        #[arg(long = "clip")]
        clips: Vec<String>,
        #[arg(long = "n")]
        n_lines: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Retrieval table, RBO matrix, timelines and peak-dB t-test.
    Evaluate,
    /// Every stage in order.
    RunAll,
    /// Print the resolved configuration as JSON.
    ShowConfig,
    /// HTTP API over the run's trained models.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Run directory holding the checkpoints; defaults to --out.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, env = DATA_DIR_ENV, default_value = "lyricmuse-data")]
        data_dir: PathBuf,
        #[arg(long)]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD_BYTES)]
        max_upload_bytes: usize,
    },
}

type BoxError = Box<dyn std::error::Error>;

fn load_config(cli: &Cli) -> Result<RunConfig, BoxError> {
    if cli.config.is_some() {
        return Ok(RunConfig::load(cli.config.as_deref(), &cli.overrides)?);
    }
    let base = match cli.preset {
        Preset::Default => RunConfig::default(),
        Preset::Compact => RunConfig::compact(),
    };
    Ok(RunConfig::from_json(Some(&serde_json::to_string(&base)?), &cli.overrides)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("lyricmuse: error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), BoxError> {
    let cfg = load_config(&cli)?;
    let layout = RunLayout::new(&cli.out);
    match cli.command {
        Command::SynthData => {
            let dataset = pipeline::synth_data(&cfg, &layout.data())?;
            println!("wrote {} songs to {}", dataset.songs.len(), layout.data().display());
        }
        Command::Preprocess { data } => {
            let data = data.unwrap_or_else(|| layout.data());
            pipeline::preprocess(&cfg, &data, &layout.preprocess())?;
            let clips = pipeline::load_clips(&layout.preprocess())?;
            println!("preprocessed {} clips into {}", clips.len(), layout.preprocess().display());
        }
        Command::TrainSpecVae => {
            let metrics = pipeline::train_spec_vae_stage(&cfg, &layout.preprocess(), &layout.spec_vae())?;
            if let Some(m) = metrics.last() {
                println!("spectrogram VAE epoch {}: recon {:.5} kl {:.4}", m.epoch, m.recon, m.kl);
            }
        }
        Command::TrainTextVae { spec_checkpoint } => {
            let metrics = pipeline::train_text_vae_stage(
                &cfg,
                &layout.preprocess(),
                spec_checkpoint.as_deref(),
                &layout.text_vae(),
            )?;
            if let Some(m) = metrics.last() {
                print!("text VAE epoch {}: recon {:.4} kl {:.4}", m.epoch, m.recon, m.kl);
                match m.val_recon {
                    Some(v) => println!(" val recon {v:.4}"),
                    None => println!(),
                }
                if m.collapse_warning {
                    eprintln!("warning: KL term near zero, the posterior may have collapsed");
                }
            }
        }
        Command::Generate { clips, n_lines, seed, temperature } => {
            let opts = GenerateOptions {
                clips: (!clips.is_empty()).then_some(clips),
                n_lines,
                temperature,
                seed,
            };
            let out = pipeline::generate(
                &cfg,
                &layout.preprocess(),
                &layout.spec_vae(),
                &layout.text_vae(),
                &layout.generate(),
                &opts,
            )?;
            let lines: usize = out.values().map(Vec::len).sum();
            println!("generated {lines} lines for {} clips into {}", out.len(), layout.generate().display());
        }
        Command::Evaluate => {
            let summary = evaluate(&cfg, &layout)?;
            print_summary(&summary);
        }
        Command::ShowConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Command::RunAll => {
            let summary = pipeline::run_all(&cfg, &layout)?;
            print_summary(&summary);
        }
        Command::Serve { port, host, models, data_dir, static_dir, max_upload_bytes } => {
            let models_dir = models.unwrap_or_else(|| layout.root.clone());
            let bundle = ModelBundle::load(&models_dir, None)?;
            let config = ServiceConfig { data_dir, static_dir, max_upload_bytes };
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            tokio::runtime::Runtime::new()?.block_on(lyricmuse_service::serve(&config, Some(bundle), addr))?;
        }
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, layout: &RunLayout) -> Result<pipeline::EvaluationSummary, BoxError> {
    require_dir(&layout.generate(), "generate")?;
    Ok(pipeline::evaluate(
        cfg,
        &layout.preprocess(),
        &layout.spec_vae(),
        &layout.generate(),
        &layout.evaluate(),
    )?)
}

fn require_dir(dir: &Path, stage: &str) -> Result<(), BoxError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(format!("{} does not exist; run `lyricmuse {stage}` first", dir.display()).into())
    }
}

fn print_summary(s: &pipeline::EvaluationSummary) {
    for r in &s.retrieval {
        println!(
            "top-{:<4} song {:.3}  album {:.3}  artist {:.3}  ({} queries, {} hierarchy violations)",
            r.n, r.mean.same_song, r.mean.same_album, r.mean.same_artist, r.queries, r.hierarchy_violations
        );
    }
    if let (Some(w), Some(c)) = (s.rbo_within, s.rbo_cross) {
        println!("rbo within-class {w:.3}  cross-class {c:.3}");
    }
    for t in &s.timelines {
        match t.sign_accuracy {
            Some(a) => println!("timeline {}: {} clips, sign accuracy {a:.2}", t.song_id, t.clips),
            None => println!("timeline {}: {} clips", t.song_id, t.clips),
        }
    }
    if let Some(t) = &s.peak_db_ttest {
        println!("peak dB welch t {:.2} (df {:.1}), p = {:.3e}", t.t, t.df, t.p_value);
    }
}
