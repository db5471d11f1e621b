use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use lyricmuse_service::{serve, ModelBundle, ServiceConfig, DATA_DIR_ENV, DEFAULT_MAX_UPLOAD_BYTES};

#[derive(Debug, Parser)]
#[command(name = "lyricmuse-service", about = "HTTP API for clip intake and lyric line generation")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Pipeline run directory holding spec_vae/ and text_vae/ checkpoints.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long, env = DATA_DIR_ENV, default_value = "lyricmuse-data")]
    data_dir: PathBuf,
    /// Built workbench assets served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_UPLOAD_BYTES)]
    max_upload_bytes: usize,
    /// Overrides the clip length recorded with the checkpoints.
    #[arg(long)]
    clip_length: Option<f64>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    if let Err(e) = run(args).await {
        eprintln!("lyricmuse-service: {e}");
        std::process::exit(1);
    }
}

async fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let models = match &args.models {
        Some(dir) => Some(ModelBundle::load(dir, args.clip_length)?),
        None => {
            eprintln!("no --models given; serving in degraded mode");
            None
        }
    };
    let config = ServiceConfig {
        data_dir: args.data_dir,
        static_dir: args.static_dir,
        max_upload_bytes: args.max_upload_bytes,
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse()?;
    serve(&config, models, addr).await?;
    Ok(())
}
