use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybrid_sds::io::clip::{clip_score, Embedder, HashEmbedder};
use hybrid_sds::io::config::{parse_config, GUIDANCE_ENV};
use hybrid_sds::io::export::export_frames;
use hybrid_sds::io::session::{connect, Session, CHECKPOINT_NAME, FRAMES_DIR};
use hybrid_sds::io::wire::RemoteEmbedder;
use hybrid_sds::scheduler::LogRecord;
use hybrid_sds::Error;

#[derive(Parser)]
#[command(name = "hybrid-sds", version, about = "Text-to-4D generation by hybrid score distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all three stages from a configuration file.
    Generate {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Stop after this global iteration and checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Skip the final frame export.
        #[arg(long)]
        no_frames: bool,
    },
    /// Render frames from a checkpoint.
    Render {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Circle the object while time advances; otherwise a fixed view.
        #[arg(long)]
        orbit: bool,
        #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
        elevation: f32,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// CLIP score of an orbit rendering against a prompt.
    Eval {
        checkpoint: PathBuf,
        /// Defaults to the run's prompt.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
        elevation: f32,
        /// `tcp://host:port` of an embedding server, or `hash` for the
        /// offline stand-in. Defaults to the guidance environment variable
        /// when set.
        #[arg(long)]
        embedder: Option<String>,
    },
    /// Continue an interrupted run.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        stop_at: Option<u64>,
        #[arg(long)]
        no_frames: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::GuidanceUnavailable(_) | Error::Protocol { .. } => 3,
        Error::Io(_) | Error::Format(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> hybrid_sds::Result<()> {
    match command {
        Command::Generate {
            config,
            output,
            stop_at,
            no_frames,
        } => {
            let mut cfg = parse_config(&std::fs::read_to_string(&config)?)?;
            if let Some(dir) = output {
                cfg.output_dir = dir.to_string_lossy().into_owned();
            }
            let mut session = Session::new(cfg)?;
            let dir = session.output_dir();
            train(&mut session, &dir.join(CHECKPOINT_NAME), stop_at, no_frames)
        }
        Command::Resume {
            checkpoint,
            stop_at,
            no_frames,
        } => {
            let mut session = Session::load(&checkpoint)?;
            train(&mut session, &checkpoint, stop_at, no_frames)
        }
        Command::Render {
            checkpoint,
            frames,
            orbit,
            elevation,
            output,
        } => {
            let session = Session::load(&checkpoint)?;
            let mut eval = session.config.eval.clone();
            eval.frames = frames;
            eval.elevation = elevation;
            let video = session.render_orbit(&eval, orbit)?;
            let dir = output.unwrap_or_else(|| sibling(&checkpoint, FRAMES_DIR));
            let paths = export_frames(&video, &dir)?;
            println!("wrote {} frames to {}", paths.len() - 1, dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            prompt,
            frames,
            elevation,
            embedder,
        } => {
            let session = Session::load(&checkpoint)?;
            let prompt = prompt.unwrap_or_else(|| session.config.prompt.clone());
            let mut eval = session.config.eval.clone();
            eval.frames = frames;
            eval.elevation = elevation;
            let video = session.render_orbit(&eval, true)?;
            let choice = embedder.or_else(|| std::env::var(GUIDANCE_ENV).ok().filter(|v| !v.is_empty()));
            let mut embedder: Box<dyn Embedder> = match choice.as_deref() {
                None | Some("hash") => {
                    eprintln!("note: offline hash embedder, scores carry no semantics");
                    Box::new(HashEmbedder::default())
                }
                Some(addr) => Box::new(RemoteEmbedder::new(connect(addr.trim_start_matches("tcp://"))?)),
            };
            let images: Vec<_> = video.frames.into_iter().map(|f| f.rgb).collect();
            let score = clip_score(&images, &prompt, embedder.as_mut())?;
            println!("clip_score {score:.4}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn train(session: &mut Session, checkpoint: &Path, stop_at: Option<u64>, no_frames: bool) -> hybrid_sds::Result<()> {
    let dir = sibling(checkpoint, "");
    std::fs::create_dir_all(&dir)?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("log.jsonl"))?;
    let total = session.config.stages.total_iterations();
    let mut io_error = None;
    let mut on_step = |r: &LogRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
        if (r.iteration + 1).is_multiple_of(50) || r.iteration + 1 == total {
            eprintln!("iteration {}/{} stage {} {}", r.iteration + 1, total, r.stage, r.kind.as_str());
        }
    };
    let result = session.run_until(stop_at.unwrap_or(u64::MAX), Some(checkpoint), &mut on_step);
    // Save whatever was reached, also after a failed step.
    session.save(checkpoint)?;
    result?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    println!("checkpoint {} at iteration {}", checkpoint.display(), session.trainer.state.iteration);
    if session.trainer.finished() && !no_frames {
        let video = session.render_orbit(&session.config.eval, true)?;
        let frames = sibling(checkpoint, FRAMES_DIR);
        export_frames(&video, &frames)?;
        println!("frames {}", frames.display());
    }
    Ok(())
}
