use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use refseg::checkpoint::{self, Checkpoint, CheckpointError};
use refseg::config::{Config, ConfigError};
use refseg::data::{self, FormatError, Modality};
use refseg::eval;
use refseg::mask::Mask;
use refseg::model::{self, ExpressionInput, Model};
use refseg::training::{self, ModalityMode, TrainMode};

/// Exit codes.
const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;

#[derive(Parser)]
#[command(name = "refseg", version, about = "Referring video object segmentation from text and audio expressions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train on the non-held-out clips and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Mix)]
        mode: ModeArg,
        /// JSON-lines training log (default: stderr every 100 steps).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out clips.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = ModalityArg::Both)]
        modality: ModalityArg,
        #[arg(long)]
        report: PathBuf,
        /// Evaluate every clip instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Segment one clip with one expression and write the mask as PGM.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: usize,
        /// Index into the clip's expression list.
        #[arg(long)]
        expr_id: usize,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Text,
    Audio,
    Mix,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Text,
    Audio,
    Both,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Text => TrainMode::Text,
            ModeArg::Audio => TrainMode::Audio,
            ModeArg::Mix => TrainMode::Mix,
        }
    }
}

impl From<ModalityArg> for ModalityMode {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => ModalityMode::TextOnly,
            ModalityArg::Audio => ModalityMode::AudioOnly,
            ModalityArg::Both => ModalityMode::Both,
        }
    }
}

/// Marks errors caused by bad arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn read_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(Config::parse_str(&text)?)
        }
    }
}

fn load_dataset(path: &Path) -> Result<Vec<data::VideoSample>> {
    data::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let cfg = read_config(config.as_deref())?;
            let ds = data::generate_dataset(&cfg.data, seed)?;
            data::save_dataset(&out, &ds).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} clips to {}", ds.len(), out.display());
        }
        Command::Train { data, config, out, mode, log } => {
            let cfg = read_config(config.as_deref())?;
            let ds = load_dataset(&data)?;
            let (train, _) = eval::split(&ds, cfg.data.holdout)?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
                None => Box::new(std::io::sink()),
            };
            let mut io_err = None;
            let model = training::train(&cfg, train, mode.into(), |r| {
                if log.is_none() && r.step % 100 == 0 {
                    eprintln!("{}", r.to_log_line());
                }
                if let Err(e) = writeln!(sink, "{}", r.to_log_line()) {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e).context("writing training log");
            }
            checkpoint::save_checkpoint(&out, &model.config, &model.params).with_context(|| format!("writing {}", out.display()))?;
            println!("trained {} steps, checkpoint {}", cfg.train.steps, out.display());
        }
        Command::Eval { data, ckpt, modality, report, all } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let model = Model { config: ck.config, params: ck.params };
            let samples = if all { &ds[..] } else { eval::split(&ds, model.config.data.holdout)?.1 };
            let r = eval::evaluate(&model, samples, modality.into())?;
            fs::write(&report, r.to_text()).with_context(|| format!("writing {}", report.display()))?;
            print!("{}", r.to_text());
        }
        Command::Infer { ckpt, data, sample, expr_id, out_mask, frame } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let model = Model { config: ck.config, params: ck.params };
            let s = ds.get(sample).ok_or_else(|| UsageError(format!("sample {sample} out of range (0..{})", ds.len())))?;
            let e = s.expressions.get(expr_id).ok_or_else(|| UsageError(format!("expr-id {expr_id} out of range (0..{})", s.expressions.len())))?;
            let f = s.frames.get(frame).ok_or_else(|| UsageError(format!("frame {frame} out of range (0..{})", s.num_frames())))?;
            let input = match e.modality {
                Modality::Text => ExpressionInput { text: Some(&e.tokens), audio: None },
                Modality::Audio => ExpressionInput { text: None, audio: Some(&e.tokens) },
            };
            let p = model::predict_frame(&model, f, input)?;
            write_pgm(&out_mask, &p.mask).with_context(|| format!("writing {}", out_mask.display()))?;
            let j = refseg::metrics::region_similarity(&p.mask, &s.gt_masks[e.object_id][frame])?;
            println!("selected={:?} area={} J={j:.6}", p.selected, p.mask.area());
        }
    }
    Ok(())
}

/// Binary PGM, 255 for foreground.
fn write_pgm(path: &Path, m: &Mask) -> std::io::Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    bytes.extend(m.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, bytes)
}

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<refseg::Error>() {
            match e {
                refseg::Error::Format(FormatError::Io(_)) | refseg::Error::Checkpoint(CheckpointError::Io(_)) => return (EXIT_IO, "io"),
                refseg::Error::Format(_) | refseg::Error::Checkpoint(_) => return (EXIT_FORMAT, "format"),
                refseg::Error::Config(_) => return (EXIT_USAGE, "usage"),
                _ => {}
            }
        }
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return (EXIT_USAGE, "usage");
        }
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return match e {
                FormatError::Io(_) => (EXIT_IO, "io"),
                _ => (EXIT_FORMAT, "format"),
            };
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return match e {
                CheckpointError::Io(_) => (EXIT_IO, "io"),
                CheckpointError::Config(_) => (EXIT_USAGE, "usage"),
                _ => (EXIT_FORMAT, "format"),
            };
        }
        if cause.is::<std::io::Error>() {
            return (EXIT_IO, "io");
        }
    }
    (EXIT_RUNTIME, "runtime")
}

fn fail(code: u8, kind: &str, msg: &str) -> ExitCode {
    let msg = msg.lines().next().unwrap_or("").replace('"', "'");
    eprintln!("error code={code} kind={kind} msg=\"{msg}\"");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let msg = text.trim_start_matches("error: ");
            return fail(EXIT_USAGE, "usage", msg);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            fail(code, kind, &format!("{e:#}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn error_classes() {
        let io = anyhow::Error::new(std::io::Error::new(std::io::ErrorKind::NotFound, "x")).context("opening");
        assert_eq!(classify(&io), (EXIT_IO, "io"));
        let v = anyhow::Error::new(CheckpointError::Version { found: 9, expected: 1 });
        assert_eq!(classify(&v), (EXIT_FORMAT, "format"));
        let u = anyhow::Error::new(UsageError("bad".into()));
        assert_eq!(classify(&u), (EXIT_USAGE, "usage"));
        assert_eq!(classify(&anyhow::anyhow!("other")), (EXIT_RUNTIME, "runtime"));
    }
}
