//! Command-line front end: data generation, training, decoding and checks.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use duvlg::checkpoint::{load_checkpoint, save_checkpoint};
use duvlg::codec::ImageGrid;
use duvlg::data::{bleu4, load_dataset, save_dataset, split_indices, PairedExample, SyntheticSpec};
use duvlg::decode::{caption, generate_image, rerank};
use duvlg::objectives::TaskKind;
use duvlg::train::{evaluate_nll, finetune, pretrain, StepLog, TrainState, LOG_HEADER};
use duvlg::verify::{task_gradient_reports, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
use duvlg::{Error, Result, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "duvlg", about = "Dual sequence-to-sequence vision-language training at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Drop the image-target losses.
    #[arg(long, global = true)]
    no_image_loss: bool,
    /// Drop the text-target losses.
    #[arg(long, global = true)]
    no_text_loss: bool,
    /// Drop the commitment loss.
    #[arg(long, global = true)]
    no_commitment: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of examples; defaults to `n_train`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pre-train with the mixed objectives and write a checkpoint.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's `steps`; 0 writes the initial model.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Training log destination; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Single-task fine-tuning from a checkpoint.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `mt_caption` or `mt_t2i`.
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        epochs: Option<usize>,
        /// Defaults to the task's fine-tuning rate from the config.
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Caption an image file or a rendered block spec.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        image: Option<PathBuf>,
        /// Block spec such as `red@top-left;blue@center`.
        #[arg(long)]
        spec: Option<String>,
    },
    /// Generate images for a caption and rerank them.
    Imagine {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        /// Number of samples; defaults to `n_samples`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-task NLL and caption BLEU-4 on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Cap on the number of validation examples captioned for BLEU.
        #[arg(long)]
        bleu_limit: Option<usize>,
    },
    /// Finite-difference check of every task objective on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset file; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Layers the config file, `--set` overrides and ablation flags on `base`.
fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)?;
        cfg.apply_text(&text).map_err(|e| Error::Parse { path: path.clone(), line: 0, msg: e.to_string() })?;
    }
    for kv in &common.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.no_image_loss |= common.no_image_loss;
    cfg.no_text_loss |= common.no_text_loss;
    cfg.no_commitment |= common.no_commitment;
    cfg.validate()?;
    Ok(cfg)
}

/// Prints the fully resolved config to stderr.
fn announce(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    eprint!("{}", cfg.to_text());
    Ok(())
}

/// The checkpoint's training state under the resolved config. Keys that
/// shape the model must agree with the stored parameters.
fn resume(common: &Common, path: &Path) -> Result<(RunConfig, TrainState)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = resolve(common, ckpt.config.clone())?;
    let state = ckpt.state_under(&cfg)?;
    Ok((cfg, state))
}

fn dataset(cfg: &RunConfig, args: &DataArgs, codec: &duvlg::codec::VisionCodec) -> Result<Vec<PairedExample>> {
    match &args.data {
        Some(path) => load_dataset(path, &cfg.vocab(), codec, cfg.image_size),
        None => cfg.dataset(codec),
    }
}

fn split(data: Vec<PairedExample>) -> (Vec<PairedExample>, Vec<PairedExample>) {
    let (train_idx, val_idx) = split_indices(data.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    (pick(&train_idx), pick(&val_idx))
}

struct LogSink(Box<dyn Write>);

impl LogSink {
    fn open(path: Option<&Path>) -> Result<Self> {
        let mut w: Box<dyn Write> = match path {
            Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p)?)),
            None => Box::new(std::io::stdout()),
        };
        writeln!(w, "{LOG_HEADER}")?;
        Ok(Self(w))
    }

    fn line(&mut self, log: &StepLog) {
        let _ = writeln!(self.0, "{log}");
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let common = &cli.common;
    match cli.command {
        Command::GenData { out, n } => {
            let mut cfg = resolve(common, RunConfig::default())?;
            cfg.n_train = n.unwrap_or(cfg.n_train);
            announce(&cfg)?;
            let codec = cfg.codec()?;
            let data = cfg.dataset(&codec)?;
            save_dataset(&out, &data, &cfg.vocab())?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Pretrain { out, steps, resume: from, data, log } => {
            let (mut cfg, mut state) = match &from {
                Some(path) => resume(common, path)?,
                None => {
                    let cfg = resolve(common, RunConfig::default())?;
                    let state = TrainState::new(cfg.build_model()?, cfg.adam(), cfg.seed);
                    (cfg, state)
                }
            };
            cfg.steps = steps.unwrap_or(cfg.steps);
            announce(&cfg)?;
            let steps = cfg.steps;
            if steps > 0 {
                let (train, _) = split(dataset(&cfg, &data, state.model.codec())?);
                let mut sink = LogSink::open(log.as_deref())?;
                pretrain(&mut state, &train, steps, &cfg.train_config(), |l| sink.line(l))?;
            }
            save_checkpoint(&out, &state, &cfg)?;
            println!("wrote checkpoint at step {} to {}", state.step, out.display());
        }
        Command::Finetune { ckpt, out, task, epochs, lr, data, log } => {
            let (mut cfg, mut state) = resume(common, &ckpt)?;
            let slot = if task == TaskKind::MtT2i { &mut cfg.finetune_lr_t2i } else { &mut cfg.finetune_lr_caption };
            *slot = lr.unwrap_or(*slot);
            let lr = *slot;
            cfg.finetune_epochs = epochs.unwrap_or(cfg.finetune_epochs);
            announce(&cfg)?;
            let (train, _) = split(dataset(&cfg, &data, state.model.codec())?);
            let mut sink = LogSink::open(log.as_deref())?;
            finetune(&mut state, &train, task, cfg.finetune_epochs, lr, &cfg.train_config(), |l| sink.line(l))?;
            save_checkpoint(&out, &state, &cfg)?;
            println!("wrote checkpoint at step {} to {}", state.step, out.display());
        }
        Command::Caption { ckpt, image, spec } => {
            let (cfg, state) = resume(common, &ckpt)?;
            announce(&cfg)?;
            let image = match (image, spec) {
                (Some(path), _) => ImageGrid::load(&path)?,
                (None, Some(spec)) => SyntheticSpec::parse(&spec)?.render(state.model.codec(), cfg.image_size)?,
                (None, None) => return Err(Error::Config("caption needs --image or --spec".into())),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let words = caption(&state.model, &image, &cfg.caption_decode(), &mut rng)?;
            println!("{}", cfg.vocab().decode_text(&words)?);
        }
        Command::Imagine { ckpt, caption: text, n, out_dir } => {
            let (mut cfg, state) = resume(common, &ckpt)?;
            cfg.n_samples = n.unwrap_or(cfg.n_samples);
            announce(&cfg)?;
            let words = cfg.vocab().encode_text(&text)?;
            let decode = cfg.image_decode();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let images = generate_image(&state.model, &words, cfg.grid(), &decode, &mut rng)?;
            fs::create_dir_all(&out_dir)?;
            let width = images.len().saturating_sub(1).to_string().len();
            for (i, g) in images.iter().enumerate() {
                g.image.save(&out_dir.join(format!("image_{i:0width$}.img")))?;
            }
            let grids: Vec<ImageGrid> = images.into_iter().map(|g| g.image).collect();
            let (best, _) = rerank(&state.model, &words, &grids)?;
            println!("wrote {} images to {}", grids.len(), out_dir.display());
            println!("chosen {best}");
        }
        Command::Eval { ckpt, data, bleu_limit } => {
            let (cfg, state) = resume(common, &ckpt)?;
            announce(&cfg)?;
            let (_, val) = split(dataset(&cfg, &data, state.model.codec())?);
            if val.is_empty() {
                return Err(Error::Empty("validation split"));
            }
            let tc = cfg.train_config();
            for kind in TaskKind::ALL {
                let nll = evaluate_nll(&state.model, &val, kind, &tc.corruption, cfg.batch_size, cfg.seed)?;
                println!("nll_{kind}\t{nll:.6}");
            }
            let decode = cfg.caption_decode();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let limit = bleu_limit.unwrap_or(val.len()).min(val.len());
            let mut total = 0.0;
            for ex in &val[..limit] {
                let words = caption(&state.model, &ex.image, &decode, &mut rng)?;
                total += bleu4(&words, std::slice::from_ref(&ex.caption))?;
            }
            if limit > 0 {
                println!("bleu4\t{:.6}", total / limit as f64);
            }
        }
        Command::Gradcheck { seed } => {
            let cfg = resolve(common, RunConfig::default())?;
            announce(&cfg)?;
            let mut ok = true;
            for (kind, r) in task_gradient_reports(seed, cfg.beta, GRADCHECK_STEP)? {
                let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
                ok &= pass;
                println!(
                    "{kind}\tmax_rel_error {:.3e}\tcoordinates {}\t{}",
                    r.max_rel_error,
                    r.checked,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            return Ok(if ok { 0 } else { 1 });
        }
    }
    Ok(0)
}
