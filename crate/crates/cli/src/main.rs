use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use situ_core::data::{save_frames, synth_dataset, EncoderTag, Frame, SynthConfig, VocabMode};
use situ_core::heads::{Checkpoint, ModelKind};
use situ_core::metrics::{evaluate, render_table, MetricsReport, Setting};
use situ_core::train::{
    check_compatible, cross_attention, Conditioning, load_model, predict, rank_verbs, sweep, Config, Dataset, Features,
    SweepReport, Trainer, ABLATION_HEADS, ABLATION_LAYERS,
};
use situ_core::{Model32, SituError};

#[derive(Parser)]
#[command(name = "situ", version, about = "Situation recognition heads over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set lr=0.01` or `--set paths.store=x.bin`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (frames, vocab, embedding store, config).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        images: usize,
        #[arg(long, default_value_t = 8)]
        verbs: usize,
        #[arg(long, default_value_t = 64)]
        nouns: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        patches: usize,
    },
    /// Train a model; logs `step=<n> loss=<f> lr=<f>` lines.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint (usually `<checkpoint>.last`).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a noun checkpoint (optionally with a verb checkpoint).
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: EvalIo,
        #[arg(long, value_enum, default_value_t = SettingArg::All)]
        setting: SettingArg,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-image predictions as JSON.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: EvalIo,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump cross-attention of an xtf checkpoint for one image.
    InspectAttn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        image: String,
        /// Verb whose frame supplies the queries; the annotated verb by default.
        #[arg(long)]
        verb: Option<String>,
        /// 1-based layer.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Heat-map grid (rows: heads, columns: roles).
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Render reports written by `evaluate` or `sweep`.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Train one model per (heads, layers) pair and tabulate value / value-all.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_HEADS)]
        heads: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_LAYERS)]
        layers: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalIo {
    /// Noun checkpoint; `paths.checkpoint` by default.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Verb checkpoint for top-1 / top-5; `paths.verb_checkpoint` by default.
    #[arg(long)]
    verb_checkpoint: Option<PathBuf>,
    /// Frames to score; dev frames, else training frames, by default.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Gt,
    Top1,
    Top5,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

/// Bad invocation rather than bad data.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<Config> {
    let mut c = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for s in &args.set {
        c.set(s)?;
    }
    c.validate()?;
    Ok(c)
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut o = io::stdout().lock();
            o.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                o.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn cmd_synth(seed: u64, out: &Path, images: usize, verbs: usize, nouns: usize, dim: usize, patches: usize) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        seed,
        n_images: images,
        n_verbs: verbs,
        n_nouns: nouns,
        dim,
        patch_count: patches,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_frames(&out.join("frames.json"), &ds.vocab, &ds.frames)?;
    ds.vocab.save(&out.join("vocab.json"))?;
    ds.store.save(&out.join("store.bin"))?;
    let mut c = Config {
        model: ModelKind::Mlp,
        encoder: EncoderTag::Custom,
        layers: Some(2),
        hidden: Some(256),
        width: 64,
        ff: 128,
        box_hidden: 128,
        epochs: 40,
        lr_gamma: 1.0,
        seed,
        ..Config::default()
    };
    c.paths.frames = Some(out.join("frames.json"));
    c.paths.vocab = Some(out.join("vocab.json"));
    c.paths.store = Some(out.join("store.bin"));
    c.paths.checkpoint = Some(out.join("model.ckpt"));
    c.paths.report = Some(out.join("train_report.json"));
    c.save(&out.join("config.json"))?;
    eprintln!(
        "wrote {} frames, {} verbs, {} nouns to {}",
        ds.frames.len(),
        ds.vocab.n_verbs(),
        ds.vocab.n_nouns(),
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &ConfigArgs, resume: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(cfg)?;
    let data = Dataset::load(&config)?;
    let mut trainer: Trainer<'_, f32> = match resume {
        Some(p) => Trainer::resume(&config, &data, &Checkpoint::load(p)?)?,
        None => Trainer::new(&config, &data)?,
    };
    let mut out = io::stdout().lock();
    let summary = trainer.train(&mut out)?;
    if let Some(p) = &config.paths.report {
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(last) = summary.epochs.last() {
        eprintln!(
            "epoch {} loss {:.6} selection {:.4} best {:.4}",
            last.epoch,
            last.loss,
            last.selection,
            trainer.state.best.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

struct Loaded {
    data: Dataset,
    frames: Vec<Frame>,
    noun: Option<Model32>,
    verb: Option<Model32>,
    normalize: bool,
}

fn load_for_eval(config: &Config, io: &EvalIo) -> anyhow::Result<Loaded> {
    let data = Dataset::load(config)?;
    let noun_path = io.checkpoint.clone().or_else(|| config.paths.checkpoint.clone());
    let verb_path = io.verb_checkpoint.clone().or_else(|| config.paths.verb_checkpoint.clone());
    if noun_path.is_none() && verb_path.is_none() {
        return Err(usage("no checkpoint given (--checkpoint or paths.checkpoint)"));
    }
    let mut noun = None;
    let mut verb = None;
    let mut normalize = None;
    for path in [noun_path, verb_path].into_iter().flatten() {
        let ck = Checkpoint::load(&path)?;
        let (model, ck_config, vocab) = load_model::<f32>(&ck)?;
        check_compatible(&model.spec, &ck_config, &vocab, &data)
            .map_err(|e| e.context(path.display().to_string()))?;
        if normalize.is_some_and(|n| n != ck_config.normalize) {
            bail!(SituError::Checkpoint("verb and noun checkpoints disagree on normalisation".into()));
        }
        normalize = Some(ck_config.normalize);
        let slot = if model.kind() == ModelKind::VerbMlp { &mut verb } else { &mut noun };
        if slot.is_some() {
            return Err(usage(format!("two {} checkpoints given", model.kind().name())));
        }
        *slot = Some(model);
    }
    let frames = match &io.frames {
        Some(p) => situ_core::data::load_frames(p, VocabMode::Given(&data.vocab))?.1,
        None => data.selection_frames().to_vec(),
    };
    Ok(Loaded {
        data,
        frames,
        noun,
        verb,
        normalize: normalize.unwrap_or(false),
    })
}

fn features(l: &Loaded) -> anyhow::Result<Features<f32>> {
    let patches = l.noun.as_ref().is_some_and(|m| m.kind() == ModelKind::Xtf);
    Ok(Features::new(&l.data.store, &l.data.vocab, &l.frames, l.normalize, patches)?)
}

fn cmd_evaluate(cfg: &ConfigArgs, io: &EvalIo, setting: SettingArg, out: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(cfg)?;
    let l = load_for_eval(&config, io)?;
    let feats = features(&l)?;
    let batch = config.batch_size;
    let Some(noun) = &l.noun else {
        let verb = l.verb.as_ref().expect("a checkpoint was loaded");
        let ranks = rank_verbs(verb, &feats, l.frames.len(), batch)?;
        let n = l.frames.len().max(1) as f64;
        let top = |k: usize| {
            l.frames
                .iter()
                .zip(&ranks)
                .filter(|(f, r)| r.iter().take(k).any(|&v| v == f.verb))
                .count() as f64
                / n
        };
        let text = serde_json::to_string_pretty(&serde_json::json!({
            "frames": l.frames.len(),
            "verb_top1": top(1),
            "verb_top5": top(5),
        }))?;
        return write_or_print(out, &text);
    };
    let settings: Vec<Setting> = match (setting, l.verb.is_some()) {
        (SettingArg::All, true) => Setting::ALL.to_vec(),
        (SettingArg::All, false) | (SettingArg::Gt, _) => vec![Setting::Gt],
        (SettingArg::Top1, true) => vec![Setting::Top1],
        (SettingArg::Top5, true) => vec![Setting::Top5],
        (_, false) => return Err(usage("top-1 / top-5 evaluation needs --verb-checkpoint")),
    };
    let mut reports = Vec::with_capacity(settings.len());
    for s in settings {
        let cond = if s == Setting::Gt { Conditioning::GroundTruth } else { Conditioning::Predicted };
        let preds = predict(noun, l.verb.as_ref(), &feats, &l.data.vocab, &l.frames, batch, cond)?;
        reports.push(evaluate(&preds, &l.frames, s, config.value_mode, config.aggregation, Some(&l.data.vocab))?);
    }
    eprint!("{}", render_table(&reports));
    write_or_print(out, &serde_json::to_string_pretty(&reports)?)
}

fn cmd_predict(cfg: &ConfigArgs, io: &EvalIo, out: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(cfg)?;
    let l = load_for_eval(&config, io)?;
    let noun = l.noun.as_ref().ok_or_else(|| usage("predict needs a noun checkpoint"))?;
    let feats = features(&l)?;
    let preds = predict(
        noun,
        l.verb.as_ref(),
        &feats,
        &l.data.vocab,
        &l.frames,
        config.batch_size,
        Conditioning::Predicted,
    )?;
    write_or_print(out, &serde_json::to_string_pretty(&preds)?)
}

/// Grey-scale grid of `[heads][roles]` tiles, one square cell per patch
/// token after the class token.
fn heat_map(attn: &situ_core::Tensor32, path: &Path) -> anyhow::Result<()> {
    let (h, m, p) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let grid = ((p.saturating_sub(1)) as f64).sqrt().floor() as usize;
    if grid == 0 {
        bail!(SituError::InvalidArgument("too few patch tokens for a heat map".into()));
    }
    const CELL: u32 = 12;
    const GAP: u32 = 4;
    let tile = grid as u32 * CELL;
    let width = m as u32 * (tile + GAP) + GAP;
    let height = h as u32 * (tile + GAP) + GAP;
    let mut img = image::GrayImage::from_pixel(width, height, image::Luma([255]));
    for hi in 0..h {
        for ri in 0..m {
            let base = (hi * m + ri) * p;
            let row = &attn.data()[base + 1..base + 1 + grid * grid];
            let max = row.iter().copied().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
            let x0 = GAP + ri as u32 * (tile + GAP);
            let y0 = GAP + hi as u32 * (tile + GAP);
            for (k, &w) in row.iter().enumerate() {
                let shade = 255 - (255.0 * (w / max).clamp(0.0, 1.0)).round() as u8;
                let (cx, cy) = ((k % grid) as u32, (k / grid) as u32);
                for dy in 0..CELL {
                    for dx in 0..CELL {
                        img.put_pixel(x0 + cx * CELL + dx, y0 + cy * CELL + dy, image::Luma([shade]));
                    }
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_inspect(
    cfg: &ConfigArgs,
    checkpoint: Option<&Path>,
    frames: Option<&Path>,
    image: &str,
    verb: Option<&str>,
    layer: usize,
    out: Option<&Path>,
    png: Option<&Path>,
) -> anyhow::Result<()> {
    let config = load_config(cfg)?;
    let io = EvalIo {
        checkpoint: checkpoint.map(Path::to_path_buf),
        verb_checkpoint: None,
        frames: frames.map(Path::to_path_buf),
    };
    let mut l = load_for_eval(&config, &io)?;
    let pos = l
        .frames
        .iter()
        .position(|f| f.image_id == image)
        .ok_or_else(|| SituError::frame(image, "image is not in the frame list"))?;
    l.frames = vec![l.frames[pos].clone()];
    let noun = l.noun.as_ref().ok_or_else(|| usage("inspect-attn needs a noun checkpoint"))?;
    let vocab = &l.data.vocab;
    let v = match verb {
        Some(name) => vocab
            .verb_index(name)
            .ok_or_else(|| SituError::Vocab(format!("unknown verb {:?}", name)))?,
        None => l.frames[0].verb,
    };
    let feats = features(&l)?;
    let layers = cross_attention(noun, &feats, vocab, 0, v)?;
    if layer == 0 || layer > layers.len() {
        return Err(usage(format!("layer must lie in 1..={}", layers.len())));
    }
    let attn = &layers[layer - 1];
    let (h, m, p) = (attn.shape()[0], attn.shape()[1], attn.shape()[2]);
    let weights: Vec<Vec<Vec<f32>>> = (0..h)
        .map(|hi| (0..m).map(|ri| attn.data()[(hi * m + ri) * p..(hi * m + ri + 1) * p].to_vec()).collect())
        .collect();
    let roles: Vec<&str> = vocab.frame(v).iter().map(|&r| vocab.roles()[r].as_str()).collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "image_id": image,
        "verb": vocab.verbs()[v],
        "layer": layer,
        "roles": roles,
        "heads": h,
        "patch_count": p,
        "weights": weights,
    }))?;
    if let Some(path) = png {
        heat_map(attn, path)?;
    }
    write_or_print(out, &text)
}

fn cmd_report(input: &Path, format: Format) -> anyhow::Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let parse = |e: serde_json::Error| SituError::Parse {
        context: input.display().to_string(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse)?;
    if value.get("cells").is_some() {
        let sweep: SweepReport = serde_json::from_value(value).map_err(parse)?;
        return match format {
            Format::Table => write_or_print(None, &sweep.render_table()),
            Format::Json => write_or_print(None, &serde_json::to_string_pretty(&sweep)?),
        };
    }
    let reports: Vec<MetricsReport> = if value.is_array() {
        serde_json::from_value(value).map_err(parse)?
    } else {
        vec![serde_json::from_value(value).map_err(parse)?]
    };
    match format {
        Format::Table => write_or_print(None, &render_table(&reports)),
        Format::Json => write_or_print(None, &serde_json::to_string_pretty(&reports)?),
    }
}

fn cmd_sweep(cfg: &ConfigArgs, heads: &[usize], layers: &[usize], out: Option<&Path>) -> anyhow::Result<()> {
    let config = load_config(cfg)?;
    if !matches!(config.model, ModelKind::Tf | ModelKind::Xtf) {
        return Err(usage("sweep needs model tf or xtf (use --set model=tf)"));
    }
    let data = Dataset::load(&config)?;
    let report = sweep(&config, &data, heads, layers)?;
    print!("{}", report.render_table());
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            out,
            images,
            verbs,
            nouns,
            dim,
            patches,
        } => cmd_synth(seed, &out, images, verbs, nouns, dim, patches),
        Command::Train { cfg, resume } => cmd_train(&cfg, resume.as_deref()),
        Command::Evaluate { cfg, io, setting, out } => cmd_evaluate(&cfg, &io, setting, out.as_deref()),
        Command::Predict { cfg, io, out } => cmd_predict(&cfg, &io, out.as_deref()),
        Command::InspectAttn {
            cfg,
            checkpoint,
            frames,
            image,
            verb,
            layer,
            out,
            png,
        } => cmd_inspect(
            &cfg,
            checkpoint.as_deref(),
            frames.as_deref(),
            &image,
            verb.as_deref(),
            layer,
            out.as_deref(),
            png.as_deref(),
        ),
        Command::Report { input, format } => cmd_report(&input, format),
        Command::Sweep {
            cfg,
            heads,
            layers,
            out,
        } => cmd_sweep(&cfg, &heads, &layers, out.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<SituError>() {
        Some(SituError::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
