//! Command-line entry point: training, sampling, fine-tuning, prediction,
//! schedule analysis, and tokenization.

mod config;

use bfn_core::bfn::{ClampMask, GenerationConfig, TimeSampling};
use bfn_core::checkpoint::{load_generative, save_generative, GenerativeState};
use bfn_core::data::{read_labeled_csv_file, read_smiles_file, split_indices};
use bfn_core::finetune::{
    load_finetuned, predict_probabilities, run_finetune, save_finetuned, FinetuneConfig,
    FinetuneModel, PredictionHead, Targets, TaskKind,
};
use bfn_core::metrics::{entropy_curve, novelty, uniqueness, validity};
use bfn_core::network::{Denoiser, NetworkConfig};
use bfn_core::rng::StreamKey;
use bfn_core::schedule::{beta_one_max, ScheduleKind, ScheduleParams};
use bfn_core::tokenizer::{detokenize, tokenize, PaddingStrategy, TokenSequence};
use bfn_core::train::{train_generative, AdamW, GenerativeData, LrSchedule, TrainConfig};
use bfn_core::vocab::{build_vocabulary, Vocabulary};
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "bfn", about = "Discrete Bayesian flow engine for molecular strings", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generative model on a molecule file (.smi lines or
    /// labeled .csv for conditional training).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batch padding strategy: dynamic or global.
        #[arg(long)]
        padding: Option<String>,
        /// Fixed padded length for global padding (overrides auto).
        #[arg(long)]
        max_len: Option<usize>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override training.epochs from the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample molecules from a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of molecules to draw.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_name = "W")]
        guidance_w: Option<f64>,
        /// Comma-separated conditioning label values.
        #[arg(long)]
        labels: Option<String>,
        /// Scaffold string clamped at the sequence start.
        #[arg(long)]
        scaffold: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sequence length (defaults to the training width).
        #[arg(long)]
        max_len: Option<usize>,
        /// Write samples and metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training file for the novelty metric.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Fine-tune a trained checkpoint on a labeled CSV.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// regression or classification.
        #[arg(long)]
        task: String,
        /// Validation CSV; without it a deterministic split is used.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "finetune-run")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict properties with a fine-tuned checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit schedule curves, Monte-Carlo entropy curves, and linearity
    /// statistics.
    AnalyzeSchedule {
        #[arg(long, default_value_t = 246)]
        k: usize,
        /// Comma-separated beta(1) values; `auto` uses the rate cap.
        #[arg(long, default_value = "auto")]
        beta1: String,
        /// Comma-separated schedule kinds.
        #[arg(long, default_value = "logform,quadratic")]
        kinds: String,
        #[arg(long, default_value = "schedule-analysis")]
        out: PathBuf,
        #[arg(long, default_value_t = 51)]
        points: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tokenize molecule strings to space-joined token ids.
    Tokenize {
        /// Input file; stdin when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

type AnyError = Box<dyn std::error::Error>;

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::Train { data, config, out, seed, padding, max_len, resume, epochs } => {
            cmd_train(&data, config.as_deref(), &out, seed, padding, max_len, resume, epochs)
        }
        Command::Sample {
            checkpoint,
            n,
            steps,
            guidance_w,
            labels,
            scaffold,
            seed,
            max_len,
            out,
            reference,
        } => cmd_sample(
            &checkpoint,
            n,
            steps,
            guidance_w,
            labels,
            scaffold,
            seed,
            max_len,
            out.as_deref(),
            reference.as_deref(),
        ),
        Command::Finetune { checkpoint, data, task, val, config, out, seed, epochs } => {
            cmd_finetune(
                &checkpoint,
                &data,
                &task,
                val.as_deref(),
                config.as_deref(),
                &out,
                seed,
                epochs,
            )
        }
        Command::Predict { checkpoint, data, out } => {
            cmd_predict(&checkpoint, &data, out.as_deref())
        }
        Command::AnalyzeSchedule { k, beta1, kinds, out, points, samples, seed } => {
            cmd_analyze_schedule(k, &beta1, &kinds, &out, points, samples, seed)
        }
        Command::Tokenize { data } => cmd_tokenize(data.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, AnyError> {
    Ok(match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    })
}

fn schedule_from_config(cfg: &RunConfig, k: usize) -> Result<ScheduleParams, AnyError> {
    let kind = ScheduleKind::parse(cfg.str("schedule.kind"))
        .ok_or_else(|| format!("unknown schedule kind `{}`", cfg.str("schedule.kind")))?;
    let beta1 = if cfg.bool("schedule.use_beta_max")? || cfg.str("schedule.beta1") == "auto" {
        beta_one_max(k)
    } else {
        cfg.parse_as::<f64>("schedule.beta1")?
    };
    let params = if cfg.bool("schedule.enforce_beta_cap")? {
        ScheduleParams::new(kind, beta1, k)?
    } else {
        ScheduleParams::uncapped(kind, beta1, k)?
    };
    Ok(params)
}

fn network_from_config(
    cfg: &RunConfig,
    k: usize,
    label_dim: usize,
) -> Result<NetworkConfig, AnyError> {
    let net = NetworkConfig {
        n_layers: cfg.parse_as("network.n_layers")?,
        n_heads: cfg.parse_as("network.n_heads")?,
        hidden_dim: cfg.parse_as("network.hidden_dim")?,
        dropout: cfg.parse_as("network.dropout")?,
        k_categories: k,
        label_dim,
        ffn_mult: cfg.parse_as("network.ffn_mult")?,
        embed_mlp_dim: cfg.parse_as("network.embed_mlp_dim")?,
    };
    net.validate()?;
    Ok(net)
}

fn version_describe() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(describe) if !describe.is_empty() => describe,
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn write_run_info(
    out: &Path,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(), AnyError> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.resolved"), cfg.render())?;
    let info = format!(
        "vocab_sha256 = {}\nseed = {}\nversion = {}\n",
        vocab.sha256_hex(),
        seed,
        version_describe()
    );
    std::fs::write(out.join("run_info.txt"), info)?;
    Ok(())
}

/// Tokenize lines, reporting the originating line number on failure.
fn tokenize_rows(
    rows: &[(usize, String)],
    vocab: &Vocabulary,
) -> Result<Vec<TokenSequence>, AnyError> {
    let mut out = Vec::with_capacity(rows.len());
    for (line, smiles) in rows {
        let seq = tokenize(smiles, vocab)
            .map_err(|e| format!("line {line}: cannot tokenize `{smiles}`: {e}"))?;
        out.push(seq);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data_path: &Path,
    config_path: Option<&Path>,
    out: &Path,
    seed: u64,
    padding_flag: Option<String>,
    max_len_flag: Option<usize>,
    resume: Option<PathBuf>,
    epochs_flag: Option<usize>,
) -> Result<(), AnyError> {
    let mut cfg = load_config(config_path)?;
    if let Some(p) = padding_flag {
        cfg.set("data.padding", &p)?;
    }
    if let Some(n) = max_len_flag {
        cfg.set("data.max_len", &n.to_string())?;
    }
    if let Some(n) = epochs_flag {
        cfg.set("training.epochs", &n.to_string())?;
    }
    let vocab = build_vocabulary();

    // CSV with a smiles column trains conditionally; plain lines otherwise.
    let is_csv = data_path.extension().map_or(false, |e| e.eq_ignore_ascii_case("csv"));
    let (rows, labels): (Vec<(usize, String)>, Option<Vec<Vec<f64>>>) = if is_csv {
        let csv = read_labeled_csv_file(data_path)?;
        let rows = csv
            .line_numbers
            .iter()
            .zip(&csv.smiles)
            .map(|(&l, s)| (l, s.clone()))
            .collect();
        (rows, Some(csv.labels))
    } else {
        (read_smiles_file(data_path)?, None)
    };
    let label_dim = labels.as_ref().map_or(0, |ls| ls.first().map_or(0, |l| l.len()));
    let sequences = tokenize_rows(&rows, &vocab)?;

    // Reaction-context masks clamp everything up to and including the last
    // ">>" token of each sequence.
    let context_masks = if cfg.bool("training.reaction_context")? {
        let arrow = vocab.id(">>").expect("reaction arrow in vocabulary");
        let mut masks = Vec::with_capacity(sequences.len());
        for ((line, _), seq) in rows.iter().zip(&sequences) {
            let last_arrow = seq.ids().iter().rposition(|&id| id == arrow).ok_or_else(|| {
                format!("line {line}: reaction_context training needs a `>>` token")
            })?;
            let fixed: Vec<bool> = (0..seq.len()).map(|d| d <= last_arrow).collect();
            masks.push(ClampMask::new(fixed, seq.clone(), vocab.len())?);
        }
        Some(masks)
    } else {
        None
    };

    let max_seq = sequences.iter().map(|s| s.len()).max().unwrap_or(2);
    let padding = match cfg.str("data.padding") {
        "dynamic" => PaddingStrategy::Dynamic,
        "global" => {
            let width = match cfg.str("data.max_len") {
                "auto" => max_seq,
                raw => raw
                    .parse::<usize>()
                    .map_err(|_| format!("data.max_len: cannot parse `{raw}`"))?,
            };
            if let Some((line, s)) = rows
                .iter()
                .zip(&sequences)
                .find(|(_, seq)| seq.len() > width)
                .map(|((line, s), _)| (*line, s.clone()))
            {
                return Err(format!(
                    "line {line}: `{s}` tokenizes to more than {width} tokens \
                     (global padding width)"
                )
                .into());
            }
            PaddingStrategy::Global(width)
        }
        other => return Err(format!("data.padding: unknown strategy `{other}`").into()),
    };
    let seq_len = match padding {
        PaddingStrategy::Global(w) => w,
        PaddingStrategy::Dynamic => max_seq,
    };

    let (mut net, mut optimizer, schedule, start_epoch, start_step) = match resume {
        Some(ckpt_path) => {
            let state = load_generative(&ckpt_path)?;
            if state.vocab_sha256 != vocab.sha256_hex() {
                return Err("checkpoint vocabulary hash does not match this build".into());
            }
            let opt =
                state.optimizer.ok_or("checkpoint has no optimizer state; cannot resume")?;
            (state.net, opt, state.schedule, state.epochs_done, state.steps_done)
        }
        None => {
            let schedule = schedule_from_config(&cfg, vocab.len())?;
            let net_cfg = network_from_config(&cfg, vocab.len(), label_dim)?;
            let net = Denoiser::new(net_cfg, &StreamKey::new(seed))?;
            let mut opt = AdamW::new(net.params());
            opt.weight_decay = cfg.parse_as("training.weight_decay")?;
            (net, opt, schedule, 0, 0)
        }
    };

    let time_sampling = match cfg.str("training.time_sampling") {
        "uniform" => TimeSampling::PerSequenceUniform,
        "stratified" => TimeSampling::StratifiedAcrossBatch,
        "importance" => TimeSampling::AlphaImportanceStratified,
        other => return Err(format!("training.time_sampling: unknown mode `{other}`").into()),
    };
    let grad_clip: f64 = cfg.parse_as("training.grad_clip")?;
    let train_cfg = TrainConfig {
        epochs: cfg.parse_as("training.epochs")?,
        batch_size: cfg.parse_as("training.batch_size")?,
        lr: LrSchedule {
            base: cfg.parse_as("training.lr")?,
            warmup_init: cfg.parse_as("training.warmup_init")?,
            warmup_steps: cfg.parse_as("training.warmup_steps")?,
        },
        p_uncond: cfg.parse_as("training.p_uncond")?,
        padding,
        seed,
        use_dropout: cfg.bool("training.dropout")?,
        grad_clip: (grad_clip > 0.0).then_some(grad_clip),
        time_sampling,
    };
    write_run_info(out, &cfg, &vocab, seed)?;

    let data = GenerativeData { sequences, labels, context_masks };
    let mut loss_log = std::io::BufWriter::new(std::fs::File::create(out.join("loss.csv"))?);
    writeln!(loss_log, "step,epoch,lr,loss")?;
    let mut log_entries: Vec<bfn_core::train::TrainStep> = Vec::new();
    let steps_done = train_generative(
        &mut net,
        &mut optimizer,
        &data,
        &schedule,
        &vocab,
        &train_cfg,
        start_epoch,
        start_step,
        |s| log_entries.push(*s),
    )?;
    for s in &log_entries {
        writeln!(loss_log, "{},{},{:.6e},{:.8e}", s.step, s.epoch, s.lr, s.loss)?;
    }
    loss_log.flush()?;
    let state = GenerativeState {
        net,
        schedule,
        vocab_sha256: vocab.sha256_hex(),
        epochs_done: train_cfg.epochs,
        steps_done,
        default_seq_len: seq_len,
        optimizer: Some(optimizer),
    };
    let ckpt_path = out.join("checkpoint.bfn");
    save_generative(&ckpt_path, &state)?;
    println!(
        "trained to epoch {} ({} steps); checkpoint written to {}",
        train_cfg.epochs,
        steps_done,
        ckpt_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    n: usize,
    steps: Option<usize>,
    guidance_w: Option<f64>,
    labels: Option<String>,
    scaffold: Option<String>,
    seed: u64,
    max_len: Option<usize>,
    out: Option<&Path>,
    reference: Option<&Path>,
) -> Result<(), AnyError> {
    let vocab = build_vocabulary();
    let state = load_generative(checkpoint)?;
    if state.vocab_sha256 != vocab.sha256_hex() {
        return Err(format!(
            "checkpoint vocabulary hash {} does not match this build's {}",
            state.vocab_sha256,
            vocab.sha256_hex()
        )
        .into());
    }
    let cfg_defaults = RunConfig::default();
    let seq_len = max_len.unwrap_or(state.default_seq_len);
    let clamp = match &scaffold {
        Some(s) => {
            let scaffold_seq =
                tokenize(s, &vocab).map_err(|e| format!("cannot tokenize scaffold `{s}`: {e}"))?;
            let body_len = scaffold_seq.len() - 1; // <start> + body stay clamped
            if body_len + 1 > seq_len {
                return Err(format!(
                    "scaffold needs {} positions but the sequence length is {seq_len}",
                    body_len + 1
                )
                .into());
            }
            let reference = TokenSequence::from_raw(scaffold_seq.ids()[..body_len].to_vec());
            Some(ClampMask::new(vec![true; body_len], reference, vocab.len())?)
        }
        None => None,
    };
    let conditioning = labels
        .map(|raw| -> Result<Vec<f64>, AnyError> {
            raw.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<f64>()
                        .map_err(|_| -> AnyError { format!("labels: `{p}` is not a number").into() })
                })
                .collect()
        })
        .transpose()?;
    let gen_cfg = GenerationConfig {
        n_steps: steps.unwrap_or(cfg_defaults.parse_as("sampling.steps")?),
        guidance_w: guidance_w.unwrap_or(cfg_defaults.parse_as("sampling.guidance_w")?),
        seq_len,
        n_samples: n,
        seed,
        clamp,
        conditioning,
    };
    let sequences = bfn_core::bfn::sample(&state.net, &gen_cfg, &state.schedule, &vocab)?;
    let strings: Vec<String> = sequences
        .iter()
        .map(|s| detokenize(s, &vocab, false))
        .collect::<Result<_, _>>()?;

    let val = validity(&strings, &vocab);
    let uniq = uniqueness(&strings)?;
    let mut summary = format!("n = {n}\nvalidity = {val:.4}\nuniqueness = {uniq:.4}\n");
    if let Some(ref_path) = reference {
        let reference_set: std::collections::HashSet<String> =
            read_smiles_file(ref_path)?.into_iter().map(|(_, s)| s).collect();
        let nov = novelty(&strings, &reference_set)?;
        summary.push_str(&format!("novelty = {nov:.4}\n"));
    }

    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("samples.smi"), strings.join("\n") + "\n")?;
            std::fs::write(dir.join("metrics.txt"), &summary)?;
            println!("{summary}");
            println!("samples written to {}", dir.join("samples.smi").display());
        }
        None => {
            for s in &strings {
                println!("{s}");
            }
            eprint!("{summary}");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    checkpoint: &Path,
    data: &Path,
    task_raw: &str,
    val: Option<&Path>,
    config_path: Option<&Path>,
    out: &Path,
    seed: u64,
    epochs_flag: Option<usize>,
) -> Result<(), AnyError> {
    let mut cfg = load_config(config_path)?;
    if let Some(n) = epochs_flag {
        cfg.set("finetune.epochs", &n.to_string())?;
    }
    let task = TaskKind::parse(task_raw)
        .ok_or_else(|| format!("task must be regression or classification, got `{task_raw}`"))?;
    let vocab = build_vocabulary();
    let state = load_generative(checkpoint)?;
    if state.vocab_sha256 != vocab.sha256_hex() {
        return Err("checkpoint vocabulary hash does not match this build".into());
    }

    let csv = read_labeled_csv_file(data)?;
    if csv.labels.first().map_or(0, |l| l.len()) == 0 {
        return Err("CSV has no label columns".into());
    }
    let rows: Vec<(usize, String)> =
        csv.line_numbers.iter().zip(&csv.smiles).map(|(&l, s)| (l, s.clone())).collect();
    let seqs = tokenize_rows(&rows, &vocab)?;

    let build_targets = |labels: &[Vec<f64>]| -> Result<(Targets, usize), AnyError> {
        match task {
            TaskKind::Regression => Ok((Targets::Regression(labels.to_vec()), labels[0].len())),
            TaskKind::Classification => {
                if labels[0].len() != 1 {
                    return Err("classification expects exactly one label column".into());
                }
                let classes: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let v = l[0];
                        if v < 0.0 || v.fract() != 0.0 {
                            Err(format!(
                                "row {}: class label must be a non-negative integer",
                                i + 1
                            ))
                        } else {
                            Ok(v as usize)
                        }
                    })
                    .collect::<Result<_, _>>()?;
                let n_classes = classes.iter().copied().max().unwrap_or(0) + 1;
                Ok((Targets::Classification(classes), n_classes.max(2)))
            }
        }
    };

    let (train_seqs, train_labels, val_seqs, val_labels) = match val {
        Some(val_path) => {
            let vcsv = read_labeled_csv_file(val_path)?;
            let vrows: Vec<(usize, String)> = vcsv
                .line_numbers
                .iter()
                .zip(&vcsv.smiles)
                .map(|(&l, s)| (l, s.clone()))
                .collect();
            let vseqs = tokenize_rows(&vrows, &vocab)?;
            (seqs, csv.labels.clone(), vseqs, vcsv.labels)
        }
        None => {
            let frac: f64 = cfg.parse_as("finetune.val_fraction")?;
            let (train_idx, val_idx) = split_indices(seqs.len(), frac, seed);
            let pick = |idx: &[usize]| -> (Vec<TokenSequence>, Vec<Vec<f64>>) {
                (
                    idx.iter().map(|&i| seqs[i].clone()).collect(),
                    idx.iter().map(|&i| csv.labels[i].clone()).collect(),
                )
            };
            let (ts, tl) = pick(&train_idx);
            let (vs, vl) = pick(&val_idx);
            (ts, tl, vs, vl)
        }
    };
    let (train_targets, n_outputs) = build_targets(&train_labels)?;
    let (val_targets, _) = build_targets(&val_labels)?;

    let head_dropout: f64 = cfg.parse_as("finetune.head_dropout")?;
    let head = PredictionHead::new(
        state.net.config().hidden_dim,
        n_outputs,
        task,
        head_dropout,
        &StreamKey::new(seed),
    );
    let mut model = FinetuneModel { net: state.net, head, scaler: None };
    let use_dropout = head_dropout > 0.0 || model.net.config().dropout > 0.0;
    let ft_cfg = FinetuneConfig {
        epochs: cfg.parse_as("finetune.epochs")?,
        batch_size: cfg.parse_as("finetune.batch_size")?,
        lr: LrSchedule {
            base: cfg.parse_as("finetune.lr")?,
            warmup_init: cfg.parse_as("finetune.warmup_init")?,
            warmup_steps: cfg.parse_as("finetune.warmup_steps")?,
        },
        plateau_patience: cfg.parse_as("finetune.plateau_patience")?,
        plateau_factor: cfg.parse_as("finetune.plateau_factor")?,
        lr_floor: cfg.parse_as("finetune.lr_floor")?,
        seed,
        freeze_backbone: cfg.bool("finetune.freeze_backbone")?,
        use_dropout,
    };
    write_run_info(out, &cfg, &vocab, seed)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("finetune_log.csv"))?);
    writeln!(log, "epoch,train_loss,val_metric,lr")?;
    let mut entries = Vec::new();
    run_finetune(
        &mut model,
        &vocab,
        &train_seqs,
        &train_targets,
        &val_seqs,
        &val_targets,
        &ft_cfg,
        |e| entries.push(*e),
    )?;
    for e in &entries {
        writeln!(log, "{},{:.8e},{:.8e},{:.6e}", e.epoch, e.train_loss, e.val_metric, e.lr)?;
    }
    log.flush()?;
    let ckpt_path = out.join("finetuned.bfn");
    save_finetuned(&ckpt_path, &model, &vocab.sha256_hex())?;
    if let Some(last) = entries.last() {
        println!(
            "fine-tuned {} epochs; final validation metric {:.6}; checkpoint {}",
            entries.len(),
            last.val_metric,
            ckpt_path.display()
        );
    }
    Ok(())
}

fn cmd_predict(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), AnyError> {
    let vocab = build_vocabulary();
    let (model, vocab_sha) = load_finetuned(checkpoint)?;
    if vocab_sha != vocab.sha256_hex() {
        return Err("checkpoint vocabulary hash does not match this build".into());
    }
    let is_csv = data.extension().map_or(false, |e| e.eq_ignore_ascii_case("csv"));
    let rows: Vec<(usize, String)> = if is_csv {
        let csv = read_labeled_csv_file(data)?;
        csv.line_numbers.iter().zip(&csv.smiles).map(|(&l, s)| (l, s.clone())).collect()
    } else {
        read_smiles_file(data)?
    };
    let seqs = tokenize_rows(&rows, &vocab)?;

    let mut lines = Vec::with_capacity(seqs.len() + 1);
    let n_out = model.head.n_outputs;
    let mut header = String::from("smiles");
    match model.head.task {
        TaskKind::Regression => {
            for i in 0..n_out {
                header.push_str(&format!(",y_hat{i}"));
            }
        }
        TaskKind::Classification => {
            header.push_str(",y_hat");
            for i in 0..n_out {
                header.push_str(&format!(",p{i}"));
            }
        }
    }
    lines.push(header);
    for ((_, smiles), seq) in rows.iter().zip(&seqs) {
        let mut line = smiles.clone();
        match model.head.task {
            TaskKind::Regression => {
                for v in model.predict(seq, &vocab)? {
                    line.push_str(&format!(",{v:.8e}"));
                }
            }
            TaskKind::Classification => {
                let probs = predict_probabilities(seq, &model.net, &model.head, &vocab)?;
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                line.push_str(&format!(",{argmax}"));
                for p in probs {
                    line.push_str(&format!(",{p:.8e}"));
                }
            }
        }
        lines.push(line);
    }
    let text = lines.join("\n") + "\n";
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(path, text)?;
            println!("predictions written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_analyze_schedule(
    k: usize,
    beta1_raw: &str,
    kinds_raw: &str,
    out: &Path,
    points: usize,
    samples: usize,
    seed: u64,
) -> Result<(), AnyError> {
    std::fs::create_dir_all(out)?;
    let beta1_values: Vec<f64> = beta1_raw
        .split(',')
        .map(|p| -> Result<f64, AnyError> {
            let p = p.trim();
            if p == "auto" {
                Ok(beta_one_max(k))
            } else {
                p.parse().map_err(|_| -> AnyError { format!("beta1: cannot parse `{p}`").into() })
            }
        })
        .collect::<Result<_, _>>()?;
    let kinds: Vec<ScheduleKind> = kinds_raw
        .split(',')
        .map(|p| {
            ScheduleKind::parse(p)
                .ok_or_else(|| format!("unknown schedule kind `{}`", p.trim()))
        })
        .collect::<Result<_, _>>()?;

    let mut summary = String::from("kind,beta1,entropy_r2,entropy_slope,entropy_intercept\n");
    for &beta1 in &beta1_values {
        for &kind in &kinds {
            let params = ScheduleParams::uncapped(kind, beta1, k)?;
            let tag = format!("{}_{beta1:.6}", kind.as_str());

            let mut curve_csv = String::from("t,beta,alpha\n");
            for i in 0..points.max(2) {
                let t = i as f64 / (points.max(2) - 1) as f64;
                curve_csv.push_str(&format!(
                    "{t:.6},{:.10e},{:.10e}\n",
                    params.beta(t)?,
                    params.alpha(t)?
                ));
            }
            std::fs::write(out.join(format!("schedule_{tag}.csv")), curve_csv)?;

            let curve = entropy_curve(&params, points.max(3), samples, &StreamKey::new(seed))?;
            let mut entropy_csv = String::from("t,entropy,stderr\n");
            for (t, h, se) in &curve.points {
                entropy_csv.push_str(&format!("{t:.6},{h:.8e},{se:.8e}\n"));
            }
            std::fs::write(out.join(format!("entropy_{tag}.csv")), entropy_csv)?;
            summary.push_str(&format!(
                "{},{beta1:.6},{:.6},{:.6},{:.6}\n",
                kind.as_str(),
                curve.fit.r_squared,
                curve.fit.slope,
                curve.fit.intercept
            ));
        }
    }
    std::fs::write(out.join("summary.csv"), &summary)?;
    println!("schedule analysis written to {}", out.display());
    Ok(())
}

fn cmd_tokenize(data: Option<&Path>) -> Result<(), AnyError> {
    let vocab = build_vocabulary();
    let reader: Box<dyn BufRead> = match data {
        Some(path) => Box::new(std::io::BufReader::new(std::fs::File::open(path)?)),
        None => Box::new(std::io::BufReader::new(std::io::stdin())),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let seq = tokenize(trimmed, &vocab)
            .map_err(|e| format!("line {}: cannot tokenize `{trimmed}`: {e}", i + 1))?;
        let ids: Vec<String> = seq.ids().iter().map(|id| id.to_string()).collect();
        writeln!(out, "{}", ids.join(" "))?;
    }
    Ok(())
}
