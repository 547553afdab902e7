use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use pgseg::losses_metrics::{evaluate_case, summarize};
use pgseg::pipeline::{
    checkpoint, evaluate, gen_synthetic, import_external, infer, load_dataset, load_sample, read_png, save_dataset, train,
    write_png, write_reports, Predictor, PromptSourceConfig, TrainConfig,
};
use pgseg::{Error, Result, ORGANS};

#[derive(Parser)]
#[command(name = "pgseg", version, about = "Prior-guided multi-organ segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Training config (JSON). Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Template prompts only (no network), with a note in the run log.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset, or convert `.npz` slices with --import.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Comma separated organ subset.
        #[arg(long, value_delimiter = ',')]
        organs: Option<Vec<String>>,
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Train (or resume) a run in --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Disable a module; repeatable.
        #[arg(long, value_parser = ["fgmpa", "mlff", "imo"])]
        ablate: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Per-case CSV and summary JSON for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label map (PNG of class ids) and optional guide heatmap for one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 8-bit grayscale PNG, or a dataset directory together with --case.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: bool,
    },
    /// Dice / HD95 on label PNG pairs (files, or directories matched by name).
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common, ablate: &[String]) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for flag in ablate {
        cfg.ablation.disable(flag)?;
    }
    if common.deterministic && cfg.model.prompts != PromptSourceConfig::Template {
        log::warn!("--deterministic: using template prompts instead of the LLM client");
        cfg.model.prompts = PromptSourceConfig::Template;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn png_pairs(pred: &Path, target: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.is_file() {
        let id = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(id, pred.to_path_buf(), target.to_path_buf())]);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(pred)
        .map_err(|e| load_err(pred, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for p in names {
        let name = p.file_name().expect("file").to_owned();
        let t = target.join(&name);
        if !t.is_file() {
            return Err(load_err(&t, "no target mask with this name"));
        }
        out.push((p.file_stem().expect("stem").to_string_lossy().into_owned(), p, t));
    }
    if out.is_empty() {
        return Err(Error::Argument(format!("no .png masks in {}", pred.display())));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.cmd {
        Cmd::GenData { out, cases, size, organs, import } => {
            if let Some(src) = import {
                let n = import_external(&src, &out, size)?.len();
                println!("imported {n} slices into {}", out.display());
                return Ok(());
            }
            let seed = common.seed.unwrap_or(7);
            let organs: Vec<String> = organs.unwrap_or_else(|| ORGANS.iter().map(|s| s.to_string()).collect());
            let names: Vec<&str> = organs.iter().map(String::as_str).collect();
            let samples = gen_synthetic(seed, cases, &names, size)?;
            save_dataset(&out, &samples, "synthetic", Some(seed))?;
            println!("wrote {cases} synthetic slices to {}", out.display());
        }
        Cmd::Train { data, out, val, ablate, epochs, max_steps } => {
            let mut cfg = load_config(common, &ablate)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if max_steps.is_some() {
                cfg.max_steps = max_steps;
            }
            let dataset = load_dataset(&data)?;
            let val = match val {
                Some(v) => load_dataset(&v)?,
                None => Vec::new(),
            };
            let t = train(cfg, &dataset, &val, &out)?;
            if let Some(last) = t.history.last() {
                println!("epoch {} step {} loss {:.4}", last.epoch, last.step, last.loss);
            }
            println!("checkpoint in {}", out.display());
        }
        Cmd::Eval { checkpoint: ck, data, out } => {
            let ck = checkpoint::load::<f32>(&ck)?;
            let dataset = load_dataset(&data)?;
            let p = Predictor::Model { model: &ck.model, store: &ck.store, batch: ck.config.batch_size };
            let (reports, summary) = evaluate(&p, &dataset)?;
            write_reports(&out, &reports, &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Infer { checkpoint: ck, image, case, out, heatmap } => {
            let ck = checkpoint::load::<f32>(&ck)?;
            let img: Array2<f32> = match case {
                Some(id) => load_sample(&image, &id)?.image,
                None => read_png(&image)?.mapv(|v| v as f32 / 255.0),
            };
            let (labels, heat) = infer(&ck.model, &ck.store, &img, heatmap)?;
            fs::create_dir_all(&out).map_err(|e| load_err(&out, e.to_string()))?;
            write_png(&out.join("labels.png"), &labels)?;
            if let Some(h) = heat {
                write_png(&out.join("heatmap.png"), &h)?;
            }
            println!("wrote {}", out.display());
        }
        Cmd::Metrics { pred, target, out } => {
            let mut reports = Vec::new();
            for (id, p, t) in png_pairs(&pred, &target)? {
                let (p, t) = (read_png(&p)?, read_png(&t)?);
                reports.push(evaluate_case(&id, p.view(), t.view())?);
            }
            let summary = summarize(&reports)?;
            write_reports(&out, &reports, &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}
