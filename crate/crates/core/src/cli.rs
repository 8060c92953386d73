//! Command-line entry point: `datagen`, `train`, `generate`, `evaluate`,
//! `score` and `experiment`.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! runtime errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data_ingest::load_dataset;
use crate::data_synth::generate_dataset;
use crate::error::{Error, IoContext, Result};
use crate::evaluation::{
    evaluate_checkpoint, generate_eval_set, inception_style_score, set_digest, synthetic_renders,
    train_attribute_classifiers, Attribute, Classifier, PosteriorMatrix,
};
use crate::experiment::{run_experiment, ExperimentConfig};
use crate::model::Stage;
use crate::training::{train_stage, Checkpoint, FINAL_CHECKPOINT};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "chatpainter",
    version,
    about = "Dialogue-conditioned two-stage text-to-image GAN on a synthetic shapes dataset"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides `seed` from the file and `--set`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p).map_err(|e| match e {
                Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
                other => other,
            })?;
        }
        c.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset.
    Datagen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated image resolutions.
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32])]
        resolutions: Vec<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-I checkpoint; required for `--stage 2`.
        #[arg(long = "stage1-ckpt")]
        stage1_ckpt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate one image per dataset sample from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a held-out dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of saved attribute classifiers; trained (and saved
        /// there) when absent.
        #[arg(long)]
        classifiers: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Inception-style score of a posterior CSV (one row per image).
    Score {
        #[arg(long)]
        posteriors: PathBuf,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        /// Rows per split; clamped to the number of rows.
        #[arg(long = "split-size")]
        split_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Encoder ablation: every variant under several seeds.
    Experiment {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated variants (recurrent, flat, none).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        stage1_epochs: Option<usize>,
        #[arg(long)]
        stage2_epochs: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// `key=value` override of the shared run settings; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).at(path)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
) -> Result<()> {
    let m = RunManifest {
        command,
        config: config.resolved(),
        inputs,
        outputs,
    };
    write_json(&dir.join(RUN_MANIFEST), &m)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn classifiers_for(cfg: &RunConfig, resolution: usize, dir: Option<&Path>) -> Result<Vec<Classifier>> {
    if let Some(dir) = dir {
        let paths: Vec<PathBuf> = Attribute::ALL
            .iter()
            .map(|a| dir.join(format!("{}.json", a.name())))
            .collect();
        if paths.iter().all(|p| p.exists()) {
            let loaded = paths.iter().map(|p| Classifier::load(p)).collect::<Result<Vec<_>>>()?;
            if let Some(c) = loaded.iter().find(|c| c.resolution != resolution) {
                return Err(Error::Config(format!(
                    "classifier {} was trained at {}px but the checkpoint generates {resolution}px",
                    c.attribute.name(),
                    c.resolution
                )));
            }
            return Ok(loaded);
        }
    }
    let (images, specs) = synthetic_renders(cfg.classifier_renders, cfg.seed, resolution)?;
    let classifiers = train_attribute_classifiers(
        &images.iter().collect::<Vec<_>>(),
        &specs.iter().collect::<Vec<_>>(),
        &cfg.classifier_config(),
    )?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).at(dir)?;
        for c in &classifiers {
            c.save(&dir.join(format!("{}.json", c.attribute.name())))?;
        }
    }
    Ok(classifiers)
}

pub fn run(cli: Cli) -> Result<()> {
    let stderr = std::io::stderr();
    let mut log = |s: &str| {
        let _ = writeln!(stderr.lock(), "{s}");
    };
    match cli.command {
        Command::Datagen {
            n,
            out,
            resolutions,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let manifest = generate_dataset(n, c.seed, &resolutions, &out)?;
            let mut outputs = BTreeMap::new();
            outputs.insert("dataset_digest".into(), manifest.digest.clone());
            let mut inputs = BTreeMap::new();
            inputs.insert("n".into(), n.to_string());
            inputs.insert(
                "resolutions".into(),
                resolutions.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","),
            );
            write_manifest(&out, "datagen", &c, inputs, outputs)?;
            log(&format!(
                "wrote {n} samples to {} (digest {})",
                out.display(),
                manifest.digest
            ));
        }
        Command::Train {
            stage,
            data,
            out,
            stage1_ckpt,
            cfg,
        } => {
            let stage = Stage::from_number(stage)?;
            if stage == Stage::Two && stage1_ckpt.is_none() {
                return Err(Error::Config("--stage 2 requires --stage1-ckpt".into()));
            }
            let c = cfg.resolve()?;
            let tc = c.train_config(stage)?;
            let dataset = load_dataset(&data)?;
            let s1 = stage1_ckpt.as_deref().map(load_checkpoint).transpose()?;
            fs::create_dir_all(&out).at(&out)?;
            let outcome = train_stage(&tc, &dataset, s1.as_ref(), Some(&out), |m| log(&m.csv_row()))?;
            let final_path = out.join(FINAL_CHECKPOINT);
            let mut inputs = BTreeMap::new();
            inputs.insert("dataset_digest".into(), dataset.manifest.digest.clone());
            if let Some(p) = &stage1_ckpt {
                inputs.insert("stage1_checkpoint".into(), file_digest(p)?);
            }
            let mut outputs = BTreeMap::new();
            outputs.insert("checkpoint".into(), file_digest(&final_path)?);
            outputs.insert("epochs".into(), outcome.metrics.len().to_string());
            write_manifest(&out, "train", &c, inputs, outputs)?;
        }
        Command::Generate { ckpt, data, out, cfg } => {
            let c = cfg.resolve()?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let images = generate_eval_set(&checkpoint, &dataset, c.seed, &out)?;
            let mut inputs = BTreeMap::new();
            inputs.insert("checkpoint".into(), file_digest(&ckpt)?);
            inputs.insert("dataset_digest".into(), dataset.manifest.digest.clone());
            let mut outputs = BTreeMap::new();
            outputs.insert("images_digest".into(), set_digest(&images));
            outputs.insert("n_images".into(), images.len().to_string());
            write_manifest(&out, "generate", &c, inputs, outputs)?;
            log(&format!("wrote {} images to {}", images.len(), out.display()));
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            classifiers,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let resolution = match checkpoint.stage {
                Stage::One => checkpoint.config.model.dims.w0,
                Stage::Two => checkpoint.config.model.dims.w,
            };
            let cls = classifiers_for(&c, resolution, classifiers.as_deref())?;
            fs::create_dir_all(&out).at(&out)?;
            let report = evaluate_checkpoint(
                &checkpoint,
                &dataset,
                &cls,
                &c.eval_options(),
                Some(&out.join("generated")),
            )?;
            write_json(&out.join("score.json"), &report.score)?;
            write_json(&out.join("report.json"), &report)?;
            let mut inputs = BTreeMap::new();
            inputs.insert("checkpoint".into(), file_digest(&ckpt)?);
            inputs.insert("dataset_digest".into(), dataset.manifest.digest.clone());
            for cl in &cls {
                inputs.insert(format!("classifier.{}", cl.attribute.name()), cl.digest());
            }
            let mut outputs = BTreeMap::new();
            outputs.insert("images_digest".into(), report.images_digest.clone());
            outputs.insert("score_mean".into(), report.score.mean.to_string());
            outputs.insert("score_std".into(), report.score.std.to_string());
            write_manifest(&out, "evaluate", &c, inputs, outputs)?;
            println!("{}", serde_json::to_string(&report.score)?);
        }
        Command::Score {
            posteriors,
            splits,
            split_size,
            seed,
        } => {
            let p = PosteriorMatrix::from_csv(&posteriors)?;
            let size = split_size.unwrap_or(3 * p.rows() / 4).clamp(1, p.rows());
            let mut report = inception_style_score(&p, splits, size, seed)?;
            report.classifier_digest = file_digest(&posteriors)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Experiment {
            out,
            seeds,
            variants,
            stage1_epochs,
            stage2_epochs,
            n_train,
            n_test,
            overrides,
        } => {
            let mut e = ExperimentConfig::desk();
            e.base.apply_overrides(&overrides)?;
            if let Some(s) = seeds {
                e.seeds = s;
            }
            if let Some(v) = variants {
                e.variants = v.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            }
            if let Some(n) = stage1_epochs {
                e.stage1_epochs = n;
            }
            if let Some(n) = stage2_epochs {
                e.stage2_epochs = n;
            }
            if let Some(n) = n_train {
                e.n_train = n;
            }
            if let Some(n) = n_test {
                e.n_test = n;
            }
            fs::create_dir_all(&out).at(&out)?;
            write_json(&out.join("experiment_config.json"), &e)?;
            let report = run_experiment(&e, &out, &mut log)?;
            for (v, s) in &report.summary {
                println!(
                    "{:<10} score {:.3}  background {:.3}  first object {:.3}  second object {:.3}",
                    v.name(),
                    s.score,
                    s.fidelity.get(&Attribute::Background).copied().unwrap_or(f64::NAN),
                    s.fidelity.get(&Attribute::FirstObject).copied().unwrap_or(f64::NAN),
                    s.fidelity.get(&Attribute::SecondObject).copied().unwrap_or(f64::NAN),
                );
            }
        }
    }
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `args`, runs the command and returns the exit code. Usage errors
/// print to stderr and return 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
