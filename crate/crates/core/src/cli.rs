//! Command-line front end: `gen-data`, `meta-train`, `eval`, `export-seg`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{self, CheckpointError};
use crate::data::io::fmt_sig12;
use crate::data::{load_shape, DataError, Dataset, Role, SyntheticKind};
use crate::metrics::SegReport;
use crate::psl::{argmax_rows, predict};
use crate::tensor::TensorError;
use crate::train::{adapt_to_category, meta_test, meta_train, RunConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "meta3dseg", version, about = "Few-shot 3D part segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural point-cloud corpus and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated synthetic kinds.
        #[arg(long, value_delimiter = ',', default_value = "barbell,table,lamp,mug")]
        categories: Vec<SyntheticKind>,
        /// Kinds held out as novel categories.
        #[arg(long, value_delimiter = ',')]
        novel: Vec<SyntheticKind>,
        /// Shapes per category, training and test together.
        #[arg(long, default_value_t = 20)]
        shapes_per_category: usize,
        /// How many of those go to the test split.
        #[arg(long, default_value_t = 0)]
        test_per_category: usize,
        #[arg(long, default_value_t = 512)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain and meta-train; writes a checkpoint and training logs.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-test a checkpoint on the manifest's novel categories.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Support shapes per task; defaults to the config's `k_shot`.
        #[arg(long)]
        shots: Option<usize>,
        /// Evaluate at 1, 5 and 10 shots.
        #[arg(long, conflicts_with = "shots")]
        sweep: bool,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write `x y z predicted_label` for every point of a shape file.
    ExportSeg {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        /// Category of the shape; looked up in the manifest or among the
        /// synthetic kinds.
        #[arg(long)]
        category: String,
        #[arg(long)]
        out: PathBuf,
        /// Adapt on support shapes of the category from this manifest first.
        #[arg(long, requires = "config")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        shots: Option<usize>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        Self::Train(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Train(e) => match e {
                TrainError::Config(_) | TrainError::Mode(_) => 1,
                TrainError::Data(_) | TrainError::Metric(_) | TrainError::QueryLeak => 2,
                TrainError::NonFinite(_) | TrainError::Tensor(TensorError::NonFinite { .. }) => 3,
                TrainError::Tensor(_) => 1,
            },
            CliError::Data(_) | CliError::Checkpoint(_) | CliError::Io { .. } => 2,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs a parsed command; returns what would go to standard output.
pub fn run(command: Command) -> Result<String, CliError> {
    match command {
        Command::GenData {
            out,
            categories,
            novel,
            shapes_per_category,
            test_per_category,
            points,
            seed,
        } => {
            if categories.is_empty() || shapes_per_category == 0 || points == 0 {
                return Err(CliError::Usage(
                    "need at least one category, shape and point".into(),
                ));
            }
            if test_per_category >= shapes_per_category {
                return Err(CliError::Usage(
                    "test_per_category must leave training shapes".into(),
                ));
            }
            if let Some(k) = novel.iter().find(|k| !categories.contains(k)) {
                return Err(CliError::Usage(format!(
                    "novel kind {k} is not among the categories"
                )));
            }
            let kinds: Vec<(SyntheticKind, Role)> = categories
                .iter()
                .map(|&k| {
                    (
                        k,
                        if novel.contains(&k) {
                            Role::Novel
                        } else {
                            Role::Base
                        },
                    )
                })
                .collect();
            let train = shapes_per_category - test_per_category;
            let ds = Dataset::synthetic(&kinds, train, test_per_category, points, seed);
            create_dir(&out)?;
            let manifest = ds.write(&out)?;
            Ok(format!(
                "wrote {} shapes and {}\n",
                ds.len(),
                manifest.display()
            ))
        }
        Command::MetaTrain { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = cfg
                .manifest
                .clone()
                .ok_or_else(|| TrainError::Config("config has no manifest".into()))?;
            let ds = Dataset::load(&manifest)?;
            let trained = meta_train(&ds, &cfg)?;
            create_dir(&out)?;
            checkpoint::save(&out.join("checkpoint.bin"), &trained.model)?;
            write_file(&out.join("train_log.csv"), trained.log.to_csv())?;
            write_file(&out.join("pretrain_log.csv"), trained.log.pretrain_csv())?;
            let mut msg = format!(
                "mode {}: {} pretraining steps, {} meta-training episodes\n",
                cfg.mode,
                trained.log.pretrain.len(),
                trained.log.rows.len()
            );
            if let (Some(first), Some(last)) = (trained.log.rows.first(), trained.log.rows.last()) {
                let _ = writeln!(
                    msg,
                    "query loss {:.4} -> {:.4}",
                    first.query_loss, last.query_loss
                );
            }
            let _ = writeln!(
                msg,
                "checkpoint written to {}",
                out.join("checkpoint.bin").display()
            );
            Ok(msg)
        }
        Command::Eval {
            checkpoint: ck,
            manifest,
            config,
            shots,
            sweep,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model = checkpoint::load(&ck)?;
            if model.bundle.plan != cfg.layers {
                return Err(
                    TrainError::Config("checkpoint layer plan differs from config".into()).into(),
                );
            }
            let ds = Dataset::load(&manifest)?;
            let shot_list = if sweep {
                vec![1, 5, 10]
            } else {
                vec![shots.unwrap_or(cfg.k_shot)]
            };
            let mut reports = Vec::new();
            for &k in &shot_list {
                reports.push((k, meta_test(&ds, &model, &cfg, k)?));
            }
            let csv = if sweep {
                sweep_csv(&reports)
            } else {
                reports[0].1.to_csv()
            };
            if let Some(path) = out {
                write_file(&path, &csv)?;
            }
            let mut text = String::new();
            for (k, r) in &reports {
                let _ = writeln!(text, "mode {} | {k}-shot", model.mode);
                text.push_str(&r.summary());
            }
            if sweep {
                text.push_str(&csv);
            }
            Ok(text)
        }
        Command::ExportSeg {
            checkpoint: ck,
            shape,
            category,
            out,
            manifest,
            config,
            shots,
        } => {
            let model = checkpoint::load(&ck)?;
            let (bundle, schema) = match (manifest, config) {
                (Some(manifest), Some(config)) => {
                    let cfg = RunConfig::load(&config)?;
                    let ds = Dataset::load(&manifest)?;
                    let schema = ds
                        .category(&category)
                        .ok_or_else(|| DataError::UnknownCategory(category.clone()))?
                        .schema
                        .clone();
                    let (bundle, _) = adapt_to_category(
                        &ds,
                        &model,
                        &cfg,
                        &category,
                        shots.unwrap_or(cfg.k_shot),
                        0,
                    )?;
                    (bundle, schema)
                }
                _ => {
                    let kind: SyntheticKind = category
                        .parse()
                        .map_err(|_| DataError::UnknownCategory(category.clone()))?;
                    (model.bundle.clone(), kind.schema())
                }
            };
            let cloud = load_shape(&shape, &category, None)?;
            let normalized = cloud.normalize();
            let logits = predict(&normalized.coords(), &bundle)?.logits;
            let map = crate::data::LabelMap::from_parts(schema.parts.iter().copied());
            let mut text = String::with_capacity(cloud.len() * 48);
            for (p, d) in cloud.points.iter().zip(argmax_rows(&logits)) {
                // slots past the category's parts fall back to its first part
                let label = map.to_global(d).unwrap_or(schema.parts[0]);
                let _ = writeln!(
                    text,
                    "{} {} {} {label}",
                    fmt_sig12(p[0]),
                    fmt_sig12(p[1]),
                    fmt_sig12(p[2])
                );
            }
            write_file(&out, text)?;
            Ok(format!(
                "wrote {} labelled points to {}\n",
                cloud.len(),
                out.display()
            ))
        }
    }
}

/// `shots,category,miou,accuracy` rows per category plus a `mean` row.
pub fn sweep_csv(reports: &[(usize, SegReport)]) -> String {
    let mut out = String::from("shots,category,miou,accuracy\n");
    for (k, r) in reports {
        for (name, c) in &r.categories {
            let _ = writeln!(out, "{k},{name},{:.6},{:.6}", c.miou, c.accuracy);
        }
        let _ = writeln!(out, "{k},mean,{:.6},{:.6}", r.mean_miou, r.mean_accuracy);
    }
    out
}

/// Parses arguments, runs, prints; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
