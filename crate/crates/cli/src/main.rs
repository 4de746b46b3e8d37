//! `itcfn` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 invalid
//! configuration or arguments, 3 filesystem failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, ExitCode};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use itcfn::config::RunConfig;
use itcfn::mmg::Mmg;
use itcfn::synthdata::{fold_dir, generate_subjects, load_cohort, write_cohort, Cohort, CohortSummary};
use itcfn::tensor::{read_checkpoint, write_checkpoint, Checkpoint};
use itcfn::trainer::{
    derive_seed, fill_pet, fold_split, predict, run_fold, train_fusion, train_mmg, write_fusion_curve,
    write_mmg_curve, Ablation, FoldMetrics, FusionOptions, MetricsReport,
};
use itcfn::verify::{run_suite, Mutation};
use itcfn::Error;

#[derive(Parser)]
#[command(name = "itcfn", version, about = "Incomplete multimodal fusion on synthetic cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the cohort seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Data {
    /// Read the cohort from a `gen` output directory instead of regenerating it.
    #[arg(long)]
    cohort: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Print the default configuration and exit.
        #[arg(long)]
        print_defaults: bool,
    },
    /// Stage 1: train the missing-PET generator.
    TrainMmg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Train on this fold's training split only.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Stage 2: train the fusion classifier.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// Train on this fold's training split and evaluate on its test split.
        #[arg(long)]
        fold: Option<usize>,
        /// Generator checkpoint used to fill missing PET.
        #[arg(long)]
        mmg: Option<PathBuf>,
    },
    /// k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: Data,
        /// none, mmg_only, tcaf_only, mmg_tcaf or all; defaults to the config flags.
        #[arg(long)]
        ablation: Option<String>,
        /// Number of fold processes to run at once.
        #[arg(long, default_value_t = 1)]
        parallel_folds: usize,
        /// Run a single fold and write its record only.
        #[arg(long, hide = true)]
        fold: Option<usize>,
    },
    /// Run the property suite.
    Verify {
        /// Inject a known bug to check the suite catches it (focal-sign).
        #[arg(long)]
        mutate: Option<String>,
    },
}

enum Failure {
    Core(Error),
    Exit(u8, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Exit(3, format!("I/O error at {}: {e}", path.display()))
}

fn resolve(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn cohort_for(cfg: &RunConfig, data: &Data) -> Outcome<Cohort> {
    Ok(match &data.cohort {
        Some(dir) => load_cohort(dir)?,
        None => generate_subjects(&cfg.cohort)?,
    })
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

/// Adds the config hash to a checkpoint's JSON metadata.
fn stamp(mut ckpt: Checkpoint, hash: &str) -> Outcome<Checkpoint> {
    let mut meta: serde_json::Value = match &ckpt.metadata {
        Some(text) => serde_json::from_str(text).map_err(Error::from)?,
        None => serde_json::json!({}),
    };
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("config_hash".into(), hash.into());
    }
    ckpt.metadata = Some(serde_json::to_string(&meta).map_err(Error::from)?);
    Ok(ckpt)
}

/// Training indices and seed for an optional fold.
fn split(cohort: &Cohort, cfg: &RunConfig, fold: Option<usize>) -> Outcome<(Vec<usize>, Vec<usize>, u64)> {
    Ok(match fold {
        Some(k) => {
            let (train, test) = fold_split(cohort, cfg, k)?;
            (train, test, derive_seed(cfg.train.seed, &[k as u64]))
        }
        None => ((0..cohort.len()).collect(), Vec::new(), cfg.train.seed),
    })
}

#[derive(Serialize)]
struct GenSummary<'a> {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    summary: &'a CohortSummary,
}

fn cmd_gen(common: &Common, print_defaults: bool) -> Outcome {
    if print_defaults {
        print!("{}", RunConfig::default().to_toml());
        return Ok(());
    }
    let cfg = resolve(common)?;
    let out = cfg.output_dir.clone();
    let cohort = generate_subjects(&cfg.cohort)?;
    let summary = write_cohort(&cohort, &out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let record = GenSummary {
        config_hash: cfg.hash(),
        seed: cfg.cohort.seed,
        summary: &summary,
    };
    write_json(&out.join("cohort.json"), &record)?;
    println!(
        "wrote {} subjects ({} sMCI, {} pMCI, {} without PET) to {}",
        summary.n_subjects,
        summary.n_smci,
        summary.n_pmci,
        summary.n_missing_pet,
        out.display()
    );
    Ok(())
}

fn cmd_train_mmg(common: &Common, data: &Data, fold: Option<usize>) -> Outcome {
    let cfg = resolve(common)?;
    let cohort = cohort_for(&cfg, data)?;
    let (train, _, seed) = split(&cohort, &cfg, fold)?;
    let run = train_mmg(&cohort, &train, &cfg, seed, false)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let hash = cfg.hash();
    write_checkpoint(&stamp(run.mmg.to_checkpoint(seed), &hash)?, out.join("mmg.itck"))?;
    write_mmg_curve(out.join("mmg_loss.csv"), seed, &hash, &run.curve)?;
    let last = run.curve.last().expect("at least one epoch");
    println!(
        "stage 1 done: l1 {:.5} qua {:.5} per {:.5} adv {:.5}; checkpoint {}",
        last.l1,
        last.qua,
        last.per,
        last.adv,
        out.join("mmg.itck").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FusionSummary {
    mode: Ablation,
    seed: u64,
    config_hash: String,
    #[serde(flatten)]
    metrics: FoldMetrics,
}

fn cmd_train_fusion(common: &Common, data: &Data, fold: Option<usize>, mmg: Option<&Path>) -> Outcome {
    let cfg = resolve(common)?;
    let cohort = cohort_for(&cfg, data)?;
    let (train, test, seed) = split(&cohort, &cfg, fold)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let hash = cfg.hash();
    let generator = match mmg {
        Some(path) => Some(Mmg::from_checkpoint(&read_checkpoint(path)?)?.0),
        None if cfg.ablation.use_mmg => {
            eprintln!("no --mmg checkpoint given; training stage 1 first");
            let run = train_mmg(&cohort, &train, &cfg, seed, false)?;
            write_checkpoint(&stamp(run.mmg.to_checkpoint(seed), &hash)?, out.join("mmg.itck"))?;
            write_mmg_curve(out.join("mmg_loss.csv"), seed, &hash, &run.curve)?;
            Some(run.mmg)
        }
        None => None,
    };
    let mode = Ablation::from_flags(generator.is_some(), cfg.ablation.use_tcaf);
    let pets = fill_pet(&cohort, generator.as_ref())?;
    let run = train_fusion(&cohort, &pets, &train, &cfg, mode.fusion(), seed, FusionOptions::default())?;
    write_checkpoint(&stamp(run.model.to_checkpoint(seed), &hash)?, out.join("fusion.itck"))?;
    write_fusion_curve(out.join("fusion_loss.csv"), seed, &hash, &run.curve)?;
    let last = run.curve.last().expect("at least one epoch");
    println!("stage 2 ({}) done: total {:.5} focal {:.5}", mode.name(), last.total, last.focal);
    if let Some(k) = fold {
        let labels: Vec<u8> = test.iter().map(|&i| cohort.subjects[i].label.as_u8()).collect();
        let probs = predict(&run.model, &cohort, &pets, &test)?;
        let metrics = FoldMetrics::evaluate(k, train.len(), &probs, &labels)?;
        println!(
            "fold {k}: auc {:.4} acc {:.4} sen {:.4} spe {:.4} f1 {:.4}",
            metrics.auc, metrics.acc, metrics.sen, metrics.spe, metrics.f1
        );
        let summary = FusionSummary {
            mode,
            seed,
            config_hash: hash,
            metrics,
        };
        write_json(&out.join("metrics.json"), &summary)?;
    }
    Ok(())
}

/// Everything a fold process hands back to the aggregating parent.
#[derive(Serialize, Deserialize)]
struct FoldRecord {
    fold: usize,
    seed: u64,
    config_hash: String,
    mmg_checksum: Option<String>,
    metrics: Vec<ModeMetrics>,
}

#[derive(Serialize, Deserialize)]
struct ModeMetrics {
    mode: Ablation,
    #[serde(flatten)]
    metrics: FoldMetrics,
}

fn parse_modes(ablation: Option<&str>, cfg: &RunConfig) -> Outcome<Vec<Ablation>> {
    Ok(match ablation {
        Some("all") => Ablation::ALL.to_vec(),
        Some(name) => vec![name.parse()?],
        None => vec![Ablation::from_flags(cfg.ablation.use_mmg, cfg.ablation.use_tcaf)],
    })
}

fn run_one_fold(cohort: &Cohort, cfg: &RunConfig, fold: usize, modes: &[Ablation]) -> Outcome {
    eprintln!("fold {fold}: training");
    let outcome = run_fold(cohort, cfg, fold, modes, false)?;
    let seed = derive_seed(cfg.train.seed, &[fold as u64]);
    let hash = cfg.hash();
    let dir = fold_dir(&cfg.output_dir, fold);
    create_dir(&dir)?;
    if let Some(mmg) = &outcome.mmg {
        write_checkpoint(&stamp(mmg.to_checkpoint(seed), &hash)?, dir.join("mmg.itck"))?;
        write_mmg_curve(dir.join("mmg_loss.csv"), seed, &hash, &outcome.mmg_curve)?;
    }
    for (mode, curve) in &outcome.fusion_curves {
        write_fusion_curve(dir.join(format!("fusion_loss_{}.csv", mode.name())), seed, &hash, curve)?;
    }
    if let Some((before, after)) = &outcome.mmg_checksums {
        if before != after {
            return Err(Failure::Exit(1, format!("fold {fold}: stage 2 changed the generator weights")));
        }
    }
    let record = FoldRecord {
        fold,
        seed,
        config_hash: hash,
        mmg_checksum: outcome.mmg_checksums.map(|(_, after)| after),
        metrics: outcome
            .metrics
            .into_iter()
            .map(|(mode, metrics)| ModeMetrics { mode, metrics })
            .collect(),
    };
    write_json(&dir.join("fold.json"), &record)
}

fn spawn_fold(data: &Data, config: &Path, ablation: &str, fold: usize, out: &Path) -> Outcome<Child> {
    let exe = std::env::current_exe().map_err(|e| io_err(Path::new("current executable"), e))?;
    let mut cmd = Process::new(&exe);
    cmd.arg("cv")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--ablation")
        .arg(ablation)
        .arg("--fold")
        .arg(fold.to_string());
    if let Some(dir) = &data.cohort {
        cmd.arg("--cohort").arg(dir);
    }
    cmd.spawn().map_err(|e| io_err(&exe, e))
}

fn wait_fold(fold: usize, child: &mut Child) -> Outcome {
    let status = child.wait().map_err(|e| io_err(Path::new("fold process"), e))?;
    if status.success() {
        return Ok(());
    }
    let code = status.code().and_then(|c| u8::try_from(c).ok()).filter(|&c| c != 0).unwrap_or(1);
    Err(Failure::Exit(code, format!("fold {fold} process failed ({status})")))
}

fn cmd_cv(common: &Common, data: &Data, ablation: Option<&str>, parallel: usize, only: Option<usize>) -> Outcome {
    let cfg = resolve(common)?;
    let modes = parse_modes(ablation, &cfg)?;
    let k = cfg.train.k_folds;
    if let Some(fold) = only {
        if fold >= k {
            return Err(Error::InvalidArgument(format!("fold {fold} out of range for k = {k}")).into());
        }
    }
    if parallel == 0 {
        return Err(Error::InvalidArgument("--parallel-folds must be at least 1".into()).into());
    }
    let out = cfg.output_dir.clone();
    create_dir(&out)?;

    if let Some(fold) = only {
        let cohort = cohort_for(&cfg, data)?;
        return run_one_fold(&cohort, &cfg, fold, &modes);
    }

    let config_path = out.join("config.toml");
    write_text(&config_path, &cfg.to_toml())?;
    if parallel == 1 {
        let cohort = cohort_for(&cfg, data)?;
        if k > cohort.len() {
            return Err(Error::Config(format!("k_folds = {k} exceeds {} subjects", cohort.len())).into());
        }
        for fold in 0..k {
            run_one_fold(&cohort, &cfg, fold, &modes)?;
        }
    } else {
        let spec = ablation.map(str::to_owned).unwrap_or_else(|| modes[0].name().to_owned());
        let folds: Vec<usize> = (0..k).collect();
        for chunk in folds.chunks(parallel) {
            let mut running = Vec::with_capacity(chunk.len());
            for &fold in chunk {
                running.push((fold, spawn_fold(data, &config_path, &spec, fold, &out)?));
            }
            let mut first_err = None;
            for (fold, child) in &mut running {
                if let Err(e) = wait_fold(*fold, child) {
                    first_err.get_or_insert(e);
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
        }
    }

    let hash = cfg.hash();
    let mut records = Vec::with_capacity(k);
    for fold in 0..k {
        let path = fold_dir(&out, fold).join("fold.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let record: FoldRecord = serde_json::from_str(&text).map_err(Error::from)?;
        if record.config_hash != hash {
            return Err(Failure::Exit(1, format!("{} was written under a different config", path.display())));
        }
        records.push(record);
    }
    println!("{:<10} {:>7} {:>7} {:>7} {:>7} {:>7}", "mode", "auc", "acc", "sen", "spe", "f1");
    for &mode in &modes {
        let per_fold = records
            .iter()
            .map(|r| {
                r.metrics
                    .iter()
                    .find(|m| m.mode == mode)
                    .map(|m| m.metrics.clone())
                    .ok_or_else(|| Failure::Exit(1, format!("fold {} has no {} result", r.fold, mode.name())))
            })
            .collect::<Outcome<Vec<_>>>()?;
        let report = MetricsReport::aggregate(mode, cfg.train.seed, hash.clone(), per_fold)?;
        report.write(out.join(format!("{}.json", mode.name())))?;
        let m = &report.mean;
        println!(
            "{:<10} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            mode.name(),
            m.auc,
            m.acc,
            m.sen,
            m.spe,
            m.f1
        );
    }
    Ok(())
}

fn cmd_verify(mutate: Option<&str>) -> Outcome<bool> {
    let mutation = mutate.map(str::parse::<Mutation>).transpose()?;
    let results = run_suite(mutation);
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { common, print_defaults } => cmd_gen(common, *print_defaults),
        Command::TrainMmg { common, data, fold } => cmd_train_mmg(common, data, *fold),
        Command::TrainFusion {
            common,
            data,
            fold,
            mmg,
        } => cmd_train_fusion(common, data, *fold, mmg.as_deref()),
        Command::Cv {
            common,
            data,
            ablation,
            parallel_folds,
            fold,
        } => cmd_cv(common, data, ablation.as_deref(), *parallel_folds, *fold),
        Command::Verify { mutate } => match cmd_verify(mutate.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Exit(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::Config(_) | Error::InvalidArgument(_) => 2,
                e if e.is_io() => 3,
                _ => 1,
            })
        }
    }
}
