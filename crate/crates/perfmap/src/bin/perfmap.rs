//! Command-line front end over the perfusion-map pipeline: synthetic data
//! generation, preprocessing, split assignment, training, prediction,
//! evaluation, ablations, shift-robustness sweeps, and figure panels.
//!
//! Every run exits 0 on success; any failure prints a single
//! `error: <message>` line on stderr and exits nonzero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use perfmap::data::{self, case_io, container, CaseRecord, DatasetManifest, Split};
use perfmap::harness::{self, Dataset, RunConfig};
use perfmap::model::{checkpoint, net};
use perfmap::phantom::generate_case;
use perfmap::preprocess;
use perfmap::{Error, Result};

#[derive(Parser)]
#[command(
    name = "perfmap",
    version,
    about = "Voxelwise perfusion-map regression on synthetic DSC-MRI data"
)]
struct Cli {
    /// UTF-8 key=value config file(s), applied in order; keys are dotted
    /// (model., train., phantom., preprocess.).
    #[arg(long, global = true, value_name = "FILE")]
    config: Vec<PathBuf>,

    /// Overrides every stage seed (data generation, splitting, training).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory run outputs are written into.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic-data operations.
    #[command(subcommand)]
    Phantom(PhantomCommand),

    /// Pads, standardizes, and smooths every case of a dataset.
    Preprocess {
        /// Directory of raw case subdirectories.
        #[arg(long, value_name = "DIR")]
        cases: PathBuf,
        /// Overwrite existing case directories in the output.
        #[arg(long)]
        force: bool,
    },

    /// Assigns cases to train/val/test and writes `manifest.tsv`.
    Split {
        /// Directory of case subdirectories.
        #[arg(long, value_name = "DIR")]
        cases: PathBuf,
        /// Comma-separated train,val,test fractions summing to 1.
        #[arg(long, default_value = "0.6,0.2,0.2")]
        ratios: String,
    },

    /// Trains a model and saves the best-validation checkpoint.
    Train {
        /// Directory of preprocessed case subdirectories.
        #[arg(long, value_name = "DIR")]
        cases: PathBuf,
        /// Split manifest written by `split`.
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },

    /// Predicts one case's map, uncertainty, and variance volumes.
    Predict {
        /// Checkpoint directory written by `train`.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// One preprocessed case directory.
        #[arg(long, value_name = "DIR")]
        case: PathBuf,
    },

    /// Scores a checkpoint on a dataset split and writes `report.tsv`.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        cases: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Which cases to score: train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
    },

    /// Trains every model variant and writes `ablations.tsv`.
    Ablate {
        #[arg(long, value_name = "DIR")]
        cases: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
    },

    /// Scores a checkpoint under temporal shifts of the input.
    ShiftSweep {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        cases: PathBuf,
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Which cases to score: train, val, test, or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Shifts in frames: comma-separated values and/or `lo..hi`
        /// inclusive ranges, e.g. `-5..10` or `-5,0,5,10`.
        #[arg(long, default_value = "-5..10", allow_hyphen_values = true)]
        shifts: String,
    },

    /// Renders target | prediction | variance panels for one slice.
    Panels {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        case: PathBuf,
        /// Slice index to render.
        #[arg(long, default_value_t = 0)]
        slice: usize,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Generates the configured number of synthetic cases with targets.
    Generate {
        /// Overwrite existing case directories in the output.
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let msg = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("bad arguments")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
        // --help / --version go to stdout and exit 0.
        Err(e) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    for path in &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.phantom.base.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let out_dir = &cli.out_dir;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;

    match cli.command {
        Command::Phantom(PhantomCommand::Generate { force }) => generate(&cfg, out_dir, force),
        Command::Preprocess { cases, force } => run_preprocess(&cfg, &cases, out_dir, force),
        Command::Split { cases, ratios } => split(&cfg, &cases, &ratios, out_dir),
        Command::Train { cases, manifest } => train(&cfg, &cases, &manifest, out_dir),
        Command::Predict { checkpoint, case } => predict(&checkpoint, &case, out_dir),
        Command::Evaluate {
            checkpoint,
            cases,
            manifest,
            split,
        } => evaluate(&checkpoint, &cases, &manifest, &split, out_dir),
        Command::Ablate { cases, manifest } => ablate(&cfg, &cases, &manifest, out_dir),
        Command::ShiftSweep {
            checkpoint,
            cases,
            manifest,
            split,
            shifts,
        } => shift_sweep(&checkpoint, &cases, &manifest, &split, &shifts, out_dir),
        Command::Panels {
            checkpoint,
            case,
            slice,
        } => panels(&checkpoint, &case, slice, out_dir),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

fn generate(cfg: &RunConfig, out_dir: &Path, force: bool) -> Result<()> {
    for index in 0..cfg.phantom.count {
        let (case, _truth) = generate_case(&cfg.phantom, index)?;
        data::write_case(&case, &out_dir.join(&case.case_id), force)?;
    }
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "generated {} cases into {}",
        cfg.phantom.count,
        out_dir.display()
    );
    Ok(())
}

fn run_preprocess(cfg: &RunConfig, cases: &Path, out_dir: &Path, force: bool) -> Result<()> {
    let ids = case_io::list_case_ids(cases)?;
    if ids.is_empty() {
        return Err(Error::Invalid(format!(
            "no cases found under {}",
            cases.display()
        )));
    }
    for id in &ids {
        let case = data::read_case(&cases.join(id))?;
        let processed = preprocess::preprocess_case(&case, &cfg.preprocess)?;
        data::write_case(&processed, &out_dir.join(id), force)?;
    }
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    println!("preprocessed {} cases into {}", ids.len(), out_dir.display());
    Ok(())
}

fn split(cfg: &RunConfig, cases: &Path, ratios: &str, out_dir: &Path) -> Result<()> {
    let parts: Vec<&str> = ratios.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "expected three comma-separated ratios, got {ratios:?}"
        )));
    }
    let mut r = [0.0f64; 3];
    for (slot, p) in r.iter_mut().zip(&parts) {
        *slot = p
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio {p:?}")))?;
    }
    let ids = case_io::list_case_ids(cases)?;
    let manifest = data::assign_splits(&ids, (r[0], r[1], r[2]), cfg.train.seed)?;
    let path = out_dir.join("manifest.tsv");
    manifest.save(&path)?;
    println!(
        "assigned {} cases ({} train / {} val / {} test) in {}",
        manifest.cases.len(),
        manifest.ids_in(Split::Train).len(),
        manifest.ids_in(Split::Val).len(),
        manifest.ids_in(Split::Test).len(),
        path.display()
    );
    Ok(())
}

fn train_log_tsv(outcome: &harness::TrainOutcome) -> String {
    let mut log = String::from("epoch\tlr\ttrain_loss\tval_maec\n");
    log.push_str(&format!("0\t-\t-\t{}\n", outcome.initial_val_maec));
    for e in &outcome.epochs {
        log.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.epoch, e.lr, e.train_loss, e.val_maec
        ));
    }
    log
}

fn train(cfg: &RunConfig, cases: &Path, manifest: &Path, out_dir: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest)?;
    let dataset = Dataset::load(cases, &manifest)?;
    let outcome = harness::train(
        &dataset.split(Split::Train),
        &dataset.split(Split::Val),
        &cfg.model,
        &cfg.train,
        &cfg.preprocess,
    )?;
    let ckpt_dir = out_dir.join("checkpoint");
    checkpoint::save(&ckpt_dir, &outcome.params, &cfg.model)?;
    write_text(&out_dir.join("train_log.tsv"), &train_log_tsv(&outcome))?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    let best_val = if outcome.best_epoch == 0 {
        outcome.initial_val_maec
    } else {
        outcome.epochs[outcome.best_epoch - 1].val_maec
    };
    println!(
        "trained {} epochs; best_epoch={} val_maec={} checkpoint={}",
        outcome.epochs.len(),
        outcome.best_epoch,
        best_val,
        ckpt_dir.display()
    );
    Ok(())
}

fn predict(ckpt: &Path, case_dir: &Path, out_dir: &Path) -> Result<()> {
    let (params, model_cfg) = checkpoint::load::<f32>(ckpt)?;
    let case = data::read_case(case_dir)?;
    let (pred, seconds) = harness::predict_case(&case, &params, &model_cfg)?;
    container::write_f32(
        &out_dir.join("p_hat.pfsn"),
        pred.p_hat.data().view().into_dyn(),
    )?;
    container::write_f32(&out_dir.join("b_hat.pfsn"), pred.b_hat.view().into_dyn())?;
    container::write_f32(&out_dir.join("sigma2.pfsn"), pred.sigma2.view().into_dyn())?;
    println!(
        "predicted {} for case {} in {seconds:.3}s -> {}",
        model_cfg.target,
        case.case_id,
        out_dir.display()
    );
    Ok(())
}

/// Loads the dataset and returns the cases of the requested split
/// (`all` keeps every case).
fn load_split_cases(cases: &Path, manifest: &Path, split: &str) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest)?;
    let mut dataset = Dataset::load(cases, &manifest)?;
    if split != "all" {
        let wanted: Split = split.parse()?;
        dataset.cases.retain(|c| c.split == wanted);
        if dataset.cases.is_empty() {
            return Err(Error::Invalid(format!("the {wanted} split is empty")));
        }
    }
    Ok(dataset)
}

fn evaluate(ckpt: &Path, cases: &Path, manifest: &Path, split: &str, out_dir: &Path) -> Result<()> {
    let (params, model_cfg) = checkpoint::load::<f32>(ckpt)?;
    let dataset = load_split_cases(cases, manifest, split)?;
    let refs: Vec<&CaseRecord> = dataset.cases.iter().collect();
    let report = harness::evaluate(&refs, &params, &model_cfg, &model_cfg.loss_config())?;
    write_text(&out_dir.join("report.tsv"), &report.to_tsv())?;
    write_text(&out_dir.join("timings.tsv"), &report.timings_tsv())?;
    println!(
        "evaluated {} cases: mean_maec={} pooled_maec={}",
        report.cases.len(),
        report.mean_maec,
        report.pooled_maec
    );
    Ok(())
}

fn ablate(cfg: &RunConfig, cases: &Path, manifest: &Path, out_dir: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest)?;
    let dataset = Dataset::load(cases, &manifest)?;
    let rows = harness::run_ablations(&dataset, &cfg.model, &cfg.train, &cfg.preprocess)?;
    write_text(&out_dir.join("ablations.tsv"), &harness::ablation_tsv(&rows))?;
    write_text(&out_dir.join("config.txt"), &cfg.to_text())?;
    for row in &rows {
        println!(
            "variant {} ({}): val_maec={} test_maec={}",
            row.variant,
            row.variant.label(),
            row.val_maec,
            row.test_maec
        );
    }
    Ok(())
}

/// Parses `-5..10` inclusive ranges and comma-separated values.
fn parse_shifts(text: &str) -> Result<Vec<i64>> {
    let mut shifts = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: i64 = lo
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad shift range {part:?}")))?;
            let hi: i64 = hi
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad shift range {part:?}")))?;
            if lo > hi {
                return Err(Error::Config(format!("shift range {part:?} is inverted")));
            }
            shifts.extend(lo..=hi);
        } else {
            shifts.push(
                part.parse()
                    .map_err(|_| Error::Config(format!("bad shift {part:?}")))?,
            );
        }
    }
    if shifts.is_empty() {
        return Err(Error::Config("no shifts given".to_string()));
    }
    Ok(shifts)
}

fn shift_sweep(
    ckpt: &Path,
    cases: &Path,
    manifest: &Path,
    split: &str,
    shifts: &str,
    out_dir: &Path,
) -> Result<()> {
    let (params, model_cfg) = checkpoint::load::<f32>(ckpt)?;
    let dataset = load_split_cases(cases, manifest, split)?;
    let refs: Vec<&CaseRecord> = dataset.cases.iter().collect();
    let shifts = parse_shifts(shifts)?;
    let rows = harness::shift_sweep(&refs, &params, &model_cfg, &model_cfg.loss_config(), &shifts)?;
    let mut tsv = String::from("shift\tmean_maec\n");
    for (k, maec) in &rows {
        tsv.push_str(&format!("{k}\t{maec}\n"));
    }
    write_text(&out_dir.join("shift_sweep.tsv"), &tsv)?;
    for (k, maec) in &rows {
        println!("shift {k:+}: mean_maec={maec}");
    }
    Ok(())
}

fn panels(ckpt: &Path, case_dir: &Path, slice: usize, out_dir: &Path) -> Result<()> {
    let (params, model_cfg) = checkpoint::load::<f32>(ckpt)?;
    let case = data::read_case(case_dir)?;
    let pred = net::forward::<f32>(&case, &params, &model_cfg)?;
    let path = out_dir.join("panels.png");
    harness::emit_panels(&case, &pred, &model_cfg, slice, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn shift_lists_and_ranges_parse() {
        assert_eq!(parse_shifts("-2..1").unwrap(), vec![-2, -1, 0, 1]);
        assert_eq!(parse_shifts("-5,0,10").unwrap(), vec![-5, 0, 10]);
        assert_eq!(parse_shifts("0..0,7").unwrap(), vec![0, 7]);
        assert!(parse_shifts("5..1").is_err());
        assert!(parse_shifts("abc").is_err());
        assert!(parse_shifts("").is_err());
    }
}
