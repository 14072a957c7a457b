//! Command-line front end: simulation tables, gradient checks, Gabor bank
//! export, parameter accounting, synthetic data, training, prediction,
//! and evaluation. Exit codes: 0 success, 1 validation error, 2 I/O
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use gaborseg::error::{Error, Result};
use gaborseg::gabor::{init_gabor, materialize_bank};
use gaborseg::gradcheck;
use gaborseg::harness::{
    loss_trajectory, restore_params, sinusoid_curves, synth_dataset, train, Sample, SimConfig,
};
use gaborseg::io::{
    load_checkpoint, read_vol1, save_checkpoint, write_csv, write_vol1, Field, RunConfig, Volume,
};
use gaborseg::losses::hard_dice_metric;
use gaborseg::segnet::{build_network, KernelMode};

#[derive(Parser)]
#[command(
    name = "gaborseg",
    about = "3D segmentation with Gabor-parametric kernels and correlation losses",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the two-part sinusoidal kernel factor as CSV
    Sinusoid(SinusoidArgs),
    /// Tabulate the three losses on interpolated score volumes as CSV
    SimulateLoss(SimulateLossArgs),
    /// Run the analytic-versus-numeric gradient suites
    Gradcheck(GradcheckArgs),
    /// Materialize a random Gabor kernel bank to a VOL1 file
    Bank(BankArgs),
    /// Report trainable parameter counts for a network configuration
    CountParams(CountParamsArgs),
    /// Generate a synthetic labeled dataset
    SynthData(SynthDataArgs),
    /// Train a model on a synthetic dataset
    Train(TrainArgs),
    /// Predict a label volume from an image volume
    Predict(PredictArgs),
    /// Score a predicted label volume against ground truth
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SinusoidArgs {
    #[arg(long, default_value_t = 1.0)]
    a_re: f64,
    #[arg(long, default_value_t = 1.0)]
    a_im: f64,
    #[arg(long, default_value_t = 0.1)]
    f_re: f64,
    #[arg(long, default_value_t = 0.1)]
    f_im: f64,
    #[arg(long, default_value_t = 0.0)]
    psi: f64,
    #[arg(long, default_value_t = -10.0)]
    x_min: f64,
    #[arg(long, default_value_t = 10.0)]
    x_max: f64,
    #[arg(long, default_value_t = 201)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateLossArgs {
    /// Foreground cube side; repeat for several sizes
    #[arg(long = "m", required = true)]
    m: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    image_len: usize,
    #[arg(long, default_value_t = 101)]
    steps: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct BankArgs {
    #[arg(long)]
    c_in: usize,
    #[arg(long)]
    c_out: usize,
    #[arg(long, default_value_t = 7)]
    k: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountParamsArgs {
    /// JSON file holding a network configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the configured kernel mode
    #[arg(long)]
    mode: Option<String>,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 4)]
    labels: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON (network, loss, optimizer, seeds)
    #[arg(long)]
    config: PathBuf,
    /// Directory of VOL1 volumes produced by synth-data
    #[arg(long)]
    data_dir: PathBuf,
    /// Number of volumes held out for validation (taken from the end)
    #[arg(long, default_value_t = 0)]
    val_count: usize,
    /// Best-validation checkpoint destination
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV destination
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image volume (VOL1 real)
    #[arg(long)]
    input: PathBuf,
    /// Output label volume (VOL1 labels)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label volume
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label volume
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    labels: usize,
    /// Write the per-label CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sinusoid(a) => {
            let rows = sinusoid_curves(a.a_re, a.a_im, a.f_re, a.f_im, a.psi, (a.x_min, a.x_max), a.samples)?;
            let rows: Vec<Vec<Field>> = rows
                .into_iter()
                .map(|(x, v)| vec![Field::Real(x), Field::Real(v)])
                .collect();
            write_csv(&a.out, &["x", "value"], &rows)
        }
        Command::SimulateLoss(a) => {
            let cfg = SimConfig {
                image_len: a.image_len,
                m_list: a.m,
                steps: a.steps,
                seed: a.seed,
            };
            let rows: Vec<Vec<Field>> = loss_trajectory(&cfg)?
                .into_iter()
                .map(|r| {
                    vec![
                        Field::Int(r.m as i64),
                        Field::Real(r.t),
                        Field::Real(r.l_pcc),
                        Field::Real(r.l_dice),
                        Field::Real(r.l_ce),
                    ]
                })
                .collect();
            write_csv(&a.out, &["m", "t", "l_pcc", "l_dice", "l_ce"], &rows)
        }
        Command::Gradcheck(a) => {
            let report = gradcheck::run_all(a.seed)?;
            print!("{}", report.render());
            if report.all_pass() {
                Ok(())
            } else {
                Err(Error::Invalid("gradient checks failed".into()))
            }
        }
        Command::Bank(a) => {
            let bank = init_gabor::<f64>(a.c_in, a.c_out, a.k, a.seed)?;
            let grid = gaborseg::gabor::coordinate_grid(a.k)?;
            let kernels = materialize_bank(&bank, &grid)?;
            write_vol1(&a.out, &Volume::F64(kernels))
        }
        Command::CountParams(a) => {
            let text = std::fs::read_to_string(&a.config)?;
            let mut cfg: gaborseg::segnet::NetworkConfig = serde_json::from_str(&text)?;
            if let Some(mode) = a.mode {
                cfg.kernel_mode = KernelMode::from_str(&mode)?;
            }
            let model = build_network::<f64>(&cfg, 0)?;
            let json = serde_json::to_string_pretty(&model.count_params())?;
            match a.out {
                Some(path) => std::fs::write(path, json + "\n")?,
                None => println!("{}", json),
            }
            Ok(())
        }
        Command::SynthData(a) => {
            let set = synth_dataset(a.n, a.side, a.labels, a.seed)?;
            std::fs::create_dir_all(&a.out_dir)?;
            for (i, s) in set.iter().enumerate() {
                write_vol1(
                    &a.out_dir.join(format!("vol{:03}_image.vol", i)),
                    &Volume::F64(s.image.clone()),
                )?;
                write_vol1(
                    &a.out_dir.join(format!("vol{:03}_labels.vol", i)),
                    &Volume::Labels {
                        shape: s.image.shape().to_vec(),
                        data: s.labels.clone(),
                    },
                )?;
            }
            Ok(())
        }
        Command::Train(a) => {
            let cfg = RunConfig::from_file(&a.config)?;
            let set = read_dataset(&a.data_dir)?;
            if a.val_count >= set.len() {
                return Err(Error::Invalid(format!(
                    "validation count {} leaves no training volumes (dataset has {})",
                    a.val_count,
                    set.len()
                )));
            }
            let split = set.len() - a.val_count;
            let (train_set, val_set) = set.split_at(split);
            let mut model = build_network::<f64>(&cfg.network, cfg.init_seed)?;
            let mut train_cfg = cfg.train.clone();
            if train_cfg.augment.is_none() {
                train_cfg.augment = cfg.augment.clone();
            }
            let outcome = train(&mut model, train_set, val_set, cfg.loss, &train_cfg)?;
            if let Some(d) = &outcome.diagnostic {
                eprintln!("{}", d);
            }
            restore_params(&mut model, &outcome.best_params)?;
            save_checkpoint(&a.out, &model)?;
            if let Some(hist) = a.history {
                let rows: Vec<Vec<Field>> = outcome
                    .history
                    .iter()
                    .map(|r| {
                        vec![
                            Field::Int(r.epoch as i64),
                            Field::Real(r.train_loss),
                            Field::Real(r.val_dice),
                        ]
                    })
                    .collect();
                write_csv(&hist, &["epoch", "train_loss", "val_dice"], &rows)?;
            }
            if outcome.diverged {
                return Err(Error::Invalid("training diverged".into()));
            }
            Ok(())
        }
        Command::Predict(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let image = read_vol1(&a.input)?.as_f64()?;
            let labels = model.predict_labels(&image)?;
            write_vol1(
                &a.out,
                &Volume::Labels {
                    shape: image.shape().to_vec(),
                    data: labels,
                },
            )
        }
        Command::Evaluate(a) => {
            let pred = read_vol1(&a.pred)?;
            let truth = read_vol1(&a.truth)?;
            let (ps, pd) = pred.as_labels()?;
            let (ts, td) = truth.as_labels()?;
            if ps != ts {
                return Err(Error::Shape(format!(
                    "prediction shape {:?} does not match truth {:?}",
                    ps, ts
                )));
            }
            let dice = hard_dice_metric(pd, td, a.labels)?;
            let rows: Vec<Vec<Field>> = dice
                .iter()
                .enumerate()
                .map(|(l, &d)| vec![Field::Int(l as i64), Field::Real(d)])
                .collect();
            match a.out {
                Some(path) => write_csv(&path, &["label", "dice"], &rows),
                None => {
                    print!("{}", gaborseg::io::csv_string(&["label", "dice"], &rows)?);
                    Ok(())
                }
            }
        }
    }
}

/// Load `vol*_image.vol` / `vol*_labels.vol` pairs in name order.
fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with("_image.vol"))
                .unwrap_or(false)
        })
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::Invalid(format!(
            "no *_image.vol volumes found in {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(images.len());
    for img_path in images {
        let name = img_path.file_name().unwrap().to_str().unwrap();
        let lab_path = dir.join(name.replace("_image.vol", "_labels.vol"));
        let image = read_vol1(&img_path)?.as_f64()?;
        let labels_vol = read_vol1(&lab_path)?;
        let (shape, data) = labels_vol.as_labels()?;
        if shape != image.shape() {
            return Err(Error::Shape(format!(
                "label shape {:?} does not match image {:?} for {}",
                shape,
                image.shape(),
                name
            )));
        }
        out.push(Sample {
            image,
            labels: data.to_vec(),
        });
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
