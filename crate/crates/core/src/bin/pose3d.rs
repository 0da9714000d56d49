use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pose3d::config::KeyValues;
use pose3d::eval::{evaluate, gradcheck, run_ablation};
use pose3d::model::{Model, NetworkConfig, Preset, Variant};
use pose3d::synth::{generate, read_dataset, write_dataset, DatasetFile, Split, SynthConfig};
use pose3d::tensor::{Checkpoint, Real};
use pose3d::train::{train, LogRecord, TrainConfig};
use pose3d::{Error, Result};

#[derive(Parser)]
#[command(name = "pose3d", about = "Synthetic-data training and evaluation for monocular 3D pose regression")]
struct Cli {
    /// Master seed for data generation, initialisation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render train and test corpora into <out>/train.p3d and <out>/test.p3d.
    Gen {
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant; writes checkpoints and train_log.csv into <out>.
    Train {
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// key = value file with network and optimiser overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-action MPJPE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV destination; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all four variants for every seed.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Receives ablation.csv and one artifact directory per run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks; exit status 0 iff all pass.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        repeats: u64,
    },
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
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_config(path: Option<&Path>, preset: Preset, seed: Option<u64>) -> Result<(NetworkConfig, TrainConfig)> {
    let mut kv = match path {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::empty(),
    };
    let parsed = (|| {
        let net = NetworkConfig::from_kv(&mut kv, preset)?;
        let tc = TrainConfig::from_kv(&mut kv, net.preset)?;
        Ok((net, tc))
    })();
    // Range checks do not know the file they came from.
    let (net, mut tc) = parsed.map_err(|e| match (e, path) {
        (Error::Config(m), Some(p)) if !m.contains(&*p.to_string_lossy()) => Error::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })?;
    kv.finish()?;
    if let Some(s) = seed {
        tc.seed = s;
    }
    Ok((net, tc))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })
}

fn print_record(r: &LogRecord) {
    match r.test_mpjpe {
        Some(m) => println!("epoch {:>3} iter {:>6}  test loss2d {:.4} loss3d {:.5}  MPJPE {:.2} mm", r.epoch, r.iter, r.loss_2d, r.loss_3d, m),
        None => println!("epoch {:>3} iter {:>6}  lr {:.5}  loss2d {:.4} loss3d {:.5}", r.epoch, r.iter, r.lr, r.loss_2d, r.loss_3d),
    }
}

fn run(cli: Cli) -> Result<u8> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Gen { train, test, out } => {
            let synth = match cli.preset {
                Preset::Desk => SynthConfig::desk(),
                Preset::Paper => SynthConfig::paper(),
            };
            let s = seed.unwrap_or(0);
            let train_set = generate(&synth, Split::Train, train, s)?;
            let test_set = generate(&synth, Split::Test, test, s)?;
            create_dir(&out)?;
            write_dataset(&train_set, out.join("train.p3d"))?;
            write_dataset(&test_set, out.join("test.p3d"))?;
            println!(
                "wrote {} train (subjects {:?}) and {} test (subjects {:?}) samples of {}x{} to {}",
                train,
                Split::Train.subjects(),
                test,
                Split::Test.subjects(),
                synth.image_size,
                synth.image_size,
                out.display()
            );
            Ok(0)
        }
        Cmd::Train { variant, config, train: tr, test, out } => {
            let (net, tc) = run_config(config.as_deref(), cli.preset, seed)?;
            let train_set = read_dataset(&tr)?;
            let test_set = read_dataset(&test)?;
            create_dir(&out)?;
            match cli.precision {
                Precision::F32 => train_cmd::<f32>(&net, &tc, variant, &train_set, &test_set, &out),
                Precision::F64 => train_cmd::<f64>(&net, &tc, variant, &train_set, &test_set, &out),
            }
        }
        Cmd::Eval { checkpoint, data, out } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let data = read_dataset(&data)?;
            let report = match cli.precision {
                Precision::F32 => eval_cmd::<f32>(&ck, &data, &checkpoint)?,
                Precision::F64 => eval_cmd::<f64>(&ck, &data, &checkpoint)?,
            };
            println!("{report}");
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv()).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
            }
            Ok(0)
        }
        Cmd::Ablate { train: tr, test, seeds, config, out } => {
            let (net, tc) = run_config(config.as_deref(), cli.preset, None)?;
            let train_set = read_dataset(&tr)?;
            let test_set = read_dataset(&test)?;
            create_dir(&out)?;
            let mut progress = |v: Variant, s: u64, r: &LogRecord| {
                if let Some(m) = r.test_mpjpe {
                    println!("{v} seed {s}: epoch {} MPJPE {m:.2} mm", r.epoch);
                }
            };
            let report = match cli.precision {
                Precision::F32 => run_ablation::<f32>(&net, &tc, &train_set, &test_set, &seeds, Some(&out), &mut progress)?,
                Precision::F64 => run_ablation::<f64>(&net, &tc, &train_set, &test_set, &seeds, Some(&out), &mut progress)?,
            };
            let path = out.join("ablation.csv");
            std::fs::write(&path, report.to_csv()).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
            println!("{report}");
            let failed: Vec<String> = report
                .cells
                .iter()
                .filter_map(|c| c.result.as_ref().err().map(|e| format!("{} seed {}: {e}", c.variant, c.seed)))
                .collect();
            for f in &failed {
                eprintln!("failed: {f}");
            }
            Ok(if failed.is_empty() { 0 } else { 3 })
        }
        Cmd::Gradcheck { config, variant, repeats } => {
            if cli.precision != Precision::F64 {
                return Err(Error::Config("gradient checks need --precision f64".into()));
            }
            let (net, _) = run_config(config.as_deref(), cli.preset, None)?;
            let first = seed.unwrap_or(0);
            let mut ok = true;
            for s in first..first + repeats {
                for (name, rep) in gradcheck::layer_checks(s)? {
                    println!("seed {s} {name}: max rel error {:.3e} (tol {:.0e}) {}", rep.max_rel_error(), rep.tolerance, verdict(rep.passed()));
                    ok &= rep.passed();
                }
                let rep = gradcheck::network_check(&net, variant, s)?;
                println!("seed {s} network ({variant}):\n{rep}");
                ok &= rep.passed();
                if variant.injects_probs() {
                    let model: Model<f64> = Model::build(&net, variant, &mut ChaCha8Rng::seed_from_u64(s))?;
                    let gap = gradcheck::isolation_gap(&model, gradcheck::NETWORK_BATCH, s)?;
                    println!("seed {s} stop-gradient: max 2D-branch gradient change {gap:.3e} {}", verdict(gap <= 1e-12));
                    ok &= gap <= 1e-12;
                }
            }
            Ok(if ok { 0 } else { 3 })
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn train_cmd<T: Real>(
    net: &NetworkConfig,
    tc: &TrainConfig,
    variant: Variant,
    train_set: &DatasetFile,
    test_set: &DatasetFile,
    out: &Path,
) -> Result<u8> {
    let model: Model<T> = Model::build(net, variant, &mut ChaCha8Rng::seed_from_u64(tc.seed))?;
    println!("{variant}: {} parameters, {} root head(s)", model.parameter_count(), model.head_count());
    let outcome = train(model, train_set, test_set, tc, Some(out), &mut print_record)?;
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(0)
}

fn eval_cmd<T: Real>(ck: &Checkpoint, data: &DatasetFile, path: &Path) -> Result<pose3d::eval::EvalReport> {
    let (model, torso) = Model::<T>::from_checkpoint(ck)?;
    let torso = torso.ok_or_else(|| Error::Config(format!("{}: checkpoint has no torso reference", path.display())))?;
    evaluate(&model, data, &torso)
}
