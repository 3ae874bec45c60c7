use clap::{Parser, Subcommand};
use edter::error::exit;
use edter::eval::evaluate;
use edter::io::{checkpoint, dataset, epfm, netpbm, synth, RunConfig};
use edter::pipeline::{EdgeMap, Edter};
use edter::training::{losses_csv, train_two_phase};
use edter::{gradsuite, Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "edter", version, about = "Two-stage transformer edge detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-phase training; writes model.ckpt, losses.csv and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Log every N iterations to stderr (0 = silent).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Edge map of one image, or of every image in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// `.epfm` writes raw floats, anything else 8-bit PGM. For a
        /// directory input this is a directory.
        #[arg(long)]
        out: PathBuf,
        /// Multi-scale averaging.
        #[arg(long)]
        ms: bool,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1.0,1.5")]
        scales: Vec<f64>,
        /// Directory mode: write `.epfm` instead of `.pgm`.
        #[arg(long)]
        raw: bool,
    },
    /// Benchmark predictions against annotator maps.
    Eval {
        /// `NAME.epfm` or `NAME.pgm` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// `NAME/*.pgm` annotator maps or a single `NAME.pgm`.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = edter::eval::DEFAULT_TOL)]
        tol: f64,
        /// Where pr_curve.csv and summary.txt go.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and the toy model.
    Gradcheck {
        /// Random coordinates per model tensor, besides a directional check.
        #[arg(long, default_value_t = 2)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip the full-model check.
        #[arg(long)]
        layers_only: bool,
    },
    /// Synthetic multi-annotator dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints every configuration key with its default.
    Config,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn train(config: &Path, out: Option<PathBuf>, log_every: usize) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::io(config, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(o) = out {
        cfg.out = o;
    }
    let items = dataset::load_dataset(&cfg.data)?;
    let samples = items
        .iter()
        .map(|it| it.sample(cfg.train.eta, cfg.train.ignore_band))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Edter::new(&cfg.model, cfg.train.seed)?;
    let report = train_two_phase(&mut model, &samples, &cfg.train, |r| {
        if log_every > 0 && r.iteration % log_every == 0 {
            eprintln!("stage {} iteration {} loss {:.6}", r.stage, r.iteration, r.loss);
        }
    })?;
    mkdir(&cfg.out)?;
    checkpoint::save(&cfg.out.join("model.ckpt"), &model)?;
    write(&cfg.out.join("losses.csv"), &losses_csv(&report.losses))?;
    write(&cfg.out.join("config.txt"), &cfg.to_text())?;
    println!("wrote {}", cfg.out.join("model.ckpt").display());
    Ok(())
}

fn save_map(path: &Path, map: &EdgeMap) -> Result<()> {
    if path.extension().is_some_and(|e| e == "epfm") {
        epfm::save(path, map)
    } else {
        netpbm::save_edge_map(path, map)
    }
}

fn infer(ckpt: &Path, input: &Path, out: &Path, ms: bool, scales: &[f64], raw: bool) -> Result<()> {
    let model = checkpoint::load(ckpt, None)?;
    let run = |img: &Path| -> Result<EdgeMap> {
        let image = netpbm::load_image(img)?;
        if ms {
            model.infer_multiscale(&image, scales)
        } else {
            model.infer(&image)
        }
    };
    if input.is_dir() {
        mkdir(out)?;
        let ext = if raw { "epfm" } else { "pgm" };
        for img in dataset::list_files(input, &["ppm", "pgm"])? {
            save_map(&out.join(format!("{}.{ext}", dataset::stem(&img))), &run(&img)?)?;
        }
        Ok(())
    } else {
        save_map(out, &run(input)?)
    }
}

fn eval(pred: &Path, gt: &Path, tol: f64, out: &Path) -> Result<()> {
    let items = dataset::load_predictions(pred, gt)?;
    let report = evaluate(&items, tol)?;
    mkdir(out)?;
    write(&out.join("pr_curve.csv"), &report.to_csv())?;
    write(&out.join("summary.txt"), &format!("{}\n", report.summary()))?;
    println!("{}", report.summary());
    Ok(())
}

fn gradcheck(coords: usize, seed: u64, layers_only: bool) -> Result<bool> {
    let line = |c: &gradsuite::CaseResult| {
        println!(
            "{} {} rel_err={:.3e} ({:.2}s)",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.rel_error,
            c.seconds
        )
    };
    let mut results = gradsuite::layer_suite();
    results.iter().for_each(line);
    if !layers_only {
        results.extend(gradsuite::model_suite(
            &edter::pipeline::ModelConfig::toy(64),
            coords,
            seed,
            line,
        )?);
    }
    let failed = results.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {} failed", results.len(), failed);
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out, log_every } => train(&config, out, log_every)?,
        Command::Infer {
            ckpt,
            input,
            out,
            ms,
            scales,
            raw,
        } => infer(&ckpt, &input, &out, ms, &scales, raw)?,
        Command::Eval { pred, gt, tol, out } => eval(&pred, &gt, tol, &out)?,
        Command::Gradcheck {
            coords,
            seed,
            layers_only,
        } => {
            if !gradcheck(coords, seed, layers_only)? {
                return Ok(exit::NUMERIC);
            }
        }
        Command::Synth { n, seed, size, out } => synth::gen_synthetic(&out, n, seed, size)?,
        Command::Config => print!("{}", RunConfig::default_text()),
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
