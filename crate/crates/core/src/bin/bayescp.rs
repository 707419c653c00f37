use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bayescp::conformal::ScoreKind;
use bayescp::data::save_csv;
use bayescp::harness::{
    self, calibrate_cell, calibration_indices, method_outputs, prepare_data, train_all, write_outputs,
    ExperimentConfig, SetMethod,
};
use bayescp::inference::{read_checkpoint, write_checkpoint, Checkpoint};
use bayescp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bayescp",
    version,
    about = "Conformal prediction sets over approximate Bayesian neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/cal/test partitions and shifted test sets as CSV.
    GenerateData(Common),
    /// Train every configured method and write one checkpoint per method.
    Train(Common),
    /// Fit conformal thresholds from saved checkpoints.
    Calibrate(Common),
    /// Evaluate saved checkpoints and write the reports.
    Evaluate(Common),
    /// Generate data, train, calibrate and evaluate.
    RunAll(Common),
    /// Report credible-set coverage on the calibration set per method and alpha.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the error tolerances (repeatable).
    #[arg(long = "alpha")]
    alphas: Vec<f64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.alphas.is_empty() {
            cfg.experiment.alphas = self.alphas.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(Error::Config("--jobs must be >= 1".into()));
            }
            // only fails if a pool already exists, which cannot happen here
            let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
        }
        Ok(cfg)
    }
}

fn checkpoint_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("checkpoints").join(format!("{name}.ckpt"))
}

fn save_checkpoints(cfg: &ExperimentConfig, ckpts: &[Checkpoint]) -> Result<()> {
    let dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for (m, c) in cfg.methods.iter().zip(ckpts) {
        let p = checkpoint_path(&cfg.output_dir, &m.name);
        write_checkpoint(&p, c)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn load_checkpoints(cfg: &ExperimentConfig) -> Result<Vec<Checkpoint>> {
    cfg.methods
        .iter()
        .map(|m| read_checkpoint(checkpoint_path(&cfg.output_dir, &m.name)))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn generate_data(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let dir = cfg.output_dir.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    save_csv(&data.train, &dir.join("train.csv"))?;
    save_csv(&data.val, &dir.join("val.csv"))?;
    save_csv(&data.cal_pool, &dir.join("cal.csv"))?;
    for ds in &data.test_variants {
        let prov = ds.provenance();
        let name = if prov.intensity == 0 {
            "test.csv".to_string()
        } else {
            format!("test_{}_{}.csv", prov.shift_kind, prov.intensity)
        };
        save_csv(ds, &dir.join(name))?;
    }
    eprintln!("wrote {} test sets to {}", data.test_variants.len(), dir.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let ckpts = train_all(cfg, &data)?;
    save_checkpoints(cfg, &ckpts)?;
    write_text(&cfg.output_dir.join(harness::RESOLVED_CONFIG), &cfg.resolved_toml()?)
}

fn calibrate(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let ckpts = load_checkpoints(cfg)?;
    let dir = cfg.output_dir.join("calibration");
    for (m, c) in cfg.methods.iter().zip(&ckpts) {
        let out = method_outputs(cfg, m, c, &data)?;
        for &seed in &cfg.experiment.eval_seeds {
            let idx = calibration_indices(data.cal_pool.len(), cfg.experiment.n_cal, seed);
            let probs: Vec<_> = idx.iter().map(|&i| out.cal_pool[i].clone()).collect();
            let labels: Vec<_> = idx.iter().map(|&i| data.cal_pool.labels()[i]).collect();
            for &alpha in &cfg.experiment.alphas {
                for &sm in &cfg.experiment.set_methods {
                    let kind = match sm {
                        SetMethod::Cred => continue,
                        SetMethod::Thr => ScoreKind::Thr,
                        SetMethod::Aps => ScoreKind::Aps,
                    };
                    let cal = calibrate_cell(&probs, &labels, alpha, kind, seed)?;
                    let p = dir.join(format!("{}_{}_alpha{}_seed{}.json", m.name, kind, alpha, seed));
                    write_text(&p, &(cal.to_json()? + "\n"))?;
                    println!("{} {} alpha={} seed={} tau={}", m.name, kind, alpha, seed, cal.tau);
                }
            }
        }
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let ckpts = load_checkpoints(cfg)?;
    let report = harness::evaluate(cfg, &data, &ckpts)?;
    write_outputs(&report, cfg, &cfg.output_dir)?;
    eprintln!(
        "wrote {} rows to {}",
        report.rows.len(),
        cfg.output_dir.join(harness::REPORT_CSV).display()
    );
    Ok(())
}

fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let ckpts = train_all(cfg, &data)?;
    save_checkpoints(cfg, &ckpts)?;
    let report = harness::evaluate(cfg, &data, &ckpts)?;
    write_outputs(&report, cfg, &cfg.output_dir)?;
    eprintln!(
        "wrote {} rows to {}",
        report.rows.len(),
        cfg.output_dir.join(harness::REPORT_CSV).display()
    );
    Ok(())
}

fn diagnose(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let ckpts = match load_checkpoints(cfg) {
        Ok(c) => c,
        Err(_) => {
            eprintln!("no checkpoints under {}, training", cfg.output_dir.display());
            train_all(cfg, &data)?
        }
    };
    let mut records = Vec::new();
    for (m, c) in cfg.methods.iter().zip(&ckpts) {
        let out = method_outputs(cfg, m, c, &data)?;
        for &alpha in &cfg.experiment.alphas {
            for &seed in &cfg.experiment.eval_seeds {
                let idx = calibration_indices(data.cal_pool.len(), cfg.experiment.n_cal, seed);
                let probs: Vec<_> = idx.iter().map(|&i| out.cal_pool[i].clone()).collect();
                let labels: Vec<_> = idx.iter().map(|&i| data.cal_pool.labels()[i]).collect();
                let d = harness::diagnose_confidence(&probs, &labels, alpha, probs.len())?;
                println!(
                    "{:<16} alpha={:<6} seed={:<4} credible coverage {:.4} -> {}",
                    m.name, alpha, seed, d.credible_coverage_on_cal, d.verdict
                );
                records.push(serde_json::json!({
                    "method": m.name,
                    "alpha": alpha,
                    "eval_seed": seed,
                    "n_cal": probs.len(),
                    "credible_coverage_on_cal": d.credible_coverage_on_cal,
                    "verdict": d.verdict,
                }));
            }
        }
    }
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "config_hash": cfg.hash()?,
        "diagnoses": records,
    }))?;
    write_text(&cfg.output_dir.join("diagnosis.json"), &(json + "\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&ExperimentConfig) -> Result<()>) = match &cli.command {
        Command::GenerateData(c) => (c, generate_data),
        Command::Train(c) => (c, train),
        Command::Calibrate(c) => (c, calibrate),
        Command::Evaluate(c) => (c, evaluate),
        Command::RunAll(c) => (c, run_all),
        Command::Diagnose(c) => (c, diagnose),
    };
    let result = common.load().and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e.root(), Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
