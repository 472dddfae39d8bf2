//! `introlearn` command-line front end.

mod config;
mod runner;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use introlearn::checkpoint;
use introlearn::data::Dataset;
use introlearn::explain::{self, cosine, explain_all, pgm_bytes, saliency_image, ExplainConfig, Method};
use introlearn::gradcheck;
use introlearn::train::{evaluate, load_data, ExperimentConfig, TrainMethod};
use introlearn::{Error, Network, Result};

use runner::{mean_std, run_experiment, RunManifest, RunOptions};

#[derive(Parser)]
#[command(name = "introlearn", version, about = "Train classifiers on their own explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file (key = value with [sections]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; `key=value` or `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Configuration(format!("config: cannot read {}: {e}", p.display())))?;
                config::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            config::apply_override(&mut cfg, o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every trial of a configured experiment.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Finite-difference and closed-form gradient checks in 64-bit.
    Gradcheck {
        /// Architectures to check (default: mlp-small, cnn-6, resnet8).
        #[arg(long)]
        arch: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Offset added to every analytic parameter gradient (negative control).
        #[arg(long, default_value_t = 0.0, hide = true)]
        corrupt: f64,
    },
    /// Dataset-averaged class-similarity matrix of explanations.
    Simmatrix {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "grad")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Per-class explanations of one test image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value = "grad")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher, then CE/KD/CWTM/CWTM-Permut/CWTM-Random/DKPP students.
    Kdstudy {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "cnn-10")]
        teacher_arch: String,
        /// Comma-separated student architectures.
        #[arg(long, default_value = "cnn-8,cnn-6")]
        students: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Test accuracy and confusion counts of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Configuration(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train {
            cfg,
            out,
            threads,
            quiet,
        } => cfg.load().and_then(|c| cmd_train(&c, out, threads, quiet)),
        Command::Gradcheck { arch, seed, corrupt } => cmd_gradcheck(&arch, seed, corrupt),
        Command::Simmatrix {
            checkpoint,
            cfg,
            method,
            out,
            limit,
        } => cfg.load().and_then(|c| cmd_simmatrix(&checkpoint, &c, method, &out, limit)),
        Command::Explain {
            checkpoint,
            cfg,
            index,
            method,
            out,
        } => cfg.load().and_then(|c| cmd_explain(&checkpoint, &c, index, method, &out)),
        Command::Kdstudy {
            cfg,
            teacher_arch,
            students,
            out,
            threads,
            quiet,
        } => cfg.load().and_then(|c| cmd_kdstudy(&c, &teacher_arch, &students, &out, threads, quiet)),
        Command::Eval { checkpoint, cfg, out } => cfg.load().and_then(|c| cmd_eval(&checkpoint, &c, out.as_deref())),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(cfg: &ExperimentConfig, out: Option<PathBuf>, threads: usize, quiet: bool) -> Result<ExitCode> {
    let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.method, cfg.arch)));
    let m = run_experiment(cfg, &RunOptions { out: out.clone(), threads, quiet })?;
    println!(
        "{} {} over {} trial(s): accuracy {:.2} ± {:.2}, error {:.2} ± {:.2} -> {}",
        cfg.method,
        cfg.arch,
        cfg.trials,
        m.summary.accuracy_mean,
        m.summary.accuracy_std,
        m.summary.error_mean,
        m.summary.error_std,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(archs: &[String], seed: u64, corrupt: f64) -> Result<ExitCode> {
    let defaults = ["mlp-small", "cnn-6", "resnet8"].map(String::from);
    let archs = if archs.is_empty() { &defaults[..] } else { archs };
    let mut ok = true;
    for arch in archs {
        arch.parse::<introlearn::net::Arch>()?;
        let summary = gradcheck::run_suite(arch, seed, corrupt)?;
        for r in &summary.reports {
            println!(
                "{:<36} max_rel_err {:.3e}  checked {:>5}  skipped {:>3}  {}",
                r.name,
                r.max_rel_err,
                r.checked,
                r.skipped,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
        ok &= summary.passed();
    }
    println!("gradcheck {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn load_checkpoint_for(path: &Path, cfg: &ExperimentConfig) -> Result<(Network<f32>, Dataset)> {
    let (net, _) = checkpoint::load(path)?;
    let (_, test) = load_data(cfg)?;
    if net.input_shape() != test.sample_shape() || net.num_classes() != test.classes() {
        return Err(Error::Configuration(format!(
            "dataset: checkpoint expects {:?} with {} classes, data is {:?} with {}",
            net.input_shape(),
            net.num_classes(),
            test.sample_shape(),
            test.classes()
        )));
    }
    Ok((net, test))
}

fn explain_config(cfg: &ExperimentConfig, method: Method) -> ExplainConfig {
    ExplainConfig {
        method,
        layer: cfg.gradcam_layer,
        batch_stats: false,
        budget_bytes: cfg.explain_budget_mb << 20,
    }
}

fn cmd_simmatrix(
    ckpt: &Path,
    cfg: &ExperimentConfig,
    method: Method,
    out: &Path,
    limit: Option<usize>,
) -> Result<ExitCode> {
    let (net, test) = load_checkpoint_for(ckpt, cfg)?;
    let n = limit.unwrap_or(test.len()).min(test.len());
    let images = test.subset(n)?.images;
    let m = explain::similarity_matrix(&net, &images, &explain_config(cfg, method), 64)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("similarity.csv"), m.to_csv())?;
    fs::write(out.join("similarity.pgm"), m.to_pgm(16))?;
    let median = m.median_off_diagonal();
    println!("{n} images, {method}; median off-diagonal similarity {median:.4}");
    let mut pairs: Vec<(usize, usize, f64)> = (0..m.classes)
        .flat_map(|j| ((j + 1)..m.classes).map(move |k| (j, k)))
        .map(|(j, k)| (j, k, m.get(j, k)))
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
    for (j, k, v) in pairs.iter().take(5) {
        println!("  ({j},{k}) {v:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_explain(ckpt: &Path, cfg: &ExperimentConfig, index: usize, method: Method, out: &Path) -> Result<ExitCode> {
    let (net, test) = load_checkpoint_for(ckpt, cfg)?;
    if index >= test.len() {
        return Err(Error::Parameter(format!("index {index} of {} test images", test.len())));
    }
    let (x, y) = test.gather(&[index])?;
    let set = explain_all(&net, &x, &explain_config(cfg, method))?.remove(0);
    let gt = y[0];
    fs::create_dir_all(out)?;
    fs::write(out.join("input.pgm"), pgm_bytes(&saliency_image(&x.reshape(test.sample_shape().to_vec())?)))?;
    let mut csv = String::from("class,score\n");
    for (j, map) in set.maps.iter().enumerate() {
        fs::write(out.join(format!("class_{j}.pgm")), pgm_bytes(&saliency_image(map)))?;
        csv.push_str(&format!("{j},{:.6}\n", cosine(map, &set.maps[gt])?));
    }
    fs::write(out.join("scores.csv"), csv)?;
    println!("image {index} (class {gt}): {} maps written to {}", set.maps.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(ckpt: &Path, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExitCode> {
    let (net, test) = load_checkpoint_for(ckpt, cfg)?;
    let e = evaluate(&net, &test)?;
    println!("accuracy {:.2}%  error {:.2}%  ({} images)", e.accuracy, e.error, test.len());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("true");
        for k in 0..e.confusion.len() {
            csv.push_str(&format!(",{k}"));
        }
        csv.push('\n');
        for (j, row) in e.confusion.iter().enumerate() {
            csv.push_str(&j.to_string());
            for c in row {
                csv.push_str(&format!(",{c}"));
            }
            csv.push('\n');
        }
        fs::write(dir.join("confusion.csv"), csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub const KD_STUDY_METHODS: [TrainMethod; 6] = [
    TrainMethod::Ce,
    TrainMethod::Kd,
    TrainMethod::Cwtm,
    TrainMethod::CwtmPermut,
    TrainMethod::CwtmRandom,
    TrainMethod::Dkpp,
];

fn read_manifest(path: &Path) -> Option<RunManifest> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn cmd_kdstudy(
    base: &ExperimentConfig,
    teacher_arch: &str,
    students: &str,
    out: &Path,
    threads: usize,
    quiet: bool,
) -> Result<ExitCode> {
    let teacher_cfg = ExperimentConfig {
        method: TrainMethod::Ce,
        arch: teacher_arch.to_string(),
        trials: 1,
        teacher: None,
        ..base.clone()
    };
    let tdir = out.join("teacher");
    let want = config::config_hash(&runner::trial_config(&teacher_cfg, 0));
    let cached = read_manifest(&tdir.join("manifest.json"))
        .filter(|m| m.trials.first().is_some_and(|t| t.config_hash == want))
        .filter(|_| tdir.join("trial-0/model.ilnc").exists());
    let teacher = match cached {
        Some(m) => {
            println!("reusing teacher {} (hash {})", tdir.display(), &want[..12]);
            m
        }
        None => run_experiment(&teacher_cfg, &RunOptions { out: tdir.clone(), threads: 1, quiet })?,
    };
    println!("teacher {teacher_arch}: test accuracy {:.2}%", teacher.summary.accuracy_mean);
    let teacher_path = tdir.join("trial-0/model.ilnc");
    let mut csv = String::from("arch,trial");
    for m in KD_STUDY_METHODS {
        csv.push_str(&format!(",{m}"));
    }
    csv.push('\n');
    for arch in students.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for method in KD_STUDY_METHODS {
            let cfg = ExperimentConfig {
                method,
                arch: arch.to_string(),
                teacher: method.needs_teacher().then(|| teacher_path.clone()),
                ..base.clone()
            };
            let m = run_experiment(
                &cfg,
                &RunOptions {
                    out: out.join(arch).join(method.name()),
                    threads,
                    quiet,
                },
            )?;
            if let Some(h) = &m.teacher_hash {
                if *h != want {
                    return Err(Error::State(format!("{arch}/{method} used teacher hash {h}, expected {want}")));
                }
            }
            cols.push(m.trials.iter().map(|t| t.final_test_accuracy).collect());
        }
        for t in 0..base.trials {
            csv.push_str(&format!("{arch},{t}"));
            for c in &cols {
                csv.push_str(&format!(",{:.4}", c[t]));
            }
            csv.push('\n');
        }
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            csv.push_str(&format!("{arch},{label}"));
            for c in &cols {
                let (m, s) = mean_std(c);
                csv.push_str(&format!(",{:.4}", if pick == 0 { m } else { s }));
            }
            csv.push('\n');
        }
    }
    fs::write(out.join("kdstudy.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
