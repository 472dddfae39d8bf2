//! Trial orchestration and on-disk artifacts.
//!
//! Layout under the output directory:
//! `config.txt`, `manifest.json`, `summary.csv`, and per trial
//! `trial-<k>/metrics.jsonl`, `trial-<k>/timing.jsonl`, `trial-<k>/model.ilnc`
//! (plus `peer-*` files for mutual learning).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use introlearn::checkpoint::{self, Provenance};
use introlearn::data::Dataset;
use introlearn::train::{self, load_data, ExperimentConfig, MetricsRecord, TrainOutcome};
use introlearn::{Error, Network, Result};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, render};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub config_hash: String,
    pub metrics: String,
    pub checkpoint: String,
    pub final_test_accuracy: f64,
    pub final_test_error: f64,
    /// Mutual learning only.
    pub peer_test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub error_mean: f64,
    pub error_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub config_hash: String,
    pub teacher_hash: Option<String>,
    pub trials: Vec<TrialResult>,
    pub summary: Summary,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn trial_config(cfg: &ExperimentConfig, trial: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: cfg.seed.wrapping_add(trial as u64),
        trials: 1,
        ..cfg.clone()
    }
}

pub fn load_teacher(cfg: &ExperimentConfig) -> Result<Option<(Network<f32>, Provenance)>> {
    if !cfg.method.needs_teacher() {
        return Ok(None);
    }
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Configuration(format!("teacher: method {} needs a teacher checkpoint", cfg.method)))?;
    if !path.exists() {
        return Err(Error::Configuration(format!("teacher: checkpoint {} not found", path.display())));
    }
    checkpoint::load(path).map(Some)
}

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::State(e.to_string()))?;
    writeln!(w, "{s}")?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    epoch: usize,
    wall_time: f64,
}

fn run_trial(
    cfg: &ExperimentConfig,
    trial: usize,
    out: &Path,
    shared: Option<&(Dataset, Dataset)>,
    teacher: Option<&Network<f32>>,
    quiet: bool,
) -> Result<TrialResult> {
    let tcfg = trial_config(cfg, trial);
    let own;
    let (tr, te) = match shared {
        Some((a, b)) => (a, b),
        None => {
            own = load_data(&tcfg)?;
            (&own.0, &own.1)
        }
    };
    let dir = out.join(format!("trial-{trial}"));
    fs::create_dir_all(&dir)?;
    let mut writers = [
        (jsonl_writer(&dir.join("metrics.jsonl"))?, jsonl_writer(&dir.join("timing.jsonl"))?),
        (
            jsonl_writer(&dir.join("peer-metrics.jsonl"))?,
            jsonl_writer(&dir.join("peer-timing.jsonl"))?,
        ),
    ];
    let mut io_err: Option<Error> = None;
    let mut observe = |k: usize, r: &MetricsRecord| {
        let (m, t) = &mut writers[k];
        let res = write_line(m, r)
            .and_then(|_| {
                write_line(
                    t,
                    &Timing {
                        epoch: r.epoch,
                        wall_time: r.wall_time,
                    },
                )
            })
            .and_then(|_| m.flush().map_err(Error::from));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
        if !quiet && k == 0 {
            eprintln!(
                "[{} trial {trial}] epoch {:>3} lr {:.4} loss {:.4} train {:.2}% test {:.2}%",
                tcfg.method, r.epoch, r.lr, r.train_loss, r.train_accuracy, r.test_accuracy
            );
        }
    };
    let outcome: TrainOutcome = train::train_with(&tcfg, tr, te, teacher, &mut observe)?;
    if let Some(e) = io_err {
        return Err(e);
    }
    for (m, t) in &mut writers {
        m.flush()?;
        t.flush()?;
    }
    drop(writers);
    if outcome.peer.is_none() {
        fs::remove_file(dir.join("peer-metrics.jsonl"))?;
        fs::remove_file(dir.join("peer-timing.jsonl"))?;
    }
    let hash = config_hash(&tcfg);
    let prov = Provenance {
        config_hash: hash.clone(),
        epoch: tcfg.epochs as u32,
        seed: tcfg.seed,
    };
    checkpoint::save(&dir.join("model.ilnc"), &outcome.net, &prov)?;
    if let Some(peer) = &outcome.peer {
        checkpoint::save(&dir.join("peer-model.ilnc"), peer, &prov)?;
    }
    let last = outcome.metrics.last().expect("at least one epoch");
    Ok(TrialResult {
        trial,
        seed: tcfg.seed,
        config_hash: hash,
        metrics: format!("trial-{trial}/metrics.jsonl"),
        checkpoint: format!("trial-{trial}/model.ilnc"),
        final_test_accuracy: last.test_accuracy,
        final_test_error: last.test_error,
        peer_test_accuracy: outcome.peer_metrics.last().map(|r| r.test_accuracy),
    })
}

pub struct RunOptions {
    pub out: PathBuf,
    pub threads: usize,
    pub quiet: bool,
}

/// Runs every trial of `cfg`, then writes the summary and manifest.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let teacher = load_teacher(cfg)?;
    fs::create_dir_all(&opts.out)?;
    fs::write(opts.out.join("config.txt"), render(cfg))?;
    // Real datasets do not depend on the trial seed; load them once.
    let shared = match cfg.dataset {
        train::DatasetKind::Synth => None,
        _ => Some(load_data(cfg)?),
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrialResult>>>> = Mutex::new((0..cfg.trials).map(|_| None).collect());
    let workers = opts.threads.clamp(1, cfg.trials);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= cfg.trials {
                    break;
                }
                let r = run_trial(cfg, k, &opts.out, shared.as_ref(), teacher.as_ref().map(|t| &t.0), opts.quiet);
                results.lock().expect("no panics while holding the lock")[k] = Some(r);
            });
        }
    });
    let trials = results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every trial ran"))
        .collect::<Result<Vec<_>>>()?;
    let acc: Vec<f64> = trials.iter().map(|t| t.final_test_accuracy).collect();
    let err: Vec<f64> = trials.iter().map(|t| t.final_test_error).collect();
    let (am, asd) = mean_std(&acc);
    let (em, esd) = mean_std(&err);
    let manifest = RunManifest {
        config: render(cfg),
        config_hash: config_hash(cfg),
        teacher_hash: teacher.map(|(_, p)| p.config_hash),
        trials,
        summary: Summary {
            accuracy_mean: am,
            accuracy_std: asd,
            error_mean: em,
            error_std: esd,
        },
    };
    let mut csv = String::from("method,arch,trials,accuracy_mean,accuracy_std,error_mean,error_std\n");
    csv.push_str(&format!(
        "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
        cfg.method, cfg.arch, cfg.trials, am, asd, em, esd
    ));
    fs::write(opts.out.join("summary.csv"), csv)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::State(e.to_string()))?;
    fs::write(opts.out.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn trial_seeds_are_offsets() {
        let cfg = ExperimentConfig {
            seed: 10,
            trials: 3,
            ..ExperimentConfig::default()
        };
        assert_eq!(trial_config(&cfg, 2).seed, 12);
        assert_eq!(trial_config(&cfg, 2).trials, 1);
    }
}
