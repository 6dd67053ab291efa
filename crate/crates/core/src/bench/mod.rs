//! Benchmark harness: clean / corrupted / shifted evaluation, the
//! multi-method multi-seed experiment runner with crash-safe CSV emission,
//! and the confusion-matrix dump for targeted training.

pub mod config;
pub mod data;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{perturb_input, MlpClassifier, NoiseSpec};
use crate::streams::{stream, StreamId};
use crate::tat::{Method, Trainer};

pub use config::{ExperimentConfig, ExperimentSection, ModelConfig};
pub use data::{generate, DatasetSpec, Example, Generator, ShiftSpec};

/// Environment variable overriding the output directory of all commands.
pub const OUT_DIR_ENV: &str = "ROBUSTLEARN_OUT_DIR";

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub clean_acc: f64,
    /// (corruption scale, accuracy averaged over noise draws).
    pub corrupted: Vec<(f64, f64)>,
    pub shifted_acc: f64,
    /// Clean error rate per gold class.
    pub per_class_error: Vec<f64>,
    /// Error rate per gold class under each corruption scale, averaged over
    /// noise draws; a denser estimate of the error distribution than the
    /// clean rates.
    pub corrupted_per_class_error: Vec<Vec<f64>>,
}

/// Evaluate a model on the test split: clean accuracy, corrupted accuracy
/// per noise scale (averaged over `noise_draws` draws per point), and
/// accuracy on the shift-transformed set. The eval noise stream is re-seeded
/// per call, so per-epoch curves share the same corruption draws.
pub fn evaluate(
    model: &MlpClassifier,
    test: &[Example],
    corruption_levels: &[f64],
    noise_draws: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set must be nonempty".into()));
    }
    if noise_draws == 0 {
        return Err(Error::InvalidArgument("noise_draws must be ≥ 1".into()));
    }
    let mut rng = stream(seed, StreamId::EvalNoise);
    let classes = model.class_count();

    let mut clean_correct = 0usize;
    let mut class_total = vec![0usize; classes];
    let mut class_errors = vec![0usize; classes];
    for (x, y) in test {
        class_total[*y] += 1;
        if model.predict(x)? == *y {
            clean_correct += 1;
        } else {
            class_errors[*y] += 1;
        }
    }
    let clean_acc = clean_correct as f64 / test.len() as f64;
    let per_class_error = class_errors
        .iter()
        .zip(class_total.iter())
        .map(|(&e, &t)| if t == 0 { 0.0 } else { e as f64 / t as f64 })
        .collect();

    let mut corrupted = Vec::with_capacity(corruption_levels.len());
    let mut corrupted_per_class_error = Vec::with_capacity(corruption_levels.len());
    for &c in corruption_levels {
        let noise = NoiseSpec::new(c)?;
        let mut correct = 0usize;
        let mut errors = vec![0usize; classes];
        for (x, y) in test {
            for _ in 0..noise_draws {
                let xp = perturb_input(x, &noise, &mut rng);
                if model.predict(&xp)? == *y {
                    correct += 1;
                } else {
                    errors[*y] += 1;
                }
            }
        }
        corrupted.push((c, correct as f64 / (test.len() * noise_draws) as f64));
        corrupted_per_class_error.push(
            errors
                .iter()
                .zip(class_total.iter())
                .map(|(&e, &t)| {
                    if t == 0 {
                        0.0
                    } else {
                        e as f64 / (t * noise_draws) as f64
                    }
                })
                .collect(),
        );
    }

    let center = data::centroid(test);
    let extra = NoiseSpec::new(shift.extra_noise)?;
    let mut shifted_correct = 0usize;
    for (x, y) in test {
        let moved = data::shift_point(x, shift, &center);
        let noisy = perturb_input(&moved, &extra, &mut rng);
        if model.predict(&noisy)? == *y {
            shifted_correct += 1;
        }
    }
    Ok(EvalReport {
        clean_acc,
        corrupted,
        shifted_acc: shifted_correct as f64 / test.len() as f64,
        per_class_error,
        corrupted_per_class_error,
    })
}

/// Largest per-class error rate: the "worst row" of the error distribution.
pub fn max_row_error(per_class_error: &[f64]) -> f64 {
    per_class_error.iter().fold(0.0_f64, |m, &v| m.max(v))
}

/// Skew of a per-class error distribution: worst class error over the mean.
/// 1.0 means perfectly balanced errors (or no errors at all).
pub fn error_skew(per_class_error: &[f64]) -> f64 {
    let max = per_class_error.iter().fold(0.0_f64, |m, &v| m.max(v));
    let mean = per_class_error.iter().sum::<f64>() / per_class_error.len().max(1) as f64;
    if mean <= 0.0 {
        1.0
    } else {
        max / mean
    }
}

/// One CSV row: per-epoch training metrics plus evaluation accuracies.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub reg_value: f64,
    pub clean_acc: f64,
    pub corrupt_acc: Vec<f64>,
    pub shift_acc: f64,
    pub wall_ms: u64,
}

/// Streaming CSV writer with a fixed schema per config; every record is
/// flushed as written so an interrupted sweep keeps its completed rows.
pub struct CsvWriter {
    out: BufWriter<File>,
    path: PathBuf,
    levels: usize,
    emit_timings: bool,
    records: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, corruption_levels: &[f64], emit_timings: bool) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut writer = CsvWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            levels: corruption_levels.len(),
            emit_timings,
            records: 0,
        };
        let mut header = String::from("run_id,method,seed,epoch,train_loss,reg_value,clean_acc");
        for c in corruption_levels {
            header.push_str(&format!(",corrupt_acc_{c:?}"));
        }
        header.push_str(",shift_acc,wall_ms\n");
        writer.write_raw(&header)?;
        Ok(writer)
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        debug_assert_eq!(rec.corrupt_acc.len(), self.levels);
        let mut line = format!(
            "{},{},{},{},{:?},{:?},{:?}",
            rec.run_id,
            rec.method,
            rec.seed,
            rec.epoch,
            rec.train_loss,
            rec.reg_value,
            rec.clean_acc
        );
        for v in &rec.corrupt_acc {
            line.push_str(&format!(",{v:?}"));
        }
        let wall = if self.emit_timings { rec.wall_ms } else { 0 };
        line.push_str(&format!(",{:?},{}\n", rec.shift_acc, wall));
        self.write_raw(&line)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    fn write_raw(&mut self, s: &str) -> Result<()> {
        self.out
            .write_all(s.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(self.path.display().to_string(), e))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub final_eval: EvalReport,
    pub error_skew: f64,
}

#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: Method,
    pub clean: (f64, f64),
    /// (corruption scale, mean, std) over seeds.
    pub corrupted: Vec<(f64, f64, f64)>,
    pub shifted: (f64, f64),
    pub error_skew_mean: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub methods: Vec<MethodSummary>,
    pub runs: Vec<RunOutcome>,
    pub csv_path: PathBuf,
    pub records: usize,
}

impl ExperimentSummary {
    pub fn for_method(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{} records -> {}\n",
            self.records,
            self.csv_path.display()
        ));
        out.push_str("method  clean            shift            skew");
        if let Some(first) = self.methods.first() {
            for (c, _, _) in &first.corrupted {
                out.push_str(&format!("  corrupt@{c:?}"));
            }
        }
        out.push('\n');
        for m in &self.methods {
            out.push_str(&format!(
                "{:<7} {:.4} ± {:.4}  {:.4} ± {:.4}  {:.3}",
                m.method.name(),
                m.clean.0,
                m.clean.1,
                m.shifted.0,
                m.shifted.1,
                m.error_skew_mean
            ));
            for (_, mean, std) in &m.corrupted {
                out.push_str(&format!("  {mean:.4} ± {std:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Train and evaluate every (method, seed) pair in the config, appending one
/// CSV record per epoch. Runs execute in config order; records are written
/// as produced, so the row order is (run id, epoch) and a rerun with the
/// same config yields a byte-identical file.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let dataset = generate(&cfg.dataset)?;
    let csv_path = out_dir.join(&cfg.experiment.csv_path);
    let mut writer = CsvWriter::create(
        &csv_path,
        &cfg.experiment.eval_corruption_levels,
        cfg.experiment.emit_timings,
    )?;

    let mut runs = Vec::new();
    let mut run_index = 0usize;
    for &method in &cfg.experiment.methods {
        for &seed in &cfg.experiment.seeds {
            let run_id = format!("r{run_index:04}-{method}-s{seed}");
            let outcome = run_one(cfg, method, seed, &run_id, &dataset, &mut writer)?;
            runs.push(outcome);
            run_index += 1;
        }
    }

    let methods = cfg
        .experiment
        .methods
        .iter()
        .map(|&method| summarize_method(method, &runs, &cfg.experiment.eval_corruption_levels))
        .collect();
    Ok(ExperimentSummary {
        methods,
        runs,
        csv_path,
        records: writer.records(),
    })
}

/// Single-run variant used by the `train` subcommand: first seed, the
/// configured method, optional checkpoint.
pub fn run_single(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    let mut single = cfg.clone();
    single.experiment.methods = vec![cfg.train.method];
    single.experiment.seeds = vec![cfg.experiment.seeds[0]];
    let summary = run_experiment(&single, out_dir)?;
    Ok(summary)
}

fn run_one(
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
    run_id: &str,
    dataset: &data::Dataset,
    writer: &mut CsvWriter,
) -> Result<RunOutcome> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.method = method;
    let model = MlpClassifier::new(&cfg.layer_dims(), &mut stream(seed, StreamId::Init))?;
    let mut trainer = Trainer::new(model, train_cfg, seed)?;
    let mut final_eval = None;
    for _ in 0..cfg.train.epochs {
        let start = Instant::now();
        let stats = trainer.run_epoch(&dataset.train)?;
        let eval = evaluate(
            trainer.model(),
            &dataset.test,
            &cfg.experiment.eval_corruption_levels,
            cfg.experiment.eval_noise_draws,
            &cfg.dataset.shift,
            seed,
        )?;
        writer.write(&MetricsRecord {
            run_id: run_id.to_string(),
            method,
            seed,
            epoch: stats.epoch,
            train_loss: stats.train_loss,
            reg_value: stats.reg_value,
            clean_acc: eval.clean_acc,
            corrupt_acc: eval.corrupted.iter().map(|&(_, a)| a).collect(),
            shift_acc: eval.shifted_acc,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
        final_eval = Some(eval);
    }
    if let Some(path) = &cfg.experiment.checkpoint_path {
        if cfg.experiment.methods.len() == 1 && cfg.experiment.seeds.len() == 1 {
            let full = writer.path.parent().unwrap_or(Path::new(".")).join(path);
            trainer.model().save(&full)?;
        }
    }
    let final_eval = final_eval
        .ok_or_else(|| Error::InvalidArgument("epochs must be ≥ 1 for an experiment".into()))?;
    let skew = error_skew(&final_eval.per_class_error);
    Ok(RunOutcome {
        run_id: run_id.to_string(),
        method,
        seed,
        final_eval,
        error_skew: skew,
    })
}

fn summarize_method(method: Method, runs: &[RunOutcome], levels: &[f64]) -> MethodSummary {
    let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.method == method).collect();
    let clean: Vec<f64> = mine.iter().map(|r| r.final_eval.clean_acc).collect();
    let shifted: Vec<f64> = mine.iter().map(|r| r.final_eval.shifted_acc).collect();
    let corrupted = levels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let vals: Vec<f64> = mine.iter().map(|r| r.final_eval.corrupted[i].1).collect();
            let (m, s) = mean_std(&vals);
            (c, m, s)
        })
        .collect();
    let skews: Vec<f64> = mine.iter().map(|r| r.error_skew).collect();
    MethodSummary {
        method,
        clean: mean_std(&clean),
        corrupted,
        shifted: mean_std(&shifted),
        error_skew_mean: mean_std(&skews).0,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Train with the targeted method and dump the committed error-tally
/// distribution after every epoch.
pub fn run_confusion(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let dataset = generate(&cfg.dataset)?;
    let seed = cfg.experiment.seeds[0];
    let mut train_cfg = cfg.train.clone();
    train_cfg.method = Method::Tat;
    let model = MlpClassifier::new(&cfg.layer_dims(), &mut stream(seed, StreamId::Init))?;
    let mut trainer = Trainer::new(model, train_cfg, seed)?;
    let path = out_dir.join("confusion.txt");
    let file = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    for _ in 0..cfg.train.epochs {
        let stats = trainer.run_epoch(&dataset.train)?;
        writeln!(out, "epoch {}", stats.epoch).map_err(io_err)?;
        let m = trainer.tally().classes();
        for gold in 0..m {
            let probs = trainer.tally().row_probabilities(gold);
            let row: Vec<String> = probs.iter().map(|p| format!("{p:.4}")).collect();
            writeln!(out, "{}", row.join(" ")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
    }
    Ok(path)
}
