use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{StepMetrics, TrainCounters, Trainer};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::replay::OpCounters;

pub const METRICS_COLUMNS: [&str; 11] = [
    "step",
    "loss_g",
    "loss_d",
    "loss_combined",
    "drift_exact_recovery",
    "fresh_replaced_fraction",
    "buffer_live",
    "buffer_mean_w",
    "buffer_min_w",
    "buffer_max_w",
    "step_ms",
];

#[derive(Debug, Clone, Serialize)]
pub struct Abort {
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: serde_json::Map<String, serde_json::Value>,
    pub warnings: Vec<String>,
    pub threads: usize,
    pub vocab_size: usize,
    pub sequences: usize,
    pub steps_run: u64,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_csv: PathBuf,
    /// Least-squares slope of the drift metric against step, over evaluation points.
    pub drift_trend_slope: Option<f64>,
    pub final_drift: Option<f64>,
    pub counters: TrainCounters,
    pub buffer_counters: OpCounters,
    pub aborted: Option<Abort>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.manifest"))
}

pub fn write_metrics_header<W: std::io::Write>(w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(METRICS_COLUMNS)?;
    Ok(())
}

fn metrics_record(m: &StepMetrics, record_ms: bool) -> [String; 11] {
    [
        m.step.to_string(),
        m.loss_g.to_string(),
        m.loss_d.to_string(),
        m.loss_combined.to_string(),
        m.drift_exact_recovery.to_string(),
        m.fresh_replaced_fraction.to_string(),
        m.buffer_live.to_string(),
        m.buffer_mean_w.to_string(),
        m.buffer_min_w.to_string(),
        m.buffer_max_w.to_string(),
        if record_ms { m.step_ms.to_string() } else { "0".to_string() },
    ]
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Train for `cfg.steps` iterations, writing `metrics.csv`, checkpoints and
/// `report.json` under `cfg.out_dir`.
pub fn run_pretraining(cfg: &Config) -> Result<RunReport> {
    let mut trainer = Trainer::new(cfg)?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let csv_path = out.join("metrics.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut csv = csv::Writer::from_writer(file);
    write_metrics_header(&mut csv)?;
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;

    let config = cfg
        .to_pairs()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    let mut report = RunReport {
        config,
        warnings: cfg.warnings(),
        threads: 1,
        vocab_size: trainer.vocab().len(),
        sequences: trainer.sequences().len(),
        steps_run: 0,
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        metrics_csv: csv_path.clone(),
        drift_trend_slope: None,
        final_drift: None,
        counters: TrainCounters::default(),
        buffer_counters: OpCounters::default(),
        aborted: None,
    };

    let save = |trainer: &Trainer, report: &mut RunReport| -> Result<()> {
        let p = checkpoint_path(&out, trainer.step_count());
        trainer.checkpoint().save(&p)?;
        report.checkpoints.push(p);
        Ok(())
    };
    save(&trainer, &mut report)?;

    let mut result = Ok(());
    for s in 0..cfg.steps {
        match trainer.step() {
            Ok(m) => {
                csv.write_record(metrics_record(&m, cfg.record_step_ms))?;
                csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                report.metrics.push(m);
                report.steps_run += 1;
            }
            Err(e) => {
                log::error!("aborting at step {s}: {e}");
                report.aborted = Some(Abort {
                    step: s,
                    message: e.to_string(),
                });
                result = Err(e);
                break;
            }
        }
        let done = s + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.steps {
            save(&trainer, &mut report)?;
        }
    }
    if result.is_ok() && cfg.steps > 0 {
        save(&trainer, &mut report)?;
        report.final_drift = Some(trainer.drift()?.exact_recovery);
    }

    let mut points: Vec<(f64, f64)> = report
        .metrics
        .iter()
        .filter(|m| m.step % cfg.eval_every == 0)
        .map(|m| (m.step as f64, m.drift_exact_recovery))
        .collect();
    if let Some(d) = report.final_drift {
        points.push((report.steps_run as f64, d));
    }
    report.drift_trend_slope = slope(&points);
    report.counters = trainer.counters();
    report.buffer_counters = trainer.buffer_counters();

    let report_path = out.join("report.json");
    let f = File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    serde_json::to_writer_pretty(f, &report)?;
    result.map(|_| report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_line() {
        assert_eq!(slope(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]), Some(2.0));
        assert_eq!(slope(&[(0.0, 1.0)]), None);
    }
}
