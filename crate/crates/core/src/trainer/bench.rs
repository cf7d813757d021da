use std::time::Instant;

use serde::Serialize;

use super::Trainer;
use crate::config::{Config, Mode};
use crate::error::Result;

/// Variants timed by [`bench_strategies`], in report order.
pub const BENCH_STRATEGIES: [&str; 4] = ["baseline", "loss_diff", "grad_bound", "grad_norm"];

/// Largest allowed loss_diff / baseline time ratio.
pub const LOSS_DIFF_OVERHEAD_LIMIT: f64 = 1.10;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub seconds_per_100_iters: f64,
    pub backward_calls_per_step: f64,
    /// Seconds per 100 iterations in each round.
    #[serde(skip)]
    pub rounds: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrderingCheck {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub iterations: u64,
    pub rounds: usize,
    pub rows: Vec<BenchRow>,
    pub checks: Vec<OrderingCheck>,
}

impl BenchReport {
    pub fn row(&self, strategy: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "seconds_per_100_iters", "backward_calls_per_step"])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.clone(),
                r.seconds_per_100_iters.to_string(),
                r.backward_calls_per_step.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn variant(template: &Config, name: &str) -> Config {
    let mut c = template.clone();
    // drift is evaluated once, at step 0, identically for every variant
    c.eval_every = u64::MAX;
    match name {
        "baseline" => c.mode = Mode::ElectraBaseline,
        other => {
            c.mode = Mode::Tmr;
            c.update_strategy = other.parse().expect("known strategy");
        }
    }
    c
}

/// Interference only ever adds time, so the fastest round is the estimate.
fn fastest(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Every round repeats the same deterministic steps, so each step's fastest
/// repetition is its cost; summing those drops spikes that hit single steps.
fn fastest_per_step(rounds: &[Vec<f64>]) -> f64 {
    let steps = rounds.iter().map(Vec::len).min().unwrap_or(0);
    (0..steps).map(|i| fastest(&rounds.iter().map(|r| r[i]).collect::<Vec<_>>())).sum()
}

/// Time `iterations` steps of each variant on the same configuration and seed.
/// Variants are interleaved across `rounds`.
pub fn bench_strategies(template: &Config, iterations: u64, rounds: usize) -> Result<BenchReport> {
    let rounds = rounds.max(1);
    let mut rows: Vec<BenchRow> = BENCH_STRATEGIES
        .iter()
        .map(|s| BenchRow {
            strategy: s.to_string(),
            seconds_per_100_iters: 0.0,
            backward_calls_per_step: 0.0,
            rounds: Vec::new(),
        })
        .collect();
    let mut step_secs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); rows.len()];
    for _ in 0..rounds {
        for (row, steps) in rows.iter_mut().zip(step_secs.iter_mut()) {
            let cfg = variant(template, &row.strategy);
            let mut trainer = Trainer::new(&cfg)?;
            let mut warm_calls = 0u64;
            let mut warm_steps = 0u64;
            let mut times = Vec::with_capacity(iterations as usize);
            for _ in 0..iterations {
                let start = Instant::now();
                let m = trainer.step()?;
                times.push(start.elapsed().as_secs_f64());
                if !m.cold {
                    warm_calls += m.backward_calls;
                    warm_steps += 1;
                }
            }
            row.rounds.push(times.iter().sum::<f64>() * 100.0 / iterations.max(1) as f64);
            steps.push(times);
            if warm_steps > 0 {
                row.backward_calls_per_step = warm_calls as f64 / warm_steps as f64;
            }
        }
    }
    for (row, steps) in rows.iter_mut().zip(&step_secs) {
        row.seconds_per_100_iters = fastest_per_step(steps) * 100.0 / iterations.max(1) as f64;
    }
    let t = |name: &str| rows.iter().find(|r| r.strategy == name).expect("variant").seconds_per_100_iters;
    let (base, ld, gb, gn) = (t("baseline"), t("loss_diff"), t("grad_bound"), t("grad_norm"));
    let checks = vec![
        OrderingCheck {
            name: "grad_norm > grad_bound".into(),
            measured: gn,
            limit: gb,
            passed: gn > gb,
        },
        OrderingCheck {
            name: "grad_bound > loss_diff".into(),
            measured: gb,
            limit: ld,
            passed: gb > ld,
        },
        OrderingCheck {
            name: "loss_diff <= 1.10 x baseline".into(),
            measured: ld / base,
            limit: LOSS_DIFF_OVERHEAD_LIMIT,
            passed: ld <= LOSS_DIFF_OVERHEAD_LIMIT * base,
        },
    ];
    Ok(BenchReport {
        iterations,
        rounds,
        rows,
        checks,
    })
}
