//! Policies that assign a weight to each new buffer entry and refresh the
//! weights of sampled entries.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::replay::{BufferStats, ReplayBuffer};
use crate::text::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Average,
    Lsr,
    Linucb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    LossDiff,
    GradNorm,
    GradBound,
}

impl FromStr for InitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "average" => Ok(Self::Average),
            "lsr" => Ok(Self::Lsr),
            "linucb" => Ok(Self::Linucb),
            _ => Err(format!("unknown init strategy {s:?} (average, lsr, linucb)")),
        }
    }
}

impl FromStr for UpdateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "loss_diff" => Ok(Self::LossDiff),
            "grad_norm" => Ok(Self::GradNorm),
            "grad_bound" => Ok(Self::GradBound),
            _ => Err(format!("unknown update strategy {s:?} (loss_diff, grad_norm, grad_bound)")),
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Lsr => "lsr",
            Self::Linucb => "linucb",
        })
    }
}

impl fmt::Display for UpdateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LossDiff => "loss_diff",
            Self::GradNorm => "grad_norm",
            Self::GradBound => "grad_bound",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyConfig {
    pub init_kind: InitKind,
    pub update_kind: UpdateKind,
    pub ridge: f64,
    pub ucb_alpha: f64,
    pub feature_dim: usize,
    pub lsr_refit_every: u64,
}

impl StrategyConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            errs.push(format!("ridge must be positive, got {}", self.ridge));
        }
        if !(self.ucb_alpha > 0.0 && self.ucb_alpha.is_finite()) {
            errs.push(format!("ucb_alpha must be positive, got {}", self.ucb_alpha));
        }
        if self.feature_dim == 0 {
            errs.push("feature_dim must be positive".into());
        }
        if self.lsr_refit_every == 0 {
            errs.push("lsr_refit_every must be positive".into());
        }
        errs
    }
}

/// Token ids scaled by the vocabulary size, zero-padded to `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleFeatures(pub Vec<f64>);

impl ExampleFeatures {
    pub fn from_tokens(tokens: &[TokenId], vocab_size: usize, dim: usize) -> Self {
        let mut v = vec![0.0; dim];
        for (slot, &t) in v.iter_mut().zip(tokens) {
            *slot = t as f64 / vocab_size as f64;
        }
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn check_finite(&self) -> Result<()> {
        if self.0.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation("non-finite feature".into()))
        }
    }
}

pub fn init_weight_average(stats: &BufferStats) -> f64 {
    stats.mean_weight
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsrState {
    pub theta: DVector<f64>,
    pub fitted_at_step: u64,
}

impl LsrState {
    /// Ridge least squares: `theta = (X^T X + ridge I)^-1 X^T r`.
    pub fn fit(entries: &[(ExampleFeatures, f64)], ridge: f64, step: u64) -> Result<Self> {
        let Some((first, _)) = entries.first() else {
            return Err(Error::Fit("no entries to fit".into()));
        };
        let d = first.0.len();
        let mut gram = DMatrix::<f64>::identity(d, d) * ridge;
        let mut rhs = DVector::<f64>::zeros(d);
        for (x, r) in entries {
            if x.0.len() != d {
                return Err(Error::Fit("feature dimension mismatch".into()));
            }
            let xv = DVector::from_column_slice(&x.0);
            gram.ger(1.0, &xv, &xv, 1.0);
            rhs.axpy(*r, &xv, 1.0);
        }
        if !gram.iter().chain(rhs.iter()).all(|v| v.is_finite()) {
            return Err(Error::Fit("non-finite normal equations".into()));
        }
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Fit("normal matrix is not positive definite".into()))?;
        let theta = chol.solve(&rhs);
        let resid = (&gram * &theta - &rhs).norm();
        let scale = rhs.norm().max(f64::MIN_POSITIVE);
        if !theta.iter().all(|v| v.is_finite()) || resid / scale > 1e-6 && resid > 1e-12 {
            return Err(Error::Fit(format!("normal-equation residual {resid:e}")));
        }
        Ok(Self { theta, fitted_at_step: step })
    }

    pub fn predict(&self, x: &ExampleFeatures) -> f64 {
        self.theta.iter().zip(&x.0).map(|(a, b)| a * b).sum()
    }

    pub fn init_weight(&self, x: &ExampleFeatures) -> f64 {
        self.predict(x).max(0.0)
    }
}

/// Single shared linear model over example features, scored with an upper
/// confidence bound.
#[derive(Debug, Clone)]
pub struct LinUcbState {
    a: DMatrix<f64>,
    b: DVector<f64>,
    a_inv: Option<DMatrix<f64>>,
}

impl LinUcbState {
    pub fn new(dim: usize) -> Self {
        Self {
            a: DMatrix::identity(dim, dim),
            b: DVector::zeros(dim),
            a_inv: None,
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    fn inverse(&mut self) -> &DMatrix<f64> {
        let a = &self.a;
        self.a_inv.get_or_insert_with(|| {
            a.clone()
                .cholesky()
                .expect("A stays positive definite")
                .inverse()
        })
    }

    pub fn theta(&mut self) -> DVector<f64> {
        let b = self.b.clone();
        self.inverse() * b
    }

    /// `max(0, theta^T x + ucb_alpha * sqrt(x^T A^-1 x))`.
    pub fn init_weight(&mut self, x: &ExampleFeatures, ucb_alpha: f64) -> Result<f64> {
        x.check_finite()?;
        let xv = DVector::from_column_slice(&x.0);
        let b = self.b.clone();
        let a_inv = self.inverse();
        let ainv_x = a_inv * &xv;
        let mean = (a_inv * b).dot(&xv);
        let width = xv.dot(&ainv_x).max(0.0).sqrt();
        Ok((mean + ucb_alpha * width).max(0.0))
    }

    pub fn observe(&mut self, x: &ExampleFeatures, reward: f64) -> Result<()> {
        x.check_finite()?;
        if !reward.is_finite() {
            return Err(Error::Validation("non-finite reward".into()));
        }
        if x.0.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        let xv = DVector::from_column_slice(&x.0);
        self.a.ger(1.0, &xv, &xv, 1.0);
        self.b.axpy(reward, &xv, 1.0);
        self.a_inv = None;
        Ok(())
    }
}

/// `|curr - prev|`, or nothing on the first observation.
pub fn update_weight_loss_diff(prev_loss: Option<f64>, curr_loss: f64) -> Option<f64> {
    prev_loss.map(|p| (curr_loss - p).abs())
}

pub fn update_weight_grad_norm(norm: f64) -> f64 {
    norm
}

/// Euclidean norm of the per-token pre-activation gradients.
pub fn update_weight_grad_bound(logit_grads: &[f64]) -> f64 {
    logit_grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Owns the init-strategy state for a run.
#[derive(Debug, Clone)]
pub struct WeightPolicy {
    pub config: StrategyConfig,
    vocab_size: usize,
    lsr: Option<LsrState>,
    linucb: LinUcbState,
    reward_max: f64,
    fallback_inits: u64,
}

impl WeightPolicy {
    pub fn new(config: StrategyConfig, vocab_size: usize) -> Self {
        let linucb = LinUcbState::new(config.feature_dim);
        Self {
            config,
            vocab_size,
            lsr: None,
            linucb,
            reward_max: 0.0,
            fallback_inits: 0,
        }
    }

    pub fn features(&self, tokens: &[TokenId]) -> ExampleFeatures {
        ExampleFeatures::from_tokens(tokens, self.vocab_size, self.config.feature_dim)
    }

    pub fn lsr(&self) -> Option<&LsrState> {
        self.lsr.as_ref()
    }

    pub fn linucb(&self) -> &LinUcbState {
        &self.linucb
    }

    /// Adds that fell back to the average because LSR had not been fitted.
    pub fn fallback_inits(&self) -> u64 {
        self.fallback_inits
    }

    pub fn initial_weight(&mut self, stats: &BufferStats, tokens: &[TokenId]) -> Result<f64> {
        match self.config.init_kind {
            InitKind::Average => Ok(init_weight_average(stats)),
            InitKind::Lsr => match &self.lsr {
                Some(state) => Ok(state.init_weight(&self.features(tokens))),
                None => {
                    self.fallback_inits += 1;
                    log::debug!("LSR not fitted yet; using the average weight");
                    Ok(init_weight_average(stats))
                }
            },
            InitKind::Linucb => {
                let x = self.features(tokens);
                self.linucb.init_weight(&x, self.config.ucb_alpha)
            }
        }
    }

    /// Refit LSR over the buffer every `lsr_refit_every` steps.
    pub fn maybe_refit(&mut self, step: u64, buffer: &ReplayBuffer) -> Result<()> {
        if self.config.init_kind != InitKind::Lsr || buffer.is_empty() {
            return Ok(());
        }
        let due = match &self.lsr {
            None => true,
            Some(s) => step >= s.fitted_at_step + self.config.lsr_refit_every,
        };
        if due {
            let entries: Vec<_> = buffer
                .entries()
                .map(|e| (self.features(&e.example.tokens), e.weight))
                .collect();
            self.lsr = Some(LsrState::fit(&entries, self.config.ridge, step)?);
        }
        Ok(())
    }

    /// Feed LinUCB the observed `|dL|`, scaled by the running maximum.
    pub fn observe_reward(&mut self, tokens: &[TokenId], loss_change: f64) -> Result<()> {
        if self.config.init_kind != InitKind::Linucb {
            return Ok(());
        }
        self.reward_max = self.reward_max.max(loss_change);
        let reward = if self.reward_max > 0.0 { loss_change / self.reward_max } else { 0.0 };
        let x = self.features(tokens);
        self.linucb.observe(&x, reward)
    }
}
