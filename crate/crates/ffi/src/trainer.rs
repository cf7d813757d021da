use std::ffi::c_char;
use std::path::Path;

use tmr::config::Config;
use tmr::trainer::{checkpoint_path, Trainer};

use crate::{guard, handle, out, string, TmrStatus};

/// Opaque pretraining loop over the bundled corpus.
pub struct TmrTrainer {
    inner: Trainer,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TmrStepMetrics {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_combined: f64,
    /// Most recent drift evaluation; NaN before the first one.
    pub drift_exact_recovery: f64,
    pub buffer_live: usize,
    pub buffer_mean_weight: f64,
    pub backward_calls: u64,
    /// 1 while the buffer is too small to fill a batch.
    pub cold: u8,
}

/// Build a trainer from `key = value` lines. Null or empty text means the
/// defaults. Configuration errors return `TMR_CONFIG` listing every bad key.
///
/// # Safety
/// `config_text` must be null or a NUL-terminated string; `out_trainer` must be
/// valid for a write. Free the result with [`tmr_trainer_free`].
#[no_mangle]
pub unsafe extern "C" fn tmr_trainer_new(config_text: *const c_char, out_trainer: *mut *mut TmrTrainer) -> TmrStatus {
    guard(|| {
        let slot = out(out_trainer, "out_trainer")?;
        let cfg = if config_text.is_null() {
            Config::default()
        } else {
            Config::parse(string(config_text, "config_text")?)?
        };
        cfg.ensure_valid()?;
        let inner = Trainer::new(&cfg)?;
        *slot = Box::into_raw(Box::new(TmrTrainer { inner }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must come from [`tmr_trainer_new`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tmr_trainer_free(trainer: *mut TmrTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Run one iteration. `out_metrics` may be null.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmr_trainer_step(trainer: *mut TmrTrainer, out_metrics: *mut TmrStepMetrics) -> TmrStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let m = t.inner.step()?;
        if let Some(slot) = out_metrics.as_mut() {
            *slot = TmrStepMetrics {
                step: m.step,
                loss_g: m.loss_g,
                loss_d: m.loss_d,
                loss_combined: m.loss_combined,
                drift_exact_recovery: m.drift_exact_recovery,
                buffer_live: m.buffer_live,
                buffer_mean_weight: m.buffer_mean_w,
                backward_calls: m.backward_calls,
                cold: m.cold as u8,
            };
        }
        Ok(())
    })
}

/// # Safety
/// `trainer` must be a live handle and `out_steps` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmr_trainer_step_count(trainer: *mut TmrTrainer, out_steps: *mut u64) -> TmrStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        *out(out_steps, "out_steps")? = t.inner.step_count();
        Ok(())
    })
}

/// Save a checkpoint as `<dir>/checkpoints/step_NNNNNN.manifest`.
///
/// # Safety
/// `trainer` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tmr_trainer_save_checkpoint(trainer: *mut TmrTrainer, dir: *const c_char) -> TmrStatus {
    guard(|| {
        let t = handle(trainer, "trainer")?;
        let dir = Path::new(string(dir, "dir")?);
        let path = checkpoint_path(dir, t.inner.step_count());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| tmr::Error::io(parent, e))?;
        }
        t.inner.checkpoint().save(&path)?;
        Ok(())
    })
}
