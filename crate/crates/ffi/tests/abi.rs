use std::ffi::{CStr, CString};
use std::ptr;

use tmr_ffi::*;

fn last_error() -> String {
    let p = tmr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Buf(*mut TmrReplayBuffer);

impl Buf {
    fn new(capacity: usize, alpha: f64) -> Self {
        let mut p = ptr::null_mut();
        assert_eq!(unsafe { tmr_buffer_new(capacity, alpha, 7, &mut p) }, TmrStatus::TMR_OK);
        Buf(p)
    }

    fn add(&self, weight: f64, step: u64) -> Result<u64, TmrStatus> {
        // CLS, then three words; position 2 replaced.
        let original = [2u32, 5, 6, 7];
        let tokens = [2u32, 5, 9, 7];
        let masked = [2usize];
        let mut id = 0;
        let s = unsafe {
            tmr_buffer_add(self.0, tokens.as_ptr(), original.as_ptr(), 4, 20, masked.as_ptr(), 1, weight, step, &mut id)
        };
        if s == TmrStatus::TMR_OK {
            Ok(id)
        } else {
            Err(s)
        }
    }

    fn len(&self) -> usize {
        let mut n = 0;
        assert_eq!(unsafe { tmr_buffer_len(self.0, &mut n) }, TmrStatus::TMR_OK);
        n
    }
}

impl Drop for Buf {
    fn drop(&mut self) {
        unsafe { tmr_buffer_free(self.0) }
    }
}

#[test]
fn buffer_round_trip() {
    let b = Buf::new(3, 1.0);
    let ids: Vec<u64> = [1.0, 2.0, 3.0].iter().map(|&w| b.add(w, 0).unwrap()).collect();
    assert_eq!(b.len(), 3);
    let mut total = 0.0;
    assert_eq!(unsafe { tmr_buffer_total_priority(b.0, &mut total) }, TmrStatus::TMR_OK);
    assert_eq!(total, 6.0);

    let mut out = [0u64; 8];
    let mut probs = [0f64; 8];
    assert_eq!(unsafe { tmr_buffer_sample(b.0, 8, out.as_mut_ptr(), probs.as_mut_ptr()) }, TmrStatus::TMR_OK);
    for (id, p) in out.iter().zip(probs) {
        let i = ids.iter().position(|x| x == id).unwrap();
        assert!((p - (i + 1) as f64 / 6.0).abs() < 1e-12);
    }
    assert_eq!(unsafe { tmr_buffer_sample(b.0, 2, out.as_mut_ptr(), ptr::null_mut()) }, TmrStatus::TMR_OK);

    assert_eq!(unsafe { tmr_buffer_update(b.0, ids[0], 10.0) }, TmrStatus::TMR_OK);
    let mut w = 0.0;
    assert_eq!(unsafe { tmr_buffer_weight(b.0, ids[0], &mut w) }, TmrStatus::TMR_OK);
    assert_eq!(w, 10.0);
    assert_eq!(unsafe { tmr_buffer_record_loss(b.0, ids[0], 0.3) }, TmrStatus::TMR_OK);

    // Full: the weight-2 entry is now the minimum and goes.
    b.add(5.0, 1).unwrap();
    assert_eq!(b.len(), 3);
    assert_eq!(unsafe { tmr_buffer_weight(b.0, ids[1], &mut w) }, TmrStatus::TMR_STALE_ENTRY);
    assert_eq!(unsafe { tmr_buffer_update(b.0, ids[1], 1.0) }, TmrStatus::TMR_STALE_ENTRY);
    assert!(last_error().contains(&ids[1].to_string()));
}

#[test]
fn error_codes() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { tmr_buffer_new(0, 1.0, 0, &mut p) }, TmrStatus::TMR_INVALID_ARGUMENT);
    assert!(p.is_null());
    assert_eq!(unsafe { tmr_buffer_new(4, 1.0, 0, ptr::null_mut()) }, TmrStatus::TMR_NULL);
    assert_eq!(last_error(), "out_buffer is null");

    let b = Buf::new(4, 1.0);
    let mut ids = [0u64; 1];
    assert_eq!(unsafe { tmr_buffer_sample(b.0, 1, ids.as_mut_ptr(), ptr::null_mut()) }, TmrStatus::TMR_NOT_READY);
    assert_eq!(b.add(-1.0, 0), Err(TmrStatus::TMR_INVALID_ARGUMENT));
    assert_eq!(b.add(f64::NAN, 0), Err(TmrStatus::TMR_INVALID_ARGUMENT));
    let id = b.add(1.0, 0).unwrap();
    assert_eq!(unsafe { tmr_buffer_update(b.0, id, f64::INFINITY) }, TmrStatus::TMR_INVALID_ARGUMENT);
    assert_eq!(unsafe { tmr_buffer_sample(b.0, 1, ptr::null_mut(), ptr::null_mut()) }, TmrStatus::TMR_NULL);
    assert_eq!(unsafe { tmr_buffer_len(ptr::null_mut(), ptr::null_mut()) }, TmrStatus::TMR_NULL);

    // Original not starting with CLS.
    let bad = [5u32, 6];
    let mut out = 0;
    let s = unsafe { tmr_buffer_add(b.0, bad.as_ptr(), bad.as_ptr(), 2, 20, ptr::null(), 0, 1.0, 0, &mut out) };
    assert_eq!(s, TmrStatus::TMR_INVALID_ARGUMENT);
    assert!(last_error().contains("CLS"));

    tmr_clear_error();
    assert!(tmr_last_error().is_null());
    unsafe {
        tmr_buffer_free(ptr::null_mut());
        tmr_trainer_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_per_thread() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { tmr_buffer_new(0, 1.0, 0, &mut p) }, TmrStatus::TMR_INVALID_ARGUMENT);
    std::thread::spawn(|| assert!(tmr_last_error().is_null())).join().unwrap();
    assert!(!tmr_last_error().is_null());
}

const SMALL: &str = "batch_size = 4\nbuffer_capacity = 16\nmax_seq_len = 12\nemb_dim = 8\n\
gen_layers = 1\ngen_hidden = 8\ngen_heads = 2\ndisc_layers = 1\ndisc_hidden = 12\ndisc_heads = 2\n\
ffn_mult = 2\neval_every = 5\ndrift_eval_masks = 1\n";

fn trainer(text: &str) -> Result<*mut TmrTrainer, TmrStatus> {
    let c = CString::new(text).unwrap();
    let mut t = ptr::null_mut();
    match unsafe { tmr_trainer_new(c.as_ptr(), &mut t) } {
        TmrStatus::TMR_OK => Ok(t),
        s => Err(s),
    }
}

#[test]
fn trainer_steps_and_checkpoints() {
    let t = trainer(SMALL).unwrap();
    let mut m = TmrStepMetrics::default();
    let mut seen = Vec::new();
    for _ in 0..6 {
        assert_eq!(unsafe { tmr_trainer_step(t, &mut m) }, TmrStatus::TMR_OK);
        assert!(m.loss_g.is_finite() && m.loss_d.is_finite());
        seen.push(m);
    }
    assert_eq!(seen[0].cold, 1);
    assert_eq!(seen[5].step, 5);
    assert_eq!(seen[5].cold, 0);
    assert_eq!(seen[5].buffer_live, 16);
    assert!(seen[0].drift_exact_recovery.is_finite());
    assert_eq!(unsafe { tmr_trainer_step(t, ptr::null_mut()) }, TmrStatus::TMR_OK);
    let mut n = 0;
    assert_eq!(unsafe { tmr_trainer_step_count(t, &mut n) }, TmrStatus::TMR_OK);
    assert_eq!(n, 7);

    let dir = tempfile::tempdir().unwrap();
    let c = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tmr_trainer_save_checkpoint(t, c.as_ptr()) }, TmrStatus::TMR_OK);
    assert!(dir.path().join("checkpoints/step_000007.manifest").exists());
    assert!(dir.path().join("checkpoints/step_000007.bin").exists());
    unsafe { tmr_trainer_free(t) };

    // Same config, same trajectory.
    let u = trainer(SMALL).unwrap();
    let mut again = TmrStepMetrics::default();
    for _ in 0..6 {
        unsafe { tmr_trainer_step(u, &mut again) };
    }
    assert_eq!(again.loss_d.to_bits(), seen[5].loss_d.to_bits());
    unsafe { tmr_trainer_free(u) };
}

#[test]
fn trainer_config_errors_name_every_key() {
    assert_eq!(trainer("alpha = x\nnot_a_key = 1\n").unwrap_err(), TmrStatus::TMR_CONFIG);
    let msg = last_error();
    assert!(msg.contains("alpha") && msg.contains("not_a_key"), "{msg}");
    assert_eq!(trainer("batch_size = 0\n").unwrap_err(), TmrStatus::TMR_CONFIG);
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { tmr_trainer_new(ptr::null(), ptr::null_mut()) }, TmrStatus::TMR_NULL);
    assert_eq!(unsafe { tmr_trainer_step(ptr::null_mut(), ptr::null_mut()) }, TmrStatus::TMR_NULL);
    assert_eq!(unsafe { tmr_trainer_save_checkpoint(t, ptr::null()) }, TmrStatus::TMR_NULL);
    // Defaults build.
    assert_eq!(unsafe { tmr_trainer_new(ptr::null(), &mut t) }, TmrStatus::TMR_OK);
    unsafe { tmr_trainer_free(t) };
}
