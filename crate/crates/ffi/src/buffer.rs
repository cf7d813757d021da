use tmr::replay::ReplayBuffer;
use tmr::rng::{seeded, StreamRng};
use tmr::text::{CorruptedExample, TokenSequence};

use crate::{guard, handle, out, slice, slice_mut, TmrStatus};

/// Opaque replay buffer with its own sampling stream.
pub struct TmrReplayBuffer {
    inner: ReplayBuffer,
    rng: StreamRng,
}

/// # Safety
/// `out_buffer` must be valid for a write. Free the result with
/// [`tmr_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_new(
    capacity: usize,
    alpha: f64,
    seed: u64,
    out_buffer: *mut *mut TmrReplayBuffer,
) -> TmrStatus {
    guard(|| {
        let slot = out(out_buffer, "out_buffer")?;
        let inner = ReplayBuffer::new(capacity, alpha)?;
        *slot = Box::into_raw(Box::new(TmrReplayBuffer { inner, rng: seeded(seed) }));
        Ok(())
    })
}

/// # Safety
/// `buffer` must come from [`tmr_buffer_new`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_free(buffer: *mut TmrReplayBuffer) {
    if !buffer.is_null() {
        drop(Box::from_raw(buffer));
    }
}

/// Add one corrupted example. `tokens` and `original` both hold `len` ids and
/// `original` must start with CLS. Evicts the lowest-weight entry when full.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_add(
    buffer: *mut TmrReplayBuffer,
    tokens: *const u32,
    original: *const u32,
    len: usize,
    vocab_size: usize,
    mask_positions: *const usize,
    n_masked: usize,
    weight: f64,
    step: u64,
    out_id: *mut u64,
) -> TmrStatus {
    guard(|| {
        let b = handle(buffer, "buffer")?;
        let id_slot = out(out_id, "out_id")?;
        let tokens = slice(tokens, len, "tokens")?;
        let original = slice(original, len, "original")?;
        let masked = slice(mask_positions, n_masked, "mask_positions")?;
        let seq = TokenSequence::new(original.to_vec(), vocab_size)?;
        let ex = CorruptedExample::from_parts(tokens.to_vec(), seq, masked.to_vec())?;
        *id_slot = b.inner.add(ex, weight, step)?;
        Ok(())
    })
}

/// # Safety
/// `buffer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_update(buffer: *mut TmrReplayBuffer, id: u64, weight: f64) -> TmrStatus {
    guard(|| {
        handle(buffer, "buffer")?.inner.update(id, weight)?;
        Ok(())
    })
}

/// # Safety
/// `buffer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_record_loss(buffer: *mut TmrReplayBuffer, id: u64, loss: f64) -> TmrStatus {
    guard(|| {
        handle(buffer, "buffer")?.inner.record_loss(id, loss)?;
        Ok(())
    })
}

/// Draw `k` entries with replacement. Writes ids and their sampling
/// probabilities; `out_probabilities` may be null.
///
/// # Safety
/// `out_ids` (and `out_probabilities` if not null) must hold `k` elements.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_sample(
    buffer: *mut TmrReplayBuffer,
    k: usize,
    out_ids: *mut u64,
    out_probabilities: *mut f64,
) -> TmrStatus {
    guard(|| {
        let b = handle(buffer, "buffer")?;
        let ids = slice_mut(out_ids, k, "out_ids")?;
        let mut probs = if out_probabilities.is_null() {
            None
        } else {
            Some(slice_mut(out_probabilities, k, "out_probabilities")?)
        };
        let draws = b.inner.sample(k, &mut b.rng)?;
        for (i, d) in draws.iter().enumerate() {
            ids[i] = d.entry_id;
            if let Some(p) = probs.as_deref_mut() {
                p[i] = d.probability;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `buffer` must be a live handle and `out_weight` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_weight(buffer: *mut TmrReplayBuffer, id: u64, out_weight: *mut f64) -> TmrStatus {
    guard(|| {
        let b = handle(buffer, "buffer")?;
        let slot = out(out_weight, "out_weight")?;
        *slot = b.inner.get(id).ok_or(tmr::Error::StaleEntry(id))?.weight;
        Ok(())
    })
}

/// # Safety
/// `buffer` must be a live handle and `out_len` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_len(buffer: *mut TmrReplayBuffer, out_len: *mut usize) -> TmrStatus {
    guard(|| {
        let b = handle(buffer, "buffer")?;
        *out(out_len, "out_len")? = b.inner.live_count();
        Ok(())
    })
}

/// Sum of w^alpha over live entries.
///
/// # Safety
/// `buffer` must be a live handle and `out_total` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn tmr_buffer_total_priority(buffer: *mut TmrReplayBuffer, out_total: *mut f64) -> TmrStatus {
    guard(|| {
        let b = handle(buffer, "buffer")?;
        *out(out_total, "out_total")? = b.inner.total_priority();
        Ok(())
    })
}
