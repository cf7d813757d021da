use std::cell::Cell;
use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use super::sum_tree::SumTree;
use crate::error::{ensure_weight, Error, Result};
use crate::text::CorruptedExample;

pub type EntryId = u64;

const PRIORITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub entry_id: EntryId,
    pub example: CorruptedExample,
    pub weight: f64,
    pub insert_step: u64,
    pub sample_count: u64,
    pub last_loss: Option<f64>,
}

/// One draw from [`ReplayBuffer::sample`].
#[derive(Debug, Clone)]
pub struct Draw {
    pub entry_id: EntryId,
    pub example: CorruptedExample,
    /// Exact sampling probability at draw time.
    pub probability: f64,
    pub insert_step: u64,
    /// The entry's recorded loss before this draw.
    pub last_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BufferStats {
    pub mean_weight: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub live_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounters {
    pub adds: u64,
    pub updates: u64,
    pub stale_updates: u64,
    pub draws: u64,
    pub evictions: u64,
}

impl OpCounters {
    pub fn total(&self) -> u64 {
        self.adds + self.updates + self.stale_updates + self.draws
    }
}

/// Eviction order: lowest weight, then oldest insert step, then oldest id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct EvictKey {
    weight: f64,
    insert_step: u64,
    entry_id: EntryId,
}

impl EvictKey {
    const EMPTY: EvictKey = EvictKey {
        weight: f64::INFINITY,
        insert_step: u64::MAX,
        entry_id: u64::MAX,
    };

    fn before(&self, other: &EvictKey) -> bool {
        (self.weight, self.insert_step, self.entry_id) < (other.weight, other.insert_step, other.entry_id)
    }
}

/// Tournament tree over slots holding the slot with the smallest eviction key.
#[derive(Debug, Clone)]
struct MinTree {
    padded: usize,
    keys: Vec<EvictKey>,
    winners: Vec<usize>,
    visits: Cell<u64>,
}

impl MinTree {
    fn new(len: usize) -> Self {
        let padded = len.max(1).next_power_of_two();
        let mut winners = vec![0; 2 * padded];
        for (i, w) in winners[padded..].iter_mut().enumerate() {
            *w = i;
        }
        for i in (1..padded).rev() {
            winners[i] = winners[2 * i];
        }
        Self {
            padded,
            keys: vec![EvictKey::EMPTY; padded],
            winners,
            visits: Cell::new(0),
        }
    }

    fn set(&mut self, slot: usize, key: EvictKey) {
        self.keys[slot] = key;
        let mut idx = self.padded + slot;
        self.visits.set(self.visits.get() + 1);
        while idx > 1 {
            idx /= 2;
            let (l, r) = (self.winners[2 * idx], self.winners[2 * idx + 1]);
            self.winners[idx] = if self.keys[r].before(&self.keys[l]) { r } else { l };
            self.visits.set(self.visits.get() + 1);
        }
    }

    fn min_slot(&self) -> usize {
        self.winners[1]
    }
}

/// Fixed-capacity prioritized store. Slot `i` of the sum tree holds
/// `weight_i^alpha` for an occupied slot and 0 for an empty one.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    priority_floor: bool,
    slots: Vec<Option<BufferEntry>>,
    free: Vec<usize>,
    tree: SumTree,
    evict: MinTree,
    index: HashMap<EntryId, usize>,
    next_id: EntryId,
    counters: OpCounters,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Validation("buffer capacity must be positive".into()));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Validation(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self {
            capacity,
            alpha,
            priority_floor: false,
            slots: vec![None; capacity],
            free: (0..capacity).rev().collect(),
            tree: SumTree::new(capacity),
            evict: MinTree::new(capacity),
            index: HashMap::new(),
            next_id: 0,
            counters: OpCounters::default(),
        })
    }

    /// Clamp weights to 1e-8 before exponentiation when enabled.
    pub fn with_priority_floor(mut self, on: bool) -> Self {
        self.priority_floor = on;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn priority_floor(&self) -> bool {
        self.priority_floor
    }

    pub fn live_count(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn next_id(&self) -> EntryId {
        self.next_id
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn total_priority(&self) -> f64 {
        self.tree.total()
    }

    /// Node visits in the sum tree plus the eviction tree.
    pub fn eviction_tree_visits(&self) -> u64 {
        self.evict.visits.get()
    }

    pub fn reset_visit_counters(&self) {
        self.tree.reset_visits();
        self.evict.visits.set(0);
    }

    pub fn priority(&self, weight: f64) -> f64 {
        let w = if self.priority_floor { weight.max(PRIORITY_FLOOR) } else { weight };
        w.powf(self.alpha)
    }

    pub fn get(&self, id: EntryId) -> Option<&BufferEntry> {
        self.index.get(&id).and_then(|&s| self.slots[s].as_ref())
    }

    pub fn contains(&self, id: EntryId) -> bool {
        self.index.contains_key(&id)
    }

    /// Live entries in slot order.
    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.slots.iter().flatten()
    }

    pub(crate) fn slots(&self) -> impl Iterator<Item = (usize, &BufferEntry)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|e| (i, e)))
    }

    /// The entry that the next add would evict, when full.
    pub fn eviction_candidate(&self) -> Option<&BufferEntry> {
        if self.is_empty() {
            return None;
        }
        self.slots[self.evict.min_slot()].as_ref()
    }

    /// Insert, evicting the minimum-weight entry first when full. Returns the
    /// new id and the evicted entry, if any.
    pub fn add_with_eviction(
        &mut self,
        example: CorruptedExample,
        init_weight: f64,
        step: u64,
    ) -> Result<(EntryId, Option<BufferEntry>)> {
        ensure_weight(init_weight)?;
        let mut evicted = None;
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                let s = self.evict.min_slot();
                let old = self.slots[s].take().expect("full buffer has no empty slot");
                self.index.remove(&old.entry_id);
                self.counters.evictions += 1;
                evicted = Some(old);
                s
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        self.place(
            slot,
            BufferEntry {
                entry_id: id,
                example,
                weight: init_weight,
                insert_step: step,
                sample_count: 0,
                last_loss: None,
            },
        )?;
        self.counters.adds += 1;
        Ok((id, evicted))
    }

    pub fn add(&mut self, example: CorruptedExample, init_weight: f64, step: u64) -> Result<EntryId> {
        self.add_with_eviction(example, init_weight, step).map(|(id, _)| id)
    }

    fn place(&mut self, slot: usize, entry: BufferEntry) -> Result<()> {
        let priority = self.priority(entry.weight);
        self.tree.set(slot, priority)?;
        self.evict.set(
            slot,
            EvictKey {
                weight: entry.weight,
                insert_step: entry.insert_step,
                entry_id: entry.entry_id,
            },
        );
        self.index.insert(entry.entry_id, slot);
        self.slots[slot] = Some(entry);
        Ok(())
    }

    fn slot_of(&mut self, id: EntryId) -> Result<usize> {
        match self.index.get(&id) {
            Some(&s) => Ok(s),
            None => {
                self.counters.stale_updates += 1;
                Err(Error::StaleEntry(id))
            }
        }
    }

    pub fn update(&mut self, id: EntryId, new_weight: f64) -> Result<()> {
        ensure_weight(new_weight)?;
        let slot = self.slot_of(id)?;
        let priority = self.priority(new_weight);
        self.tree.set(slot, priority)?;
        let entry = self.slots[slot].as_mut().expect("indexed slot is occupied");
        entry.weight = new_weight;
        let key = EvictKey {
            weight: new_weight,
            insert_step: entry.insert_step,
            entry_id: id,
        };
        self.evict.set(slot, key);
        self.counters.updates += 1;
        Ok(())
    }

    /// Record the latest per-example loss without touching the weight.
    pub fn record_loss(&mut self, id: EntryId, loss: f64) -> Result<()> {
        let slot = self.slot_of(id)?;
        self.slots[slot].as_mut().expect("indexed slot is occupied").last_loss = Some(loss);
        Ok(())
    }

    /// `k` independent draws with replacement, each with probability
    /// `w_i^alpha / sum_j w_j^alpha`.
    pub fn sample<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<Vec<Draw>> {
        if self.is_empty() {
            return Err(Error::NotReady("buffer is empty"));
        }
        let total = self.tree.total();
        if !(total > 0.0) {
            return Err(Error::NotReady("total priority is zero"));
        }
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let u = rng.random_range(0.0..total);
            let slot = self.tree.find_prefix(u)?;
            let probability = self.tree.leaf(slot) / total;
            let entry = self.slots[slot].as_mut().expect("sampled slot is occupied");
            out.push(Draw {
                entry_id: entry.entry_id,
                example: entry.example.clone(),
                probability,
                insert_step: entry.insert_step,
                last_loss: entry.last_loss,
            });
            entry.sample_count += 1;
            self.counters.draws += 1;
        }
        Ok(out)
    }

    /// Raw-weight statistics. An empty buffer reports mean 1.0 and min/max 0.
    pub fn stats(&self) -> BufferStats {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for e in self.entries() {
            n += 1;
            sum += e.weight;
            min = min.min(e.weight);
            max = max.max(e.weight);
        }
        if n == 0 {
            return BufferStats {
                mean_weight: 1.0,
                min_weight: 0.0,
                max_weight: 0.0,
                live_count: 0,
            };
        }
        BufferStats {
            mean_weight: sum / n as f64,
            min_weight: min,
            max_weight: max,
            live_count: n,
        }
    }

    /// Rebuild from saved slots. Used when restoring a checkpoint.
    pub fn restore(
        capacity: usize,
        alpha: f64,
        priority_floor: bool,
        next_id: EntryId,
        entries: Vec<(usize, BufferEntry)>,
    ) -> Result<Self> {
        let mut buf = Self::new(capacity, alpha)?.with_priority_floor(priority_floor);
        for (slot, entry) in entries {
            if slot >= capacity || buf.slots[slot].is_some() {
                return Err(Error::Validation(format!("bad or duplicate slot {slot}")));
            }
            if entry.entry_id >= next_id {
                return Err(Error::Validation("entry id beyond next_id".into()));
            }
            ensure_weight(entry.weight)?;
            buf.place(slot, entry)?;
        }
        buf.free = (0..capacity).rev().filter(|&s| buf.slots[s].is_none()).collect();
        buf.next_id = next_id;
        buf.reset_visit_counters();
        Ok(buf)
    }

    /// Relative gap between the tree total and the sum of live priorities.
    pub fn sum_consistency_error(&self) -> f64 {
        let direct: f64 = self.entries().map(|e| self.priority(e.weight)).sum();
        let total = self.tree.total();
        let scale = direct.abs().max(total.abs()).max(f64::MIN_POSITIVE);
        (total - direct).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::text::{TokenSequence, CLS};

    fn ex(tag: u32) -> CorruptedExample {
        let original = TokenSequence::new(vec![CLS, 4 + tag], 100_000).unwrap();
        CorruptedExample::from_parts(vec![CLS, 4 + tag], original, vec![1]).unwrap()
    }

    fn buffer_with(weights: &[f64], alpha: f64) -> (ReplayBuffer, Vec<EntryId>) {
        let mut b = ReplayBuffer::new(weights.len(), alpha).unwrap();
        let ids = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| b.add(ex(i as u32), w, i as u64).unwrap())
            .collect();
        (b, ids)
    }

    #[test]
    fn add_without_eviction() {
        let mut b = ReplayBuffer::new(2, 1.0).unwrap();
        b.add(ex(0), 1.0, 0).unwrap();
        b.add(ex(1), 2.0, 0).unwrap();
        assert_eq!(b.live_count(), 2);
        assert_eq!(b.counters().evictions, 0);
    }

    #[test]
    fn evicts_lowest_weight() {
        let (mut b, ids) = buffer_with(&[1.0, 2.0], 1.0);
        let (c, evicted) = b.add_with_eviction(ex(2), 1.5, 2).unwrap();
        assert_eq!(evicted.unwrap().entry_id, ids[0]);
        assert!(b.contains(c) && b.contains(ids[1]) && !b.contains(ids[0]));
        assert_eq!(b.live_count(), 2);
    }

    #[test]
    fn eviction_tie_prefers_oldest() {
        let (mut b, ids) = buffer_with(&[1.0, 1.0], 1.0);
        let (_, evicted) = b.add_with_eviction(ex(2), 5.0, 2).unwrap();
        assert_eq!(evicted.unwrap().entry_id, ids[0]);
    }

    #[test]
    fn update_changes_mass() {
        let (mut b, ids) = buffer_with(&[2.0, 1.0], 1.0);
        b.update(ids[0], 3.0).unwrap();
        assert_eq!(b.tree().leaf(0), 3.0);
        assert_eq!(b.total_priority(), 4.0);
    }

    #[test]
    fn zero_weight_is_live_but_unsampled() {
        let (mut b, ids) = buffer_with(&[2.0, 1.0], 1.0);
        b.update(ids[0], 0.0).unwrap();
        assert!(b.contains(ids[0]));
        let mut rng = seeded(1);
        assert!(b.sample(200, &mut rng).unwrap().iter().all(|d| d.entry_id == ids[1]));
        assert_eq!(b.eviction_candidate().unwrap().entry_id, ids[0]);
    }

    #[test]
    fn stale_update_is_signalled() {
        let (mut b, ids) = buffer_with(&[1.0, 2.0], 1.0);
        b.add(ex(9), 3.0, 5).unwrap();
        let before: Vec<f64> = b.tree().leaves().to_vec();
        let err = b.update(ids[0], 10.0).unwrap_err();
        assert!(err.is_stale());
        assert_eq!(b.tree().leaves(), &before[..]);
        assert_eq!(b.counters().stale_updates, 1);
    }

    #[test]
    fn sample_not_ready() {
        let mut b = ReplayBuffer::new(4, 1.0).unwrap();
        let mut rng = seeded(1);
        assert!(matches!(b.sample(1, &mut rng), Err(Error::NotReady(_))));
        let id = b.add(ex(0), 0.0, 0).unwrap();
        assert!(matches!(b.sample(1, &mut rng), Err(Error::NotReady(_))));
        b.update(id, 1.0).unwrap();
        assert_eq!(b.sample(3, &mut rng).unwrap().len(), 3);
    }

    #[test]
    fn sqrt_prioritization_probabilities() {
        let (mut b, _) = buffer_with(&[1.0, 4.0], 0.5);
        let mut rng = seeded(2);
        let draws = b.sample(1, &mut rng).unwrap();
        let p = draws[0].probability;
        assert!((p - 1.0 / 3.0).abs() < 1e-15 || (p - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sample_counts_increment() {
        let (mut b, ids) = buffer_with(&[1.0], 1.0);
        let mut rng = seeded(2);
        b.sample(5, &mut rng).unwrap();
        assert_eq!(b.get(ids[0]).unwrap().sample_count, 5);
    }

    #[test]
    fn stats() {
        let (b, _) = buffer_with(&[1.0, 3.0], 1.0);
        assert_eq!(b.stats().mean_weight, 2.0);
        let empty = ReplayBuffer::new(3, 1.0).unwrap();
        assert_eq!(empty.stats().mean_weight, 1.0);
        let (b, _) = buffer_with(&[0.5; 1000], 1.0);
        let s = b.stats();
        assert_eq!((s.mean_weight, s.min_weight, s.max_weight, s.live_count), (0.5, 0.5, 0.5, 1000));
    }

    #[test]
    fn priority_floor() {
        let b = ReplayBuffer::new(1, 1.0).unwrap().with_priority_floor(true);
        assert_eq!(b.priority(0.0), 1e-8);
        let b = ReplayBuffer::new(1, 1.0).unwrap();
        assert_eq!(b.priority(0.0), 0.0);
    }

    #[test]
    fn rejects_bad_weights() {
        let mut b = ReplayBuffer::new(1, 1.0).unwrap();
        assert!(b.add(ex(0), -1.0, 0).is_err());
        assert!(b.add(ex(0), f64::INFINITY, 0).is_err());
        assert!(ReplayBuffer::new(0, 1.0).is_err());
    }

    #[test]
    fn restore_round_trip() {
        let (mut b, ids) = buffer_with(&[1.0, 2.0, 3.0], 1.0);
        b.record_loss(ids[1], 0.25).unwrap();
        let saved: Vec<_> = b.slots().map(|(s, e)| (s, e.clone())).collect();
        let r = ReplayBuffer::restore(3, 1.0, false, b.next_id(), saved).unwrap();
        assert_eq!(r.entries().collect::<Vec<_>>(), b.entries().collect::<Vec<_>>());
        assert_eq!(r.tree().leaves(), b.tree().leaves());
    }
}
