//! Prioritized memory buffer backed by a sum tree.

mod buffer;
mod sum_tree;

pub use buffer::{BufferEntry, BufferStats, Draw, EntryId, OpCounters, ReplayBuffer};
pub use sum_tree::SumTree;
