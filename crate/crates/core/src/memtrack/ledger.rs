use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("free of unknown or already-freed allocation {0}")]
    UnknownId(AllocId),
    #[error("allocation '{0}' has zero bytes")]
    ZeroBytes(String),
}

/// What a tracked allocation holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Param,
    Grad,
    OptimState,
    Activation,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Param,
        Category::Grad,
        Category::OptimState,
        Category::Activation,
    ];

    fn index(self) -> usize {
        match self {
            Category::Param => 0,
            Category::Grad => 1,
            Category::OptimState => 2,
            Category::Activation => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Param => "param",
            Category::Grad => "grad",
            Category::OptimState => "optim_state",
            Category::Activation => "activation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct AllocId(u64);

impl fmt::Display for AllocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Alloc,
    Free,
}

/// One entry of the append-only event log. `seq` is a logical clock, so two
/// identical runs produce identical logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub id: AllocId,
    pub bytes: usize,
    pub category: Category,
    pub label: String,
}

#[derive(Debug, Clone)]
struct Allocation {
    bytes: usize,
    category: Category,
    label: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CategoryStats {
    pub live_bytes: usize,
    pub peak_bytes: usize,
    pub live_count: usize,
    pub peak_count: usize,
}

/// Category-tagged allocation log with per-category peak tracking.
#[derive(Debug, Clone, Default)]
pub struct MemoryLedger {
    next_id: u64,
    clock: u64,
    live: BTreeMap<AllocId, Allocation>,
    stats: [CategoryStats; 4],
    total_live: usize,
    total_peak: usize,
    events: Vec<Event>,
    keep_events: bool,
}

impl MemoryLedger {
    pub fn new() -> Self {
        MemoryLedger {
            keep_events: true,
            ..Default::default()
        }
    }

    /// A ledger that maintains counters and peaks but no event log, for long runs.
    pub fn without_events() -> Self {
        MemoryLedger::default()
    }

    pub fn record_alloc(
        &mut self,
        label: impl Into<String>,
        bytes: usize,
        category: Category,
    ) -> Result<AllocId, LedgerError> {
        let label = label.into();
        if bytes == 0 {
            return Err(LedgerError::ZeroBytes(label));
        }
        let id = AllocId(self.next_id);
        self.next_id += 1;
        let s = &mut self.stats[category.index()];
        s.live_bytes += bytes;
        s.live_count += 1;
        s.peak_bytes = s.peak_bytes.max(s.live_bytes);
        s.peak_count = s.peak_count.max(s.live_count);
        self.total_live += bytes;
        self.total_peak = self.total_peak.max(self.total_live);
        self.log(EventKind::Alloc, id, bytes, category, &label);
        self.live.insert(
            id,
            Allocation {
                bytes,
                category,
                label,
            },
        );
        Ok(id)
    }

    pub fn record_free(&mut self, id: AllocId) -> Result<(), LedgerError> {
        let a = self.live.remove(&id).ok_or(LedgerError::UnknownId(id))?;
        let s = &mut self.stats[a.category.index()];
        s.live_bytes -= a.bytes;
        s.live_count -= 1;
        self.total_live -= a.bytes;
        self.log(EventKind::Free, id, a.bytes, a.category, &a.label);
        Ok(())
    }

    fn log(&mut self, kind: EventKind, id: AllocId, bytes: usize, category: Category, label: &str) {
        let seq = self.clock;
        self.clock += 1;
        if self.keep_events {
            self.events.push(Event {
                seq,
                kind,
                id,
                bytes,
                category,
                label: label.to_string(),
            });
        }
    }

    pub fn stats(&self, category: Category) -> CategoryStats {
        self.stats[category.index()]
    }

    pub fn live_bytes(&self, category: Category) -> usize {
        self.stats(category).live_bytes
    }

    pub fn peak_bytes(&self, category: Category) -> usize {
        self.stats(category).peak_bytes
    }

    pub fn peak_count(&self, category: Category) -> usize {
        self.stats(category).peak_count
    }

    pub fn total_live(&self) -> usize {
        self.total_live
    }

    pub fn total_peak(&self) -> usize {
        self.total_peak
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Forgets peaks, keeping live allocations. Peaks restart at current live values.
    pub fn reset_peaks(&mut self) {
        for s in &mut self.stats {
            s.peak_bytes = s.live_bytes;
            s.peak_count = s.live_count;
        }
        self.total_peak = self.total_live;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_then_free_keeps_peak() {
        let mut l = MemoryLedger::new();
        let id = l.record_alloc("a", 100, Category::Grad).unwrap();
        assert_eq!(l.peak_bytes(Category::Grad), 100);
        l.record_free(id).unwrap();
        assert_eq!(l.live_bytes(Category::Grad), 0);
        assert_eq!(l.peak_bytes(Category::Grad), 100);
    }

    #[test]
    fn interleaved_trace() {
        let mut l = MemoryLedger::new();
        let a = l.record_alloc("a", 100, Category::Activation).unwrap();
        let _b = l.record_alloc("b", 200, Category::Activation).unwrap();
        l.record_free(a).unwrap();
        let _c = l.record_alloc("c", 50, Category::Activation).unwrap();
        assert_eq!(l.peak_bytes(Category::Activation), 300);
        assert_eq!(l.live_bytes(Category::Activation), 250);
        assert_eq!(l.peak_count(Category::Activation), 2);
    }

    #[test]
    fn double_free_and_unknown_ids_fail() {
        let mut l = MemoryLedger::new();
        let a = l.record_alloc("a", 8, Category::Param).unwrap();
        l.record_free(a).unwrap();
        assert_eq!(l.record_free(a), Err(LedgerError::UnknownId(a)));
        assert!(l.record_alloc("z", 0, Category::Param).is_err());
    }

    #[test]
    fn categories_are_independent() {
        let mut l = MemoryLedger::new();
        l.record_alloc("p", 10, Category::Param).unwrap();
        let g = l.record_alloc("g", 20, Category::Grad).unwrap();
        l.record_free(g).unwrap();
        l.record_alloc("s", 5, Category::OptimState).unwrap();
        assert_eq!(l.live_bytes(Category::Param), 10);
        assert_eq!(l.live_bytes(Category::Grad), 0);
        assert_eq!(l.total_peak(), 30);
        assert_eq!(l.total_live(), 15);
        assert_eq!(l.events().len(), 4);
        assert!(l.events().windows(2).all(|w| w[0].seq < w[1].seq));
    }

    #[test]
    fn peak_never_below_live() {
        let mut l = MemoryLedger::without_events();
        let mut ids = Vec::new();
        for i in 1..50usize {
            ids.push(l.record_alloc("x", i * 3, Category::Grad).unwrap());
            if i % 3 == 0 {
                l.record_free(ids.remove(0)).unwrap();
            }
            let s = l.stats(Category::Grad);
            assert!(s.peak_bytes >= s.live_bytes);
            assert!(s.peak_count >= s.live_count);
        }
        assert!(l.events().is_empty());
    }
}
