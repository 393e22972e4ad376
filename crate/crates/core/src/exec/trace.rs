use alloc::collections::BTreeMap;

/// Live-buffer accounting with a high-water mark.
///
/// Buffers are keyed by an id chosen by the caller; re-keying models a buffer
/// that changes which tensor it holds without being copied.
#[derive(Clone, Debug, Default)]
pub struct MemoryTracker {
    live: BTreeMap<u64, u64>,
    current: u64,
    peak: u64,
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, id: u64, bytes: u64) {
        let old = self.live.insert(id, bytes);
        assert!(old.is_none(), "buffer {id} allocated twice");
        self.current += bytes;
    }

    pub fn free(&mut self, id: u64) {
        let bytes = self.live.remove(&id).expect("freeing a dead buffer");
        self.current -= bytes;
    }

    pub fn resize(&mut self, id: u64, bytes: u64) {
        let slot = self.live.get_mut(&id).expect("resizing a dead buffer");
        self.current = self.current - *slot + bytes;
        *slot = bytes;
    }

    pub fn rekey(&mut self, from: u64, to: u64) {
        if from != to {
            let bytes = self.live.remove(&from).expect("re-keying a dead buffer");
            let old = self.live.insert(to, bytes);
            assert!(old.is_none(), "buffer {to} already live");
        }
    }

    pub fn is_live(&self, id: u64) -> bool {
        self.live.contains_key(&id)
    }

    pub fn live_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.live.keys().copied()
    }

    /// Records the current total as a candidate peak.
    pub fn observe(&mut self) {
        self.peak = self.peak.max(self.current);
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_water_mark() {
        let mut t = MemoryTracker::new();
        t.alloc(0, 10);
        t.alloc(1, 5);
        t.observe();
        t.free(0);
        t.resize(1, 8);
        t.observe();
        t.rekey(1, 2);
        assert_eq!((t.current(), t.peak()), (8, 15));
        assert!(t.is_live(2) && !t.is_live(1));
    }
}
