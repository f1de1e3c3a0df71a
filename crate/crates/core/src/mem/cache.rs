use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
struct Way {
    line: u64,
    dirty: bool,
    shadow: bool,
    last_use: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub line: u64,
    pub dirty: bool,
}

/// One set-associative, LRU-replaced slice of the L2. Sets are allocated
/// lazily so very large caches cost nothing until touched.
#[derive(Debug)]
pub struct CacheSlice {
    sets: HashMap<u64, Vec<Way>>,
    num_sets: u64,
    ways: usize,
    /// Slice count; lines reaching a slice are spread over its sets by
    /// `line / stride`.
    stride: u64,
    clock: u64,
    resident: u64,
}

impl CacheSlice {
    pub fn new(num_sets: u64, ways: u32, stride: u32) -> Self {
        Self {
            sets: HashMap::new(),
            num_sets,
            ways: ways as usize,
            stride: u64::from(stride),
            clock: 0,
            resident: 0,
        }
    }

    fn set_index(&self, line: u64) -> u64 {
        (line / self.stride) % self.num_sets
    }

    pub fn capacity_lines(&self) -> u64 {
        self.num_sets * self.ways as u64
    }

    pub fn resident_lines(&self) -> u64 {
        self.resident
    }

    pub fn occupancy(&self) -> f64 {
        self.resident as f64 / self.capacity_lines() as f64
    }

    pub fn contains(&self, line: u64) -> bool {
        self.sets
            .get(&self.set_index(line))
            .is_some_and(|set| set.iter().any(|w| w.line == line))
    }

    /// Looks up `line`, refreshing its LRU position on a hit. Returns
    /// whether it hit.
    pub fn access(&mut self, line: u64, write: bool) -> bool {
        self.clock += 1;
        let clock = self.clock;
        let idx = self.set_index(line);
        let Some(set) = self.sets.get_mut(&idx) else { return false };
        match set.iter_mut().find(|w| w.line == line) {
            Some(way) => {
                way.last_use = clock;
                if write {
                    way.dirty = true;
                    way.shadow = false;
                }
                true
            }
            None => false,
        }
    }

    /// Installs a line that is not resident, evicting the LRU way of a
    /// full set.
    pub fn insert(&mut self, line: u64, dirty: bool, shadow: bool) -> Option<Evicted> {
        debug_assert!(!self.contains(line));
        self.clock += 1;
        let way = Way { line, dirty, shadow, last_use: self.clock };
        let idx = self.set_index(line);
        let ways = self.ways;
        let set = self.sets.entry(idx).or_insert_with(|| Vec::with_capacity(ways));
        if set.len() < ways {
            set.push(way);
            self.resident += 1;
            return None;
        }
        let (victim, _) = set
            .iter()
            .enumerate()
            .min_by_key(|(_, w)| w.last_use)
            .expect("full set has ways");
        let old = std::mem::replace(&mut set[victim], way);
        Some(Evicted { line: old.line, dirty: old.dirty })
    }

    /// Removes and returns every dirty line.
    pub fn drain_dirty(&mut self) -> Vec<u64> {
        let mut out = Vec::new();
        for set in self.sets.values_mut() {
            for w in set.iter_mut().filter(|w| w.dirty) {
                w.dirty = false;
                out.push(w.line);
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lru_eviction_in_one_set() {
        let mut c = CacheSlice::new(1, 2, 1);
        assert!(c.insert(1, false, false).is_none());
        assert!(c.insert(2, true, false).is_none());
        assert!(c.access(1, false));
        // 2 is now least recently used
        assert_eq!(c.insert(3, false, false), Some(Evicted { line: 2, dirty: true }));
        assert!(c.contains(1) && c.contains(3) && !c.contains(2));
        assert_eq!(c.resident_lines(), 2);
    }

    #[test]
    fn sets_are_independent() {
        let mut c = CacheSlice::new(4, 1, 1);
        for line in 0..4 {
            assert!(c.insert(line, false, false).is_none());
        }
        assert_eq!(c.occupancy(), 1.0);
        assert_eq!(c.insert(4, false, false), Some(Evicted { line: 0, dirty: false }));
    }

    #[test]
    fn drain_dirty_clears_flags() {
        let mut c = CacheSlice::new(2, 2, 1);
        c.insert(5, true, false);
        c.insert(6, false, false);
        c.access(6, true);
        assert_eq!(c.drain_dirty(), vec![5, 6]);
        assert!(c.drain_dirty().is_empty());
    }
}
