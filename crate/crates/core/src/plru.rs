//! Tree pseudo-LRU replacement and a generic set-associative store built on it.
//!
//! A tree over `W` ways keeps `W - 1` direction bits. Each internal node points
//! toward the half that should be victimised next; touching a way flips every
//! node on its root-to-leaf path to point away from it.

/// Tree-PLRU state for a single set. `ways` must be a power of two in `1..=64`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreePlru {
    bits: u64,
    ways: usize,
}

impl TreePlru {
    pub fn new(ways: usize) -> Self {
        assert!(
            ways.is_power_of_two() && ways <= 64,
            "tree-PLRU needs a power-of-two way count <= 64"
        );
        Self { bits: 0, ways }
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    /// Mark `way` most recently used.
    pub fn touch(&mut self, way: usize) {
        debug_assert!(way < self.ways);
        let mut node = 0usize;
        let mut lo = 0usize;
        let mut span = self.ways;
        while span > 1 {
            let half = span / 2;
            if way < lo + half {
                // Accessed left; victim direction points right.
                self.bits |= 1 << node;
                node = 2 * node + 1;
            } else {
                self.bits &= !(1 << node);
                node = 2 * node + 2;
                lo += half;
            }
            span = half;
        }
    }

    /// The way the tree currently points at.
    pub fn victim(&self) -> usize {
        let mut node = 0usize;
        let mut lo = 0usize;
        let mut span = self.ways;
        while span > 1 {
            let half = span / 2;
            if self.bits & (1 << node) != 0 {
                node = 2 * node + 2;
                lo += half;
            } else {
                node = 2 * node + 1;
            }
            span = half;
        }
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Set<V> {
    ways: Vec<Option<(u64, V)>>,
    plru: TreePlru,
}

/// Set-associative array keyed by line number, one `V` per resident line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetAssoc<V> {
    sets: Vec<Set<V>>,
}

impl<V> SetAssoc<V> {
    pub fn new(num_sets: usize, ways: usize) -> Self {
        assert!(num_sets > 0, "a cache needs at least one set");
        let sets = (0..num_sets)
            .map(|_| Set {
                ways: (0..ways).map(|_| None).collect(),
                plru: TreePlru::new(ways),
            })
            .collect();
        Self { sets }
    }

    pub fn num_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn ways(&self) -> usize {
        self.sets[0].ways.len()
    }

    pub fn set_index(&self, line: u64) -> usize {
        (line % self.sets.len() as u64) as usize
    }

    fn find(&self, line: u64) -> Option<(usize, usize)> {
        let s = self.set_index(line);
        self.sets[s]
            .ways
            .iter()
            .position(|w| matches!(w, Some((tag, _)) if *tag == line))
            .map(|w| (s, w))
    }

    pub fn contains(&self, line: u64) -> bool {
        self.find(line).is_some()
    }

    pub fn get(&self, line: u64) -> Option<&V> {
        self.find(line)
            .and_then(|(s, w)| self.sets[s].ways[w].as_ref().map(|(_, v)| v))
    }

    pub fn get_mut(&mut self, line: u64) -> Option<&mut V> {
        let (s, w) = self.find(line)?;
        self.sets[s].ways[w].as_mut().map(|(_, v)| v)
    }

    /// Update replacement state for a resident line. Returns false if absent.
    pub fn touch(&mut self, line: u64) -> bool {
        match self.find(line) {
            Some((s, w)) => {
                self.sets[s].plru.touch(w);
                true
            }
            None => false,
        }
    }

    /// Insert (or overwrite) `line`, returning whatever had to be evicted.
    pub fn insert(&mut self, line: u64, value: V) -> Option<(u64, V)> {
        if let Some((s, w)) = self.find(line) {
            self.sets[s].ways[w] = Some((line, value));
            self.sets[s].plru.touch(w);
            return None;
        }
        let s = self.set_index(line);
        let set = &mut self.sets[s];
        let way = set
            .ways
            .iter()
            .position(Option::is_none)
            .unwrap_or_else(|| set.plru.victim());
        let evicted = set.ways[way].replace((line, value));
        set.plru.touch(way);
        evicted
    }

    /// The line that would be evicted if `line` were inserted now.
    pub fn would_evict(&self, line: u64) -> Option<u64> {
        if self.contains(line) {
            return None;
        }
        let set = &self.sets[self.set_index(line)];
        if set.ways.iter().any(Option::is_none) {
            return None;
        }
        set.ways[set.plru.victim()].as_ref().map(|(tag, _)| *tag)
    }

    pub fn remove(&mut self, line: u64) -> Option<V> {
        let (s, w) = self.find(line)?;
        self.sets[s].ways[w].take().map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &V)> {
        self.sets
            .iter()
            .flat_map(|s| s.ways.iter().flatten().map(|(tag, v)| (*tag, v)))
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plru(&self, set: usize) -> &TreePlru {
        &self.sets[set].plru
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn victim_cycles_through_all_ways_when_touched_in_victim_order() {
        let mut plru = TreePlru::new(8);
        let mut seen = Vec::new();
        for _ in 0..8 {
            let v = plru.victim();
            seen.push(v);
            plru.touch(v);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn most_recent_way_is_never_victim() {
        let mut plru = TreePlru::new(16);
        for w in [3, 9, 0, 15, 7, 7, 2] {
            plru.touch(w);
            assert_ne!(plru.victim(), w);
        }
    }

    #[test]
    fn single_way_always_victimises_way_zero() {
        let mut plru = TreePlru::new(1);
        plru.touch(0);
        assert_eq!(plru.victim(), 0);
    }

    #[test]
    fn set_assoc_fills_empty_ways_before_evicting() {
        let mut c: SetAssoc<()> = SetAssoc::new(1, 4);
        for line in 0..4 {
            assert!(c.insert(line, ()).is_none());
        }
        c.touch(0);
        let evicted = c.insert(10, ()).map(|(l, _)| l);
        assert!(evicted.is_some());
        assert_ne!(evicted, Some(0));
        assert_eq!(c.len(), 4);
    }

    #[test]
    fn would_evict_matches_insert() {
        let mut c: SetAssoc<u8> = SetAssoc::new(2, 2);
        for line in [0, 2, 4, 6, 1] {
            let predicted = c.would_evict(line);
            let actual = c.insert(line, 0).map(|(l, _)| l);
            assert_eq!(predicted, actual);
        }
    }
}
