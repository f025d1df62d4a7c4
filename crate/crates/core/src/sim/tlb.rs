use std::collections::{BTreeMap, HashMap};

use crate::addr::{self, Level};

/// Fixed-capacity LRU set keyed by `u64`.
#[derive(Debug, Clone)]
struct LruSet<V> {
    capacity: usize,
    clock: u64,
    entries: HashMap<u64, (u64, V)>,
    order: BTreeMap<u64, u64>,
}

impl<V: Copy> LruSet<V> {
    fn new(capacity: usize) -> Self {
        LruSet {
            capacity,
            clock: 0,
            entries: HashMap::with_capacity(capacity + 1),
            order: BTreeMap::new(),
        }
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Looks up `key` and marks it most recently used.
    fn get(&mut self, key: u64) -> Option<V> {
        let stamp = self.tick();
        let (old, v) = self.entries.get_mut(&key).map(|e| {
            let old = e.0;
            e.0 = stamp;
            (old, e.1)
        })?;
        self.order.remove(&old);
        self.order.insert(stamp, key);
        Some(v)
    }

    fn contains(&self, key: u64) -> bool {
        self.entries.contains_key(&key)
    }

    fn insert(&mut self, key: u64, value: V) {
        if self.capacity == 0 {
            return;
        }
        let stamp = self.tick();
        if let Some((old, _)) = self.entries.insert(key, (stamp, value)) {
            self.order.remove(&old);
        } else if self.entries.len() > self.capacity {
            let (_, victim) = self.order.pop_first().expect("non-empty order");
            self.entries.remove(&victim);
        }
        self.order.insert(stamp, key);
    }

    fn clear(&mut self) {
        self.entries.clear();
        self.order.clear();
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn keys(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.keys().copied()
    }
}

/// Last-level TLB model: fully associative LRU over page bases.
///
/// With `partitioned` set, user and kernel translations live in separate
/// halves and user-mode lookups never see the kernel half.
#[derive(Debug, Clone)]
pub struct Tlb {
    capacity: usize,
    partitioned: bool,
    user: LruSet<Level>,
    kernel: LruSet<Level>,
}

pub const DEFAULT_TLB_CAPACITY: usize = 1536;

impl Tlb {
    pub fn new(capacity: usize, partitioned: bool) -> Self {
        let (u, k) = if partitioned {
            (capacity / 2, capacity - capacity / 2)
        } else {
            (capacity, 0)
        };
        Tlb {
            capacity,
            partitioned,
            user: LruSet::new(u),
            kernel: LruSet::new(k),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_partitioned(&self) -> bool {
        self.partitioned
    }

    fn set_for(&mut self, page: u64) -> &mut LruSet<Level> {
        if self.partitioned && addr::is_kernel(page) {
            &mut self.kernel
        } else {
            &mut self.user
        }
    }

    /// User-mode lookup. Under partitioning kernel pages always miss.
    pub fn lookup_user(&mut self, page: u64) -> Option<Level> {
        if self.partitioned && addr::is_kernel(page) {
            return None;
        }
        self.user.get(page)
    }

    /// Inserts a translation on behalf of the owning privilege level.
    pub fn insert(&mut self, page: u64, level: Level) {
        self.set_for(page).insert(page, level);
    }

    pub fn contains(&self, page: u64) -> bool {
        self.user.contains(page) || self.kernel.contains(page)
    }

    pub fn flush(&mut self) {
        self.user.clear();
        self.kernel.clear();
    }

    pub fn len(&self) -> usize {
        self.user.len() + self.kernel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kernel_entries(&self) -> usize {
        self.user
            .keys()
            .chain(self.kernel.keys())
            .filter(|&p| addr::is_kernel(p))
            .count()
    }
}

/// Paging-structure caches: one LRU per non-leaf level (PML4E, PDPTE, PDE).
/// PT entries are leaves and are never cached here.
#[derive(Debug, Clone)]
pub struct PagingStructureCache {
    levels: [LruSet<()>; 3],
}

pub const DEFAULT_PSC_CAPACITY: usize = 16;

/// Levels whose entries point at a lower table, top first.
const NON_LEAF: [Level; 3] = [Level::Pml4, Level::Pdpt, Level::Pd];

fn shift(level: Level) -> u32 {
    match level {
        Level::Pml4 => 39,
        Level::Pdpt => 30,
        Level::Pd => 21,
        Level::Pt => 12,
    }
}

impl PagingStructureCache {
    pub fn new(capacity: usize) -> Self {
        PagingStructureCache {
            levels: [LruSet::new(capacity), LruSet::new(capacity), LruSet::new(capacity)],
        }
    }

    /// Number of cached non-leaf entries above `terminal` that cover `addr`.
    pub fn hits_above(&mut self, addr: u64, terminal: Level) -> u64 {
        let mut hits = 0;
        for (i, level) in NON_LEAF.iter().enumerate() {
            if *level <= terminal {
                break;
            }
            if self.levels[i].get(addr >> shift(*level)).is_some() {
                hits += 1;
            }
        }
        hits
    }

    /// Caches the non-leaf entries used to translate `addr` down to `terminal`.
    pub fn fill(&mut self, addr: u64, terminal: Level) {
        for (i, level) in NON_LEAF.iter().enumerate() {
            if *level <= terminal {
                break;
            }
            self.levels[i].insert(addr >> shift(*level), ());
        }
    }

    pub fn holds_kernel_entries(&self) -> bool {
        NON_LEAF.iter().enumerate().any(|(i, level)| {
            self.levels[i]
                .keys()
                .any(|k| addr::is_kernel(k << shift(*level)))
        })
    }

    pub fn flush(&mut self) {
        for l in &mut self.levels {
            l.clear();
        }
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
