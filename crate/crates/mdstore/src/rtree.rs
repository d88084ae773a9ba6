//! R*-tree over f64 boxes.
//!
//! Insertion follows Beckmann et al.: ChooseSubtree minimizes overlap
//! enlargement at nodes pointing to leaves and area enlargement above,
//! the first overflow on each level per insertion is handled by forced
//! reinsertion of the entries farthest from the node center, and splits pick
//! the minimum-margin axis, then the minimum-overlap distribution.
//!
//! Coordinates here come from a monotone map of exact dimension values, so
//! the tree is a conservative filter: callers re-check candidates exactly.

const DEFAULT_MAX: usize = 64;
/// m_min as a fraction of m_max.
const MIN_FILL: f64 = 0.4;
/// Fraction of entries removed on forced reinsert.
const REINSERT_FRACTION: f64 = 0.3;

/// Closed axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        debug_assert_eq!(lo.len(), hi.len());
        debug_assert!(lo.iter().zip(&hi).all(|(l, h)| l <= h));
        Rect { lo, hi }
    }

    fn dims(&self) -> usize {
        self.lo.len()
    }

    fn area(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| h - l)
            .product()
    }

    fn margin(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).sum()
    }

    fn union(&self, other: &Rect) -> Rect {
        Rect {
            lo: self
                .lo
                .iter()
                .zip(&other.lo)
                .map(|(a, b)| a.min(*b))
                .collect(),
            hi: self
                .hi
                .iter()
                .zip(&other.hi)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    fn grow(&mut self, other: &Rect) {
        for i in 0..self.lo.len() {
            self.lo[i] = self.lo[i].min(other.lo[i]);
            self.hi[i] = self.hi[i].max(other.hi[i]);
        }
    }

    fn enlargement(&self, other: &Rect) -> f64 {
        self.union(other).area() - self.area()
    }

    fn overlap(&self, other: &Rect) -> f64 {
        let mut v = 1.0;
        for i in 0..self.lo.len() {
            let lo = self.lo[i].max(other.lo[i]);
            let hi = self.hi[i].min(other.hi[i]);
            if hi < lo {
                return 0.0;
            }
            v *= hi - lo;
        }
        v
    }

    pub fn intersects(&self, qlo: &[f64], qhi: &[f64]) -> bool {
        (0..self.lo.len()).all(|i| self.lo[i] <= qhi[i] && qlo[i] <= self.hi[i])
    }

    fn center_dist2(&self, other: &Rect) -> f64 {
        (0..self.lo.len())
            .map(|i| {
                let a = (self.lo[i] + self.hi[i]) * 0.5;
                let b = (other.lo[i] + other.hi[i]) * 0.5;
                (a - b) * (a - b)
            })
            .sum()
    }
}

enum Node<T> {
    Leaf(Vec<(Rect, T)>),
    Inner(Vec<(Rect, Node<T>)>),
}

impl<T> Node<T> {
    fn len(&self) -> usize {
        match self {
            Node::Leaf(v) => v.len(),
            Node::Inner(v) => v.len(),
        }
    }

    fn mbr(&self) -> Rect {
        match self {
            Node::Leaf(v) => {
                let mut r = v[0].0.clone();
                for (rect, _) in &v[1..] {
                    r.grow(rect);
                }
                r
            }
            Node::Inner(v) => {
                let mut r = v[0].0.clone();
                for (rect, _) in &v[1..] {
                    r.grow(rect);
                }
                r
            }
        }
    }
}

/// An entry displaced by reinsertion or a split, waiting to go back in at a
/// fixed level.
enum Pending<T> {
    Item(Rect, T),
    Sub(Rect, Node<T>, usize), // level the subtree root must re-attach at
}

pub struct RStarTree<T> {
    root: Node<T>,
    /// Level of the root node; leaves are level 0.
    root_level: usize,
    size: usize,
    max_entries: usize,
    min_entries: usize,
    reinsert_count: usize,
}

impl<T> RStarTree<T> {
    pub fn new() -> Self {
        Self::with_max_entries(DEFAULT_MAX)
    }

    pub fn with_max_entries(max_entries: usize) -> Self {
        assert!(max_entries >= 4);
        RStarTree {
            root: Node::Leaf(Vec::new()),
            root_level: 0,
            size: 0,
            max_entries,
            min_entries: ((max_entries as f64 * MIN_FILL) as usize).max(2),
            reinsert_count: ((max_entries as f64 * REINSERT_FRACTION) as usize).max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn insert(&mut self, rect: Rect, item: T) {
        // One forced reinsert per level per insertion; after that, split.
        let mut reinserted = vec![false; self.root_level + 1];
        let mut pending = std::collections::VecDeque::new();
        pending.push_back(Pending::Item(rect, item));
        while let Some(p) = pending.pop_front() {
            let (rect, entry, level) = match p {
                Pending::Item(r, t) => (r, Entry::Item(t), 0),
                Pending::Sub(r, n, lvl) => (r, Entry::Sub(n), lvl),
            };
            if reinserted.len() < self.root_level + 1 {
                reinserted.resize(self.root_level + 1, false);
            }
            let root_level = self.root_level;
            let split = Self::insert_at(
                &mut self.root,
                root_level,
                rect,
                entry,
                level,
                self.max_entries,
                self.min_entries,
                self.reinsert_count,
                &mut reinserted,
                &mut pending,
            );
            if let Some((r1, n1, r2, n2)) = split {
                self.root = Node::Inner(vec![(r1, n1), (r2, n2)]);
                self.root_level += 1;
            }
        }
        self.size += 1;
    }

    #[allow(clippy::too_many_arguments)]
    fn insert_at(
        node: &mut Node<T>,
        node_level: usize,
        rect: Rect,
        entry: Entry<T>,
        target_level: usize,
        max_entries: usize,
        min_entries: usize,
        reinsert_count: usize,
        reinserted: &mut [bool],
        pending: &mut std::collections::VecDeque<Pending<T>>,
    ) -> Option<(Rect, Node<T>, Rect, Node<T>)> {
        if node_level == target_level {
            match (&mut *node, entry) {
                (Node::Leaf(v), Entry::Item(t)) => v.push((rect, t)),
                (Node::Inner(v), Entry::Sub(n)) => v.push((rect, n)),
                _ => unreachable!("entry kind does not match node level"),
            }
        } else {
            let Node::Inner(children) = &mut *node else {
                unreachable!("descending past a leaf")
            };
            // Children of a level-1 node are leaves.
            let idx = choose_subtree(children, &rect, node_level == 1);
            let child_split = Self::insert_at(
                &mut children[idx].1,
                node_level - 1,
                rect,
                entry,
                target_level,
                max_entries,
                min_entries,
                reinsert_count,
                reinserted,
                pending,
            );
            match child_split {
                Some((r1, n1, r2, n2)) => {
                    children[idx] = (r1, n1);
                    children.push((r2, n2));
                }
                None => children[idx].0 = children[idx].1.mbr(),
            }
        }

        // Re-borrow to appease the match above.
        let over = match &*node {
            Node::Leaf(v) => v.len() > max_entries,
            Node::Inner(v) => v.len() > max_entries,
        };
        if !over {
            return None;
        }

        let is_root = node_level == reinserted.len() - 1;
        if !is_root && !reinserted[node_level] {
            reinserted[node_level] = true;
            Self::forced_reinsert(node, node_level, reinsert_count, pending);
            None
        } else {
            Some(Self::split(node, min_entries))
        }
    }

    /// Remove the `count` entries farthest from the node's MBR center and
    /// queue them for reinsertion, closest first.
    fn forced_reinsert(
        node: &mut Node<T>,
        node_level: usize,
        count: usize,
        pending: &mut std::collections::VecDeque<Pending<T>>,
    ) {
        let mbr = node.mbr();
        match node {
            Node::Leaf(v) => {
                v.sort_by(|a, b| {
                    a.0.center_dist2(&mbr)
                        .partial_cmp(&b.0.center_dist2(&mbr))
                        .unwrap()
                });
                // Close reinsert: nearest of the removed set goes back first.
                let far: Vec<_> = v.split_off(v.len() - count);
                for (r, t) in far {
                    pending.push_back(Pending::Item(r, t));
                }
            }
            Node::Inner(v) => {
                v.sort_by(|a, b| {
                    a.0.center_dist2(&mbr)
                        .partial_cmp(&b.0.center_dist2(&mbr))
                        .unwrap()
                });
                let far: Vec<_> = v.split_off(v.len() - count);
                for (r, n) in far {
                    pending.push_back(Pending::Sub(r, n, node_level));
                }
            }
        }
    }

    /// R* topological split: choose the axis with minimum total margin over
    /// all distributions, then the distribution with minimum overlap
    /// (ties: minimum combined area).
    fn split(node: &mut Node<T>, min_entries: usize) -> (Rect, Node<T>, Rect, Node<T>) {
        match node {
            Node::Leaf(v) => {
                let entries = std::mem::take(v);
                let (a, b) = split_entries(entries, min_entries);
                let (ra, rb) = (mbr_of(&a), mbr_of(&b));
                (ra, Node::Leaf(a), rb, Node::Leaf(b))
            }
            Node::Inner(v) => {
                let entries = std::mem::take(v);
                let (a, b) = split_entries(entries, min_entries);
                let (ra, rb) = (mbr_of(&a), mbr_of(&b));
                (ra, Node::Inner(a), rb, Node::Inner(b))
            }
        }
    }

    /// Visit every item whose rectangle intersects the closed query box.
    pub fn search(&self, qlo: &[f64], qhi: &[f64], mut visit: impl FnMut(&T)) {
        if self.size == 0 {
            return;
        }
        let mut stack: Vec<&Node<T>> = vec![&self.root];
        while let Some(n) = stack.pop() {
            match n {
                Node::Leaf(v) => {
                    for (r, t) in v {
                        if r.intersects(qlo, qhi) {
                            visit(t);
                        }
                    }
                }
                Node::Inner(v) => {
                    for (r, child) in v {
                        if r.intersects(qlo, qhi) {
                            stack.push(child);
                        }
                    }
                }
            }
        }
    }

    pub fn for_each(&self, mut visit: impl FnMut(&T)) {
        let mut stack: Vec<&Node<T>> = vec![&self.root];
        while let Some(n) = stack.pop() {
            match n {
                Node::Leaf(v) => v.iter().for_each(|(_, t)| visit(t)),
                Node::Inner(v) => stack.extend(v.iter().map(|(_, c)| c)),
            }
        }
    }

    /// Keep only items satisfying the predicate. Rebuilds the tree; intended
    /// for test teardown, not the hot path.
    pub fn retain(&mut self, mut pred: impl FnMut(&T) -> bool) {
        let old = std::mem::replace(&mut self.root, Node::Leaf(Vec::new()));
        self.root_level = 0;
        self.size = 0;
        let mut stack = vec![old];
        let mut kept = Vec::new();
        while let Some(n) = stack.pop() {
            match n {
                Node::Leaf(v) => {
                    for (r, t) in v {
                        if pred(&t) {
                            kept.push((r, t));
                        }
                    }
                }
                Node::Inner(v) => stack.extend(v.into_iter().map(|(_, c)| c)),
            }
        }
        for (r, t) in kept {
            self.insert(r, t);
        }
    }

    /// Verify shape invariants; test support. Returns the entry count.
    pub fn check_invariants(&self) -> Result<usize, String> {
        let (count, _) = self.check_node(&self.root, self.root_level, true)?;
        if count != self.size {
            return Err(format!("size {} but counted {count}", self.size));
        }
        Ok(count)
    }

    fn check_node(
        &self,
        node: &Node<T>,
        level: usize,
        is_root: bool,
    ) -> Result<(usize, Rect), String> {
        let len = node.len();
        if !is_root && (len < self.min_entries || len > self.max_entries) {
            return Err(format!("node at level {level} has {len} entries"));
        }
        if is_root && len > self.max_entries {
            return Err(format!("root has {len} entries"));
        }
        match node {
            Node::Leaf(v) => {
                if level != 0 {
                    return Err(format!("leaf at level {level}"));
                }
                Ok((v.len(), node.mbr()))
            }
            Node::Inner(v) => {
                if level == 0 {
                    return Err("inner node at level 0".into());
                }
                if v.is_empty() {
                    return Err("empty inner node".into());
                }
                let mut total = 0;
                for (r, child) in v {
                    let (n, child_mbr) = self.check_node(child, level - 1, false)?;
                    if *r != child_mbr {
                        return Err(format!("stale MBR at level {level}"));
                    }
                    total += n;
                }
                Ok((total, node.mbr()))
            }
        }
    }
}

impl<T> Default for RStarTree<T> {
    fn default() -> Self {
        Self::new()
    }
}

enum Entry<T> {
    Item(T),
    Sub(Node<T>),
}

/// R* ChooseSubtree among `children` for `rect`. When the children are
/// leaves, minimize overlap enlargement (ties: area enlargement, then area);
/// otherwise minimize area enlargement (ties: area).
fn choose_subtree<T>(children: &[(Rect, Node<T>)], rect: &Rect, points_to_leaves: bool) -> usize {
    if points_to_leaves {
        let mut best = 0usize;
        let mut best_key = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        for (i, (ri, _)) in children.iter().enumerate() {
            let grown = ri.union(rect);
            let mut delta = 0.0;
            for (j, (rj, _)) in children.iter().enumerate() {
                if i != j {
                    delta += grown.overlap(rj) - ri.overlap(rj);
                }
            }
            let key = (delta, ri.enlargement(rect), ri.area());
            if key < best_key {
                best_key = key;
                best = i;
            }
        }
        best
    } else {
        let mut best = 0usize;
        let mut best_key = (f64::INFINITY, f64::INFINITY);
        for (i, (ri, _)) in children.iter().enumerate() {
            let key = (ri.enlargement(rect), ri.area());
            if key < best_key {
                best_key = key;
                best = i;
            }
        }
        best
    }
}

fn mbr_of<E>(entries: &[(Rect, E)]) -> Rect {
    let mut r = entries[0].0.clone();
    for (rect, _) in &entries[1..] {
        r.grow(rect);
    }
    r
}

type EntryPair<E> = (Vec<(Rect, E)>, Vec<(Rect, E)>);

fn split_entries<E>(mut entries: Vec<(Rect, E)>, min_entries: usize) -> EntryPair<E> {
    let total = entries.len();
    let dims = entries[0].0.dims();
    let m = min_entries;

    // Choose split axis: minimum sum of margins over all distributions of
    // both sorts (by lower then by upper coordinate).
    let mut best_axis = 0;
    let mut best_margin = f64::INFINITY;
    for axis in 0..dims {
        let mut margin = 0.0;
        for by_upper in [false, true] {
            sort_on(&mut entries, axis, by_upper);
            for k in m..=total - m {
                margin += mbr_of(&entries[..k]).margin() + mbr_of(&entries[k..]).margin();
            }
        }
        if margin < best_margin {
            best_margin = margin;
            best_axis = axis;
        }
    }

    // Choose the distribution on that axis with minimum overlap, then area.
    let mut best: Option<(f64, f64, bool, usize)> = None;
    for by_upper in [false, true] {
        sort_on(&mut entries, best_axis, by_upper);
        for k in m..=total - m {
            let (ra, rb) = (mbr_of(&entries[..k]), mbr_of(&entries[k..]));
            let key = (ra.overlap(&rb), ra.area() + rb.area());
            if best.is_none() || (key.0, key.1) < (best.unwrap().0, best.unwrap().1) {
                best = Some((key.0, key.1, by_upper, k));
            }
        }
    }
    let (_, _, by_upper, k) = best.unwrap();
    sort_on(&mut entries, best_axis, by_upper);
    let rest = entries.split_off(k);
    (entries, rest)
}

fn sort_on<E>(entries: &mut [(Rect, E)], axis: usize, by_upper: bool) {
    if by_upper {
        entries.sort_by(|a, b| a.0.hi[axis].partial_cmp(&b.0.hi[axis]).unwrap());
    } else {
        entries.sort_by(|a, b| a.0.lo[axis].partial_cmp(&b.0.lo[axis]).unwrap());
    }
}
