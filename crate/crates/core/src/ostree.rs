//! AVL tree over `u32` keys with subtree sizes, for rank queries and select-kth.

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    key: u32,
    left: u32,
    right: u32,
    height: u8,
    size: u32,
}

/// Ordered set of vertex ids. Every operation walks one root-to-leaf path and
/// reports the number of nodes it touched, which callers charge as steps.
#[derive(Debug, Clone, Default)]
pub struct OrderStatSet {
    nodes: Vec<Node>,
    free: Vec<u32>,
    root: u32,
    touched: u64,
}

impl OrderStatSet {
    pub fn new() -> Self {
        OrderStatSet {
            nodes: Vec::new(),
            free: Vec::new(),
            root: NIL,
            touched: 0,
        }
    }

    /// Builds a perfectly balanced tree from keys given in strictly ascending order.
    pub fn from_sorted(keys: &[u32]) -> Self {
        debug_assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let mut s = OrderStatSet::new();
        s.nodes.reserve(keys.len());
        s.root = s.build(keys);
        s.touched = keys.len() as u64;
        s
    }

    fn build(&mut self, keys: &[u32]) -> u32 {
        if keys.is_empty() {
            return NIL;
        }
        let mid = keys.len() / 2;
        let left = self.build(&keys[..mid]);
        let right = self.build(&keys[mid + 1..]);
        let id = self.alloc(keys[mid]);
        self.nodes[id as usize].left = left;
        self.nodes[id as usize].right = right;
        self.fix(id);
        id
    }

    pub fn len(&self) -> usize {
        self.size(self.root) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.root == NIL
    }

    /// Nodes touched since the last call; resets the counter.
    pub fn take_touched(&mut self) -> u64 {
        std::mem::take(&mut self.touched)
    }

    pub fn depth(&self) -> usize {
        self.height(self.root) as usize
    }

    fn alloc(&mut self, key: u32) -> u32 {
        let node = Node {
            key,
            left: NIL,
            right: NIL,
            height: 1,
            size: 1,
        };
        if let Some(id) = self.free.pop() {
            self.nodes[id as usize] = node;
            id
        } else {
            self.nodes.push(node);
            (self.nodes.len() - 1) as u32
        }
    }

    fn size(&self, id: u32) -> u32 {
        if id == NIL {
            0
        } else {
            self.nodes[id as usize].size
        }
    }

    fn height(&self, id: u32) -> u8 {
        if id == NIL {
            0
        } else {
            self.nodes[id as usize].height
        }
    }

    fn fix(&mut self, id: u32) {
        let (l, r) = {
            let n = &self.nodes[id as usize];
            (n.left, n.right)
        };
        let h = 1 + self.height(l).max(self.height(r));
        let s = 1 + self.size(l) + self.size(r);
        let n = &mut self.nodes[id as usize];
        n.height = h;
        n.size = s;
    }

    fn rotate_right(&mut self, id: u32) -> u32 {
        let l = self.nodes[id as usize].left;
        self.nodes[id as usize].left = self.nodes[l as usize].right;
        self.nodes[l as usize].right = id;
        self.fix(id);
        self.fix(l);
        l
    }

    fn rotate_left(&mut self, id: u32) -> u32 {
        let r = self.nodes[id as usize].right;
        self.nodes[id as usize].right = self.nodes[r as usize].left;
        self.nodes[r as usize].left = id;
        self.fix(id);
        self.fix(r);
        r
    }

    fn balance(&mut self, id: u32) -> u32 {
        self.fix(id);
        let (l, r) = {
            let n = &self.nodes[id as usize];
            (n.left, n.right)
        };
        let bf = self.height(l) as i32 - self.height(r) as i32;
        if bf > 1 {
            let ll = self.nodes[l as usize].left;
            let lr = self.nodes[l as usize].right;
            if self.height(ll) < self.height(lr) {
                let nl = self.rotate_left(l);
                self.nodes[id as usize].left = nl;
            }
            return self.rotate_right(id);
        }
        if bf < -1 {
            let rl = self.nodes[r as usize].left;
            let rr = self.nodes[r as usize].right;
            if self.height(rr) < self.height(rl) {
                let nr = self.rotate_right(r);
                self.nodes[id as usize].right = nr;
            }
            return self.rotate_left(id);
        }
        id
    }

    /// Returns false if the key was already present.
    pub fn insert(&mut self, key: u32) -> bool {
        let mut inserted = false;
        let root = self.root;
        self.root = self.insert_at(root, key, &mut inserted);
        inserted
    }

    fn insert_at(&mut self, id: u32, key: u32, inserted: &mut bool) -> u32 {
        self.touched += 1;
        if id == NIL {
            *inserted = true;
            return self.alloc(key);
        }
        let k = self.nodes[id as usize].key;
        if key < k {
            let l = self.nodes[id as usize].left;
            let nl = self.insert_at(l, key, inserted);
            self.nodes[id as usize].left = nl;
        } else if key > k {
            let r = self.nodes[id as usize].right;
            let nr = self.insert_at(r, key, inserted);
            self.nodes[id as usize].right = nr;
        } else {
            return id;
        }
        self.balance(id)
    }

    /// Returns false if the key was absent.
    pub fn remove(&mut self, key: u32) -> bool {
        let mut removed = false;
        let root = self.root;
        self.root = self.remove_at(root, key, &mut removed);
        removed
    }

    fn remove_at(&mut self, id: u32, key: u32, removed: &mut bool) -> u32 {
        self.touched += 1;
        if id == NIL {
            return NIL;
        }
        let k = self.nodes[id as usize].key;
        if key < k {
            let l = self.nodes[id as usize].left;
            let nl = self.remove_at(l, key, removed);
            self.nodes[id as usize].left = nl;
        } else if key > k {
            let r = self.nodes[id as usize].right;
            let nr = self.remove_at(r, key, removed);
            self.nodes[id as usize].right = nr;
        } else {
            *removed = true;
            let (l, r) = {
                let n = &self.nodes[id as usize];
                (n.left, n.right)
            };
            if l == NIL || r == NIL {
                self.free.push(id);
                return if l == NIL { r } else { l };
            }
            let (nr, min) = self.take_min(r);
            self.nodes[min as usize].left = l;
            self.nodes[min as usize].right = nr;
            self.free.push(id);
            return self.balance(min);
        }
        self.balance(id)
    }

    /// Detaches the minimum node of the subtree; returns (new subtree root, detached node).
    fn take_min(&mut self, id: u32) -> (u32, u32) {
        self.touched += 1;
        let l = self.nodes[id as usize].left;
        if l == NIL {
            let r = self.nodes[id as usize].right;
            return (r, id);
        }
        let (nl, min) = self.take_min(l);
        self.nodes[id as usize].left = nl;
        (self.balance(id), min)
    }

    pub fn contains(&mut self, key: u32) -> bool {
        let mut id = self.root;
        while id != NIL {
            self.touched += 1;
            let n = &self.nodes[id as usize];
            if key == n.key {
                return true;
            }
            id = if key < n.key { n.left } else { n.right };
        }
        false
    }

    /// The k-th smallest key, 1-based.
    pub fn select(&mut self, k: usize) -> Option<u32> {
        if k == 0 || k > self.len() {
            return None;
        }
        let mut k = k as u32;
        let mut id = self.root;
        loop {
            self.touched += 1;
            let n = &self.nodes[id as usize];
            let ls = self.size(n.left);
            if k <= ls {
                id = n.left;
            } else if k == ls + 1 {
                return Some(n.key);
            } else {
                k -= ls + 1;
                id = n.right;
            }
        }
    }

    /// Number of keys strictly smaller than `key`.
    pub fn rank(&mut self, key: u32) -> usize {
        let mut id = self.root;
        let mut r = 0u32;
        while id != NIL {
            self.touched += 1;
            let n = &self.nodes[id as usize];
            if key <= n.key {
                id = n.left;
            } else {
                r += self.size(n.left) + 1;
                id = n.right;
            }
        }
        r as usize
    }

    /// In-order keys.
    pub fn to_vec(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = Vec::new();
        let mut id = self.root;
        while id != NIL || !stack.is_empty() {
            while id != NIL {
                stack.push(id);
                id = self.nodes[id as usize].left;
            }
            let top = stack.pop().unwrap();
            out.push(self.nodes[top as usize].key);
            id = self.nodes[top as usize].right;
        }
        out
    }

    #[cfg(test)]
    fn check(&self, id: u32) -> (u8, u32) {
        if id == NIL {
            return (0, 0);
        }
        let n = &self.nodes[id as usize];
        let (hl, sl) = self.check(n.left);
        let (hr, sr) = self.check(n.right);
        assert!((hl as i32 - hr as i32).abs() <= 1, "unbalanced at {}", n.key);
        assert_eq!(n.height, 1 + hl.max(hr));
        assert_eq!(n.size, 1 + sl + sr);
        (n.height, n.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn singleton_select() {
        let mut s = OrderStatSet::new();
        s.insert(7);
        assert_eq!(s.select(1), Some(7));
        assert_eq!(s.select(2), None);
        assert_eq!(s.select(0), None);
    }

    #[test]
    fn depth_is_logarithmic() {
        let mut s = OrderStatSet::new();
        for k in 0..4096u32 {
            s.insert(k);
        }
        // AVL height bound 1.44·log2(n+2)
        assert!(s.depth() <= 18, "depth {}", s.depth());
        s.take_touched();
        s.select(2000);
        assert!(s.take_touched() <= 18);
        let b = OrderStatSet::from_sorted(&(0..4096).collect::<Vec<_>>());
        assert_eq!(b.depth(), 13);
    }

    proptest! {
        #[test]
        fn matches_sorted_reference(ops in prop::collection::vec((any::<bool>(), 0u32..200), 0..400)) {
            let mut s = OrderStatSet::new();
            let mut r = BTreeSet::new();
            for (ins, k) in ops {
                if ins {
                    prop_assert_eq!(s.insert(k), r.insert(k));
                } else {
                    prop_assert_eq!(s.remove(k), r.remove(&k));
                }
                s.check(s.root);
            }
            let sorted: Vec<u32> = r.iter().copied().collect();
            prop_assert_eq!(s.to_vec(), sorted.clone());
            for (i, &k) in sorted.iter().enumerate() {
                prop_assert_eq!(s.select(i + 1), Some(k));
                prop_assert_eq!(s.rank(k), i);
                prop_assert!(s.contains(k));
            }
        }
    }
}
