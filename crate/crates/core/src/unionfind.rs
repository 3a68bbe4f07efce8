/// Disjoint sets with union by size and path compression.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parents: Vec<usize>,
    sizes: Vec<usize>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        UnionFind {
            parents: (0..len).collect(),
            sizes: vec![1; len],
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        let mut root = i;
        while self.parents[root] != root {
            root = self.parents[root];
        }
        while i != root {
            let next = self.parents[i];
            self.parents[i] = root;
            i = next;
        }
        root
    }

    /// Merges the sets of `a` and `b`. Returns `(root, absorbed_root)` when two
    /// distinct sets were merged.
    pub fn union(&mut self, a: usize, b: usize) -> Option<(usize, usize)> {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return None;
        }
        let (big, small) = if self.sizes[ra] < self.sizes[rb] {
            (rb, ra)
        } else {
            (ra, rb)
        };
        self.parents[small] = big;
        self.sizes[big] += self.sizes[small];
        Some((big, small))
    }

    /// Size of the set rooted at `root`; only meaningful for roots.
    #[inline]
    pub fn root_size(&self, root: usize) -> usize {
        self.sizes[root]
    }

    pub fn size_of(&mut self, i: usize) -> usize {
        let r = self.find(i);
        self.sizes[r]
    }
}
