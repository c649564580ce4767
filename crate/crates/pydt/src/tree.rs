//! Rooted multifurcating tree with divergence times.
//!
//! Nodes live in an arena with a freelist so subtree detach/reattach is cheap
//! and node handles stay stable across edits that do not touch them. The root
//! is an explicit degree-1 node at time 0; leaves sit at time 1 and carry the
//! index of their data row.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::data::DataSet;
use crate::error::{Error, Result};

/// Handle into a tree's node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Root,
    Internal,
    Leaf,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    /// Divergence time in [0, 1]; 0 at the root, 1 at leaves.
    pub time: f64,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    /// Number of leaves in the subtree rooted here (1 for a leaf).
    pub leaf_count: usize,
    /// Data row index; set for leaves only.
    pub leaf_index: Option<usize>,
    /// Optional D-dimensional location.
    pub location: Option<Vec<f64>>,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.kind == NodeKind::Leaf
    }

    pub fn is_internal(&self) -> bool {
        self.kind == NodeKind::Internal
    }

    pub fn is_root(&self) -> bool {
        self.kind == NodeKind::Root
    }

    /// Branch degree at this node.
    pub fn degree(&self) -> usize {
        self.children.len()
    }
}

/// Record of a detach, sufficient to restore the original attachment.
#[derive(Debug, Clone)]
pub enum DetachRecord {
    /// Parent kept its other children; reinsert at `child_pos`.
    Kept { parent: NodeId, child_pos: usize },
    /// Parent was left with a single child and spliced out.
    Spliced {
        grandparent: NodeId,
        sibling: NodeId,
        parent_time: f64,
        child_pos: usize,
    },
    /// The detached node was the root's only child.
    RootChild,
}

/// Where to attach a subtree (or a new leaf).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attachment {
    /// Create a new internal node at `time` on the edge above `child` and
    /// attach there.
    OnEdge { child: NodeId, time: f64 },
    /// Attach as an extra child of an existing branch point.
    AtNode { node: NodeId },
    /// Attach as the root's first (and only) child; valid on an empty tree.
    FirstChild,
}

/// Rooted multifurcating tree over `n_leaves` data rows.
#[derive(Debug, Clone)]
pub struct Tree {
    slots: Vec<Option<Node>>,
    free: Vec<u32>,
    root: NodeId,
    dim: usize,
}

impl Tree {
    /// A tree containing only the root; leaves are added afterwards.
    pub fn new(dim: usize) -> Self {
        let root = Node {
            kind: NodeKind::Root,
            time: 0.0,
            parent: None,
            children: Vec::new(),
            leaf_count: 0,
            leaf_index: None,
            location: None,
        };
        Self {
            slots: vec![Some(root)],
            free: Vec::new(),
            root: NodeId(0),
            dim,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_leaves(&self) -> usize {
        self.node(self.root).leaf_count
    }

    pub fn node(&self, id: NodeId) -> &Node {
        self.slots[id.index()]
            .as_ref()
            .expect("dangling node handle")
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.slots[id.index()]
            .as_mut()
            .expect("dangling node handle")
    }

    fn alloc(&mut self, node: Node) -> NodeId {
        match self.free.pop() {
            Some(i) => {
                self.slots[i as usize] = Some(node);
                NodeId(i)
            }
            None => {
                self.slots.push(Some(node));
                NodeId((self.slots.len() - 1) as u32)
            }
        }
    }

    fn release(&mut self, id: NodeId) {
        self.slots[id.index()] = None;
        self.free.push(id.0);
    }

    /// Ids of all live nodes, in arena order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].is_some())
            .map(|i| NodeId(i as u32))
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Number of edges, counting the root edge.
    pub fn n_edges(&self) -> usize {
        self.n_nodes().saturating_sub(1)
    }

    /// Nodes in preorder (parents before children) starting at the root.
    pub fn preorder(&self) -> Vec<NodeId> {
        self.preorder_from(self.root)
    }

    /// Preorder traversal of the subtree rooted at `start`.
    pub fn preorder_from(&self, start: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(id) = stack.pop() {
            out.push(id);
            let node = self.node(id);
            for &c in node.children.iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.preorder()
            .into_iter()
            .filter(|&id| self.node(id).is_leaf())
            .collect()
    }

    /// Internal (non-root, non-leaf) nodes in preorder.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.preorder()
            .into_iter()
            .filter(|&id| self.node(id).is_internal())
            .collect()
    }

    /// Leaf node carrying data row `index`.
    pub fn leaf_by_index(&self, index: usize) -> Result<NodeId> {
        self.leaves()
            .into_iter()
            .find(|&id| self.node(id).leaf_index == Some(index))
            .ok_or(Error::UnknownLeaf(index))
    }

    /// Leaf counts of the children of `id`, in child order.
    pub fn child_counts(&self, id: NodeId) -> Vec<usize> {
        self.node(id)
            .children
            .iter()
            .map(|&c| self.node(c).leaf_count)
            .collect()
    }

    /// Path of node ids from the root down to `id`, inclusive.
    pub fn path_from_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.node(cur).parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    fn bump_leaf_counts(&mut self, from: NodeId, delta: isize) {
        let mut cur = Some(from);
        while let Some(id) = cur {
            let n = self.node_mut(id);
            n.leaf_count = (n.leaf_count as isize + delta) as usize;
            cur = n.parent;
        }
    }

    /// Create a new leaf node (detached) for data row `index`.
    pub fn new_leaf(&mut self, index: usize) -> NodeId {
        self.alloc(Node {
            kind: NodeKind::Leaf,
            time: 1.0,
            parent: None,
            children: Vec::new(),
            leaf_count: 1,
            leaf_index: Some(index),
            location: None,
        })
    }

    /// Insert a new internal node at `time` on the edge above `child`,
    /// returning its id. Leaf counts are preserved.
    fn insert_on_edge(&mut self, child: NodeId, time: f64) -> NodeId {
        let parent = self.node(child).parent.expect("edge above the root");
        let pos = self
            .node(parent)
            .children
            .iter()
            .position(|&c| c == child)
            .expect("child listed under parent");
        let mid = self.alloc(Node {
            kind: NodeKind::Internal,
            time,
            parent: Some(parent),
            children: vec![child],
            leaf_count: self.node(child).leaf_count,
            leaf_index: None,
            location: None,
        });
        self.node_mut(parent).children[pos] = mid;
        self.node_mut(child).parent = Some(mid);
        mid
    }

    /// Attach the subtree rooted at `sub` according to `at`. Returns the id of
    /// the node `sub` hangs from.
    pub fn attach_subtree(&mut self, sub: NodeId, at: &Attachment) -> Result<NodeId> {
        let host = match *at {
            Attachment::FirstChild => {
                if !self.node(self.root).children.is_empty() {
                    return Err(Error::InvalidTree(
                        "root already has a child".into(),
                    ));
                }
                self.root
            }
            Attachment::AtNode { node } => {
                if !self.node(node).is_internal() {
                    return Err(Error::InvalidTree(
                        "can only widen an internal branch point".into(),
                    ));
                }
                node
            }
            Attachment::OnEdge { child, time } => {
                let parent = self
                    .node(child)
                    .parent
                    .ok_or_else(|| Error::InvalidTree("edge above the root".into()))?;
                let (tp, tc) = (self.node(parent).time, self.node(child).time);
                if !(time > tp && time < tc) {
                    return Err(Error::InvalidTree(format!(
                        "attach time {time} outside edge interval ({tp}, {tc})"
                    )));
                }
                self.insert_on_edge(child, time)
            }
        };
        let count = self.node(sub).leaf_count;
        self.node_mut(sub).parent = Some(host);
        self.node_mut(host).children.push(sub);
        self.bump_leaf_counts(host, count as isize);
        Ok(host)
    }

    /// Detach the subtree rooted at `sub`, splicing out its parent if the
    /// parent is left with a single child. `sub` keeps its id and contents.
    pub fn detach_subtree(&mut self, sub: NodeId) -> Result<DetachRecord> {
        let parent = self
            .node(sub)
            .parent
            .ok_or_else(|| Error::InvalidTree("cannot detach the root".into()))?;
        let child_pos = self
            .node(parent)
            .children
            .iter()
            .position(|&c| c == sub)
            .expect("child listed under parent");
        let count = self.node(sub).leaf_count;
        self.node_mut(parent).children.remove(child_pos);
        self.node_mut(sub).parent = None;
        self.bump_leaf_counts(parent, -(count as isize));

        if self.node(parent).is_root() {
            return Ok(DetachRecord::RootChild);
        }
        if self.node(parent).children.len() >= 2 {
            return Ok(DetachRecord::Kept { parent, child_pos });
        }
        // splice out the now degree-1 parent
        let sibling = self.node(parent).children[0];
        let grandparent = self.node(parent).parent.expect("internal node has parent");
        let ppos = self
            .node(grandparent)
            .children
            .iter()
            .position(|&c| c == parent)
            .expect("parent listed under grandparent");
        let parent_time = self.node(parent).time;
        self.node_mut(grandparent).children[ppos] = sibling;
        self.node_mut(sibling).parent = Some(grandparent);
        self.release(parent);
        Ok(DetachRecord::Spliced {
            grandparent,
            sibling,
            parent_time,
            child_pos,
        })
    }

    /// Undo a detach, restoring the original attachment position.
    pub fn restore_subtree(&mut self, sub: NodeId, record: &DetachRecord) -> Result<()> {
        let count = self.node(sub).leaf_count;
        match *record {
            DetachRecord::RootChild => {
                let root = self.root;
                self.node_mut(sub).parent = Some(root);
                self.node_mut(root).children.push(sub);
                self.bump_leaf_counts(root, count as isize);
            }
            DetachRecord::Kept { parent, child_pos } => {
                self.node_mut(sub).parent = Some(parent);
                self.node_mut(parent).children.insert(child_pos, sub);
                self.bump_leaf_counts(parent, count as isize);
            }
            DetachRecord::Spliced {
                sibling,
                parent_time,
                child_pos,
                ..
            } => {
                let mid = self.insert_on_edge(sibling, parent_time);
                self.node_mut(sub).parent = Some(mid);
                self.node_mut(mid).children.insert(child_pos.min(1), sub);
                self.bump_leaf_counts(mid, count as isize);
            }
        }
        Ok(())
    }

    /// Divergence time of the most recent common ancestor of two leaves.
    pub fn mrca_time(&self, leaf_i: usize, leaf_j: usize) -> Result<f64> {
        if leaf_i == leaf_j {
            return Err(Error::InvalidArgument(format!(
                "mrca of a leaf with itself ({leaf_i})"
            )));
        }
        let a = self.leaf_by_index(leaf_i)?;
        let b = self.leaf_by_index(leaf_j)?;
        let path_a = self.path_from_root(a);
        let path_b = self.path_from_root(b);
        let mut mrca = self.root;
        for (x, y) in path_a.iter().zip(path_b.iter()) {
            if x != y {
                break;
            }
            mrca = *x;
        }
        Ok(self.node(mrca).time)
    }

    /// Gather leaf locations into a data matrix ordered by leaf index.
    pub fn leaf_data(&self) -> Result<DataSet> {
        let n = self.n_leaves();
        let mut rows = vec![Vec::new(); n];
        for id in self.leaves() {
            let node = self.node(id);
            let idx = node.leaf_index.ok_or(Error::MissingLocation(id))?;
            if idx >= n {
                return Err(Error::UnknownLeaf(idx));
            }
            rows[idx] = node
                .location
                .clone()
                .ok_or(Error::MissingLocation(id))?;
        }
        DataSet::from_rows(&rows)
    }

    /// Structural invariant check; returns human-readable violations.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let root = self.node(self.root);
        if !root.is_root() {
            errs.push("root slot does not hold a root node".into());
        }
        if root.time != 0.0 {
            errs.push(format!("root time {} != 0", root.time));
        }
        let reachable = self.preorder();
        if reachable.len() != self.n_nodes() {
            errs.push(format!(
                "{} nodes reachable from the root but {} live in the arena",
                reachable.len(),
                self.n_nodes()
            ));
        }
        if root.children.len() > 1 {
            errs.push(format!(
                "root must have at most one child, found {}",
                root.children.len()
            ));
        }
        let mut leaf_seen = HashMap::new();
        for &id in &reachable {
            let node = self.node(id);
            for &c in &node.children {
                if self.node(c).parent != Some(id) {
                    errs.push(format!("parent pointer mismatch at {:?}", c));
                }
                if self.node(c).time <= node.time {
                    errs.push(format!(
                        "time order violated on edge {:?} -> {:?}: {} !< {}",
                        id,
                        c,
                        node.time,
                        self.node(c).time
                    ));
                }
            }
            match node.kind {
                NodeKind::Root => {}
                NodeKind::Internal => {
                    if node.children.len() < 2 {
                        errs.push(format!(
                            "branch degree < 2 at node {:?} (degree {})",
                            id,
                            node.children.len()
                        ));
                    }
                    if !(node.time > 0.0 && node.time < 1.0) {
                        errs.push(format!(
                            "internal time {} outside (0, 1) at {:?}",
                            node.time, id
                        ));
                    }
                }
                NodeKind::Leaf => {
                    if node.time != 1.0 {
                        errs.push(format!("leaf time {} != 1 at {:?}", node.time, id));
                    }
                    if !node.children.is_empty() {
                        errs.push(format!("leaf {:?} has children", id));
                    }
                    match node.leaf_index {
                        Some(ix) => {
                            if let Some(prev) = leaf_seen.insert(ix, id) {
                                errs.push(format!(
                                    "duplicate leaf index {ix} at {:?} and {:?}",
                                    prev, id
                                ));
                            }
                        }
                        None => errs.push(format!("leaf {:?} has no data index", id)),
                    }
                }
            }
            let claimed = node.leaf_count;
            let actual: usize = if node.is_leaf() {
                1
            } else {
                node.children.iter().map(|&c| self.node(c).leaf_count).sum()
            };
            if claimed != actual {
                errs.push(format!(
                    "leaf count {claimed} at {:?} but children sum to {actual}",
                    id
                ));
            }
        }
        let n = leaf_seen.len();
        for ix in 0..n {
            if !leaf_seen.contains_key(&ix) {
                errs.push(format!("leaf index {ix} missing (found {n} leaves)"));
            }
        }
        errs
    }

    /// Recompute leaf counts from scratch (used by tests and deserialization).
    pub fn recompute_leaf_counts(&mut self) {
        let order = self.preorder();
        for &id in order.iter().rev() {
            let count = if self.node(id).is_leaf() {
                1
            } else {
                self.node(id)
                    .children
                    .iter()
                    .map(|&c| self.node(c).leaf_count)
                    .sum()
            };
            self.node_mut(id).leaf_count = count;
        }
    }

    /// Hash of the branching structure alone (children unordered, times and
    /// locations ignored). Equal hashes identify structurally equal trees up
    /// to child order.
    pub fn structural_hash(&self) -> u64 {
        fn walk(tree: &Tree, id: NodeId) -> (usize, u64) {
            let node = tree.node(id);
            if node.is_leaf() {
                let ix = node.leaf_index.unwrap_or(usize::MAX);
                let mut h = std::collections::hash_map::DefaultHasher::new();
                (1u8, ix).hash(&mut h);
                return (ix, h.finish());
            }
            let mut keys: Vec<(usize, u64)> =
                node.children.iter().map(|&c| walk(tree, c)).collect();
            keys.sort_unstable();
            let mut h = std::collections::hash_map::DefaultHasher::new();
            (2u8, &keys).hash(&mut h);
            (keys.first().map_or(usize::MAX, |k| k.0), h.finish())
        }
        walk(self, self.root).1
    }
}
