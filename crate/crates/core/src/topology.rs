//! Binary tree structure of the latent hierarchy.
//!
//! Topologies are immutable values: [`TreeTopology::grow_at`] and
//! [`TreeTopology::prune`] return new trees. Node ids come from a monotone
//! counter and are never reused, so ids stay meaningful across a whole run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::TopologyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Which child of an internal node. `Left` corresponds to the decision `c = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Root-to-leaf sequence of node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionPath(pub Vec<NodeId>);

impl DecisionPath {
    pub fn leaf(&self) -> NodeId {
        *self.0.last().expect("paths are never empty")
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTopology {
    root: NodeId,
    children: BTreeMap<NodeId, (NodeId, NodeId)>,
    parent: BTreeMap<NodeId, NodeId>,
    depth: BTreeMap<NodeId, usize>,
    max_depth: usize,
    next_id: u32,
}

impl TreeTopology {
    /// A root with a left and a right leaf.
    pub fn new_root_tree(max_depth: usize) -> Self {
        assert!(max_depth >= 1, "a tree needs depth at least 1");
        let mut t = Self::single_node(max_depth);
        t.attach_children(NodeId(0));
        t
    }

    fn single_node(max_depth: usize) -> Self {
        Self {
            root: NodeId(0),
            children: BTreeMap::new(),
            parent: BTreeMap::new(),
            depth: BTreeMap::from([(NodeId(0), 0)]),
            max_depth,
            next_id: 1,
        }
    }

    fn attach_children(&mut self, node: NodeId) -> (NodeId, NodeId) {
        let left = NodeId(self.next_id);
        let right = NodeId(self.next_id + 1);
        self.next_id += 2;
        let d = self.depth[&node] + 1;
        self.children.insert(node, (left, right));
        for c in [left, right] {
            self.parent.insert(c, node);
            self.depth.insert(c, d);
        }
        (left, right)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Deepest node depth currently present.
    pub fn height(&self) -> usize {
        self.depth.values().copied().max().unwrap_or(0)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.depth.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.depth.contains_key(&node)
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes().filter(|n| self.is_leaf(*n)).collect()
    }

    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.children.keys().copied().collect()
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.contains(node) && !self.children.contains_key(&node)
    }

    pub fn children(&self, node: NodeId) -> Option<(NodeId, NodeId)> {
        self.children.get(&node).copied()
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent.get(&node).copied()
    }

    pub fn depth(&self, node: NodeId) -> usize {
        self.depth[&node]
    }

    pub fn side(&self, node: NodeId) -> Option<Side> {
        let p = self.parent(node)?;
        let (l, _) = self.children[&p];
        Some(if l == node { Side::Left } else { Side::Right })
    }

    pub fn sibling(&self, node: NodeId) -> Option<NodeId> {
        let p = self.parent(node)?;
        let (l, r) = self.children[&p];
        Some(if l == node { r } else { l })
    }

    /// Nodes in breadth-first order from the root; parents always precede children.
    pub fn breadth_first(&self) -> Vec<NodeId> {
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            if let Some((l, r)) = self.children(order[i]) {
                order.push(l);
                order.push(r);
            }
            i += 1;
        }
        order
    }

    /// Path from the root to `node`, inclusive.
    pub fn path_to(&self, node: NodeId) -> DecisionPath {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        DecisionPath(path)
    }

    /// All nodes below `node`, including `node`.
    pub fn subtree(&self, node: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            out.insert(n);
            if let Some((l, r)) = self.children(n) {
                stack.push(l);
                stack.push(r);
            }
        }
        out
    }

    /// One root-first path per leaf, ordered by ascending leaf id.
    pub fn paths(&self) -> Vec<DecisionPath> {
        self.leaves().into_iter().map(|l| self.path_to(l)).collect()
    }

    pub fn grow_at(&self, leaf: NodeId) -> Result<TreeTopology, TopologyError> {
        if !self.contains(leaf) {
            return Err(TopologyError::UnknownNode(leaf));
        }
        if !self.is_leaf(leaf) {
            return Err(TopologyError::NotALeaf(leaf));
        }
        if self.depth(leaf) + 1 > self.max_depth {
            return Err(TopologyError::DepthExceeded {
                node: leaf,
                max_depth: self.max_depth,
            });
        }
        let mut t = self.clone();
        t.attach_children(leaf);
        Ok(t)
    }

    /// Remove `node` with its subtree. The parent collapses and the sibling
    /// subtree takes the parent's place, one level shallower.
    pub fn prune(&self, node: NodeId) -> Result<TreeTopology, TopologyError> {
        if !self.contains(node) {
            return Err(TopologyError::UnknownNode(node));
        }
        if node == self.root {
            return Err(TopologyError::CannotPruneRoot);
        }
        let parent = self.parent[&node];
        let sibling = self.sibling(node).expect("non-root nodes have siblings");
        let mut t = self.clone();
        for n in self.subtree(node) {
            t.depth.remove(&n);
            t.parent.remove(&n);
            t.children.remove(&n);
        }
        t.children.remove(&parent);
        t.depth.remove(&parent);
        match self.parent(parent) {
            Some(grand) => {
                let (l, r) = t.children[&grand];
                let replaced = if l == parent { (sibling, r) } else { (l, sibling) };
                t.children.insert(grand, replaced);
                t.parent.insert(sibling, grand);
            }
            None => {
                t.root = sibling;
                t.parent.remove(&sibling);
            }
        }
        t.parent.remove(&parent);
        for n in self.subtree(sibling) {
            *t.depth.get_mut(&n).expect("promoted node") -= 1;
        }
        Ok(t)
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let broken = |msg: String| Err(TopologyError::Invalid(msg));
        if !self.contains(self.root) || self.depth[&self.root] != 0 {
            return broken(format!("root {} missing or not at depth 0", self.root));
        }
        if self.parent.contains_key(&self.root) {
            return broken("root has a parent".into());
        }
        for n in self.nodes() {
            if n.0 >= self.next_id {
                return broken(format!("node {n} not below the id counter"));
            }
            if n != self.root {
                let Some(p) = self.parent(n) else {
                    return broken(format!("node {n} has no parent"));
                };
                let Some((l, r)) = self.children(p) else {
                    return broken(format!("parent {p} of {n} lists no children"));
                };
                if l != n && r != n {
                    return broken(format!("parent {p} does not list {n}"));
                }
                if self.depth(n) != self.depth(p) + 1 {
                    return broken(format!("depth of {n} is not parent depth + 1"));
                }
            }
            if self.depth(n) > self.max_depth {
                return broken(format!("node {n} deeper than {}", self.max_depth));
            }
        }
        for (p, (l, r)) in &self.children {
            if l == r || !self.contains(*l) || !self.contains(*r) || !self.contains(*p) {
                return broken(format!("node {p} has invalid children"));
            }
            if self.parent(*l) != Some(*p) || self.parent(*r) != Some(*p) {
                return broken(format!("children of {p} point elsewhere"));
            }
        }
        if self.breadth_first().len() != self.len() {
            return broken("nodes unreachable from the root".into());
        }
        if self.paths().len() != self.leaves().len() {
            return broken("path count differs from leaf count".into());
        }
        Ok(())
    }

    /// Structural equality ignoring node ids, with left/right order respected.
    pub fn isomorphic(&self, other: &TreeTopology) -> bool {
        fn shape(t: &TreeTopology, n: NodeId) -> String {
            match t.children(n) {
                None => "L".into(),
                Some((l, r)) => format!("({},{})", shape(t, l), shape(t, r)),
            }
        }
        shape(self, self.root) == shape(other, other.root)
    }

    pub fn to_json(&self) -> TopologyJson {
        TopologyJson {
            nodes: self
                .nodes()
                .map(|id| NodeJson {
                    id,
                    depth: self.depth(id),
                    parent: self.parent(id),
                    children: self.children(id).map(|(l, r)| vec![l, r]).unwrap_or_default(),
                })
                .collect(),
            root: self.root,
            leaves: self.leaves(),
            max_depth: self.max_depth,
            next_id: self.next_id,
        }
    }

    pub fn from_json(json: &TopologyJson) -> Result<TreeTopology, TopologyError> {
        let mut t = TreeTopology {
            root: json.root,
            children: BTreeMap::new(),
            parent: BTreeMap::new(),
            depth: BTreeMap::new(),
            max_depth: json.max_depth,
            next_id: json.next_id,
        };
        for n in &json.nodes {
            t.depth.insert(n.id, n.depth);
            if let Some(p) = n.parent {
                t.parent.insert(n.id, p);
            }
            match n.children.as_slice() {
                [] => {}
                [l, r] => {
                    t.children.insert(n.id, (*l, *r));
                }
                _ => {
                    return Err(TopologyError::Invalid(format!(
                        "node {} must have zero or two children",
                        n.id
                    )))
                }
            }
        }
        t.validate()?;
        let leaves = t.leaves();
        if leaves != json.leaves {
            return Err(TopologyError::Invalid("leaf list disagrees with nodes".into()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: NodeId,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// Serialized topology, shared by checkpoints and the tree exporter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyJson {
    pub nodes: Vec<NodeJson>,
    pub root: NodeId,
    pub leaves: Vec<NodeId>,
    pub max_depth: usize,
    pub next_id: u32,
}
