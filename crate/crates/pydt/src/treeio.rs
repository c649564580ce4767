//! Tree serialization: a JSON wire format with preorder node ids, and Newick
//! export preserving multifurcations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{NodeId, NodeKind, Tree};

#[derive(Debug, Serialize, Deserialize)]
struct WireNode {
    id: usize,
    kind: NodeKind,
    time: f64,
    children: Vec<usize>,
    leaf_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireTree {
    dim: usize,
    nodes: Vec<WireNode>,
}

/// Serialize a tree to canonical JSON: nodes in preorder, ids renumbered
/// 0..V-1, compact formatting. Canonical output makes byte-level round trips
/// and manifest hashing reproducible.
pub fn to_json(tree: &Tree) -> Result<String> {
    let order = tree.preorder();
    let mut renumber = vec![usize::MAX; tree.node_ids().iter().map(|i| i.index()).max().map_or(0, |m| m + 1)];
    for (new, id) in order.iter().enumerate() {
        renumber[id.index()] = new;
    }
    let nodes = order
        .iter()
        .map(|&id| {
            let n = tree.node(id);
            WireNode {
                id: renumber[id.index()],
                kind: n.kind,
                time: n.time,
                children: n.children.iter().map(|c| renumber[c.index()]).collect(),
                leaf_index: n.leaf_index,
                location: n.location.clone(),
            }
        })
        .collect();
    Ok(serde_json::to_string(&WireTree {
        dim: tree.dim(),
        nodes,
    })?)
}

/// Parse a tree from the JSON wire format and check its invariants.
pub fn from_json(text: &str) -> Result<Tree> {
    let wire: WireTree = serde_json::from_str(text)?;
    if wire.nodes.is_empty() {
        return Err(Error::InvalidTree("no nodes".into()));
    }
    let n = wire.nodes.len();
    let mut by_id = vec![None; n];
    for node in &wire.nodes {
        if node.id >= n || by_id[node.id].is_some() {
            return Err(Error::InvalidTree(format!("bad node id {}", node.id)));
        }
        by_id[node.id] = Some(node);
    }
    let root_wire = by_id[wire.nodes[0].id].unwrap();
    if root_wire.kind != NodeKind::Root {
        return Err(Error::InvalidTree("first node must be the root".into()));
    }

    let mut tree = Tree::new(wire.dim);
    // map wire id -> NodeId; build by walking from the root
    let mut map = vec![NodeId(u32::MAX); n];
    map[root_wire.id] = tree.root();
    tree.node_mut(tree.root()).location = root_wire.location.clone();
    let mut stack = vec![root_wire.id];
    let mut seen = 1usize;
    while let Some(wid) = stack.pop() {
        let wnode = by_id[wid].unwrap();
        for &cw in &wnode.children {
            let cnode = *by_id
                .get(cw)
                .and_then(|o| o.as_ref())
                .ok_or_else(|| Error::InvalidTree(format!("bad child id {cw}")))?;
            if map[cw] != NodeId(u32::MAX) {
                return Err(Error::InvalidTree(format!("node {cw} has two parents")));
            }
            let parent = map[wid];
            let id = match cnode.kind {
                NodeKind::Root => {
                    return Err(Error::InvalidTree("root listed as a child".into()))
                }
                NodeKind::Leaf => {
                    let ix = cnode
                        .leaf_index
                        .ok_or_else(|| Error::InvalidTree(format!("leaf {cw} has no index")))?;
                    tree.new_leaf(ix)
                }
                NodeKind::Internal => {
                    let id = tree.new_leaf(usize::MAX);
                    let node = tree.node_mut(id);
                    node.kind = NodeKind::Internal;
                    node.leaf_index = None;
                    node.leaf_count = 0;
                    id
                }
            };
            {
                let node = tree.node_mut(id);
                node.time = cnode.time;
                node.location = cnode.location.clone();
                node.parent = Some(parent);
            }
            tree.node_mut(parent).children.push(id);
            map[cw] = id;
            seen += 1;
            stack.push(cw);
        }
    }
    if seen != n {
        return Err(Error::InvalidTree(format!(
            "{} of {} nodes reachable from the root",
            seen, n
        )));
    }
    tree.recompute_leaf_counts();
    let problems = tree.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidTree(problems.join("; ")));
    }
    Ok(tree)
}

/// Newick string with branch lengths equal to time differences. Leaves are
/// labeled `L<index>`; multifurcations are preserved.
pub fn to_newick(tree: &Tree) -> String {
    fn walk(tree: &Tree, id: NodeId, out: &mut String) {
        let node = tree.node(id);
        if node.is_leaf() {
            out.push('L');
            out.push_str(&node.leaf_index.unwrap_or(0).to_string());
        } else {
            out.push('(');
            for (i, &c) in node.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                walk(tree, c, out);
            }
            out.push(')');
        }
        if let Some(p) = node.parent {
            let len = node.time - tree.node(p).time;
            out.push(':');
            out.push_str(&format!("{len}"));
        }
    }
    let mut out = String::new();
    let root = tree.root();
    out.push('(');
    for (i, &c) in tree.node(root).children.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        walk(tree, c, &mut out);
    }
    out.push_str(");");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Attachment;

    fn sample_tree() -> Tree {
        let mut t = Tree::new(2);
        let l0 = t.new_leaf(0);
        t.attach_subtree(l0, &Attachment::FirstChild).unwrap();
        let l1 = t.new_leaf(1);
        t.attach_subtree(l1, &Attachment::OnEdge { child: l0, time: 0.25 })
            .unwrap();
        let l2 = t.new_leaf(2);
        t.attach_subtree(l2, &Attachment::OnEdge { child: l1, time: 0.5 })
            .unwrap();
        let a = t.node(l0).parent.unwrap();
        let l3 = t.new_leaf(3);
        t.attach_subtree(l3, &Attachment::AtNode { node: a }).unwrap();
        t
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let t = sample_tree();
        let json = to_json(&t).unwrap();
        let parsed = from_json(&json).unwrap();
        assert!(parsed.validate().is_empty());
        let json2 = to_json(&parsed).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn parse_rejects_cycles_and_orphans() {
        let t = sample_tree();
        let json = to_json(&t).unwrap();
        // orphan: drop a child reference
        let broken = json.replacen("\"children\":[4,5]", "\"children\":[4]", 1);
        assert_ne!(broken, json);
        assert!(from_json(&broken).is_err());
    }

    #[test]
    fn newick_has_all_leaves_and_lengths() {
        let t = sample_tree();
        let nwk = to_newick(&t);
        for l in ["L0", "L1", "L2", "L3"] {
            assert!(nwk.contains(l), "{nwk}");
        }
        assert!(nwk.ends_with(");"));
        assert!(nwk.matches(':').count() >= 5, "{nwk}");
    }

    #[test]
    fn locations_survive_round_trip() {
        let mut t = sample_tree();
        for id in t.preorder() {
            t.node_mut(id).location = Some(vec![0.5, -1.0]);
        }
        let json = to_json(&t).unwrap();
        let parsed = from_json(&json).unwrap();
        assert_eq!(parsed.node(parsed.root()).location, Some(vec![0.5, -1.0]));
    }
}
