//! The affinity graph: patch nodes, typed edges, cluster annotations, and
//! JSON-lines persistence.
//!
//! Inter edges link different instances grouped into one child cluster;
//! intra edges link temporally consecutive samples of one visual track.
//! Edges are undirected, stored with `a < b`, and deduplicated, so
//! overlapping child clusters share edges.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One mined object patch: feature vector plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchNode {
    pub node_id: u32,
    pub feature: Vec<f32>,
    pub video_id: String,
    pub track_id: String,
    pub frame_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Inter,
    Intra,
}

/// What produced an edge: a child cluster (inter) or a track (intra).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeOrigin {
    ChildCluster(u32),
    Track,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub kind: EdgeKind,
    pub a: u32,
    pub b: u32,
    pub origin: EdgeOrigin,
}

impl Edge {
    fn key(&self) -> (u32, u32, EdgeKind) {
        (self.a, self.b, self.kind)
    }
}

/// A size-g group of mutually nearest neighbors inside one parent cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildCluster {
    pub cluster_id: u32,
    pub parent_id: u32,
    pub members: Vec<u32>,
}

/// Immutable affinity graph. Construction is single-writer; the finished
/// graph is safe to share across read-only workers.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    nodes: Vec<PatchNode>,
    edges: Vec<Edge>,
    parent_of: Vec<Option<u32>>,
    child_clusters: Vec<ChildCluster>,
    dim: usize,
    intra_adj: Vec<Vec<u32>>,
}

impl AffinityGraph {
    /// Assemble the graph from its parts.
    ///
    /// Child clusters contribute a complete clique of inter edges each;
    /// tracks contribute one intra edge per consecutive node pair. Repeated
    /// edges are deduplicated (first origin wins, in child-cluster order).
    pub fn build(
        nodes: Vec<PatchNode>,
        parent_of: Vec<Option<u32>>,
        child_clusters: Vec<ChildCluster>,
        tracks: &[Vec<u32>],
    ) -> Result<Self> {
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id as usize != i {
                return Err(Error::Validation(format!(
                    "node at position {i} has id {}, expected dense 0..{n}",
                    node.node_id
                )));
            }
        }
        let dim = nodes.first().map(|p| p.feature.len()).unwrap_or(0);
        for node in &nodes {
            if node.feature.len() != dim {
                return Err(Error::Validation(format!(
                    "node {} has feature length {}, expected {dim}",
                    node.node_id,
                    node.feature.len()
                )));
            }
        }
        if parent_of.len() != n {
            return Err(Error::Validation(format!(
                "parent assignment table has {} entries for {n} nodes",
                parent_of.len()
            )));
        }

        let check_node = |id: u32| -> Result<()> {
            if (id as usize) < n {
                Ok(())
            } else {
                Err(Error::UnknownNode { id, n })
            }
        };

        let mut edges: BTreeMap<(u32, u32, EdgeKind), Edge> = BTreeMap::new();
        for (pos, child) in child_clusters.iter().enumerate() {
            if child.cluster_id as usize != pos {
                return Err(Error::Validation(format!(
                    "child cluster at position {pos} has id {}, expected dense ids",
                    child.cluster_id
                )));
            }
            let mut seen = BTreeSet::new();
            for &m in &child.members {
                check_node(m)?;
                if !seen.insert(m) {
                    return Err(Error::Validation(format!(
                        "child cluster {} repeats member {m}",
                        child.cluster_id
                    )));
                }
                if parent_of[m as usize] != Some(child.parent_id) {
                    return Err(Error::Validation(format!(
                        "child cluster {} member {m} is not in parent {}",
                        child.cluster_id, child.parent_id
                    )));
                }
            }
            for (i, &a) in child.members.iter().enumerate() {
                for &b in &child.members[i + 1..] {
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    let edge = Edge {
                        kind: EdgeKind::Inter,
                        a: lo,
                        b: hi,
                        origin: EdgeOrigin::ChildCluster(child.cluster_id),
                    };
                    edges.entry(edge.key()).or_insert(edge);
                }
            }
        }

        for track in tracks {
            for &m in track {
                check_node(m)?;
            }
            for pair in track.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if a == b {
                    return Err(Error::Validation(format!(
                        "track repeats node {a} in consecutive positions"
                    )));
                }
                if nodes[a as usize].track_id != nodes[b as usize].track_id {
                    return Err(Error::Validation(format!(
                        "track pair ({a},{b}) spans different track ids"
                    )));
                }
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let edge = Edge {
                    kind: EdgeKind::Intra,
                    a: lo,
                    b: hi,
                    origin: EdgeOrigin::Track,
                };
                edges.entry(edge.key()).or_insert(edge);
            }
        }

        let edges: Vec<Edge> = edges.into_values().collect();
        let intra_adj = build_intra_adj(n, &edges);
        Ok(AffinityGraph {
            nodes,
            edges,
            parent_of,
            child_clusters,
            dim,
            intra_adj,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[PatchNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn inter_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Inter)
    }

    pub fn intra_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Intra)
    }

    pub fn parent_of(&self) -> &[Option<u32>] {
        &self.parent_of
    }

    pub fn child_clusters(&self) -> &[ChildCluster] {
        &self.child_clusters
    }

    /// Membership query, order-independent in (x, y).
    pub fn has_edge(&self, kind: EdgeKind, x: u32, y: u32) -> bool {
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        self.edges
            .binary_search_by(|e| e.key().cmp(&(a, b, kind)))
            .is_ok()
    }

    /// Nodes connected to `node` by intra edges (direct edges only),
    /// ascending. Empty for isolated nodes.
    pub fn intra_partners(&self, node: u32) -> Result<&[u32]> {
        self.intra_adj
            .get(node as usize)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownNode {
                id: node,
                n: self.nodes.len(),
            })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let json_err = |e: serde_json::Error| Error::io(path, e.into());

        let header = Header {
            version: 1,
            n_nodes: self.nodes.len(),
            dim: self.dim,
        };
        serde_json::to_writer(&mut w, &header).map_err(json_err)?;
        w.write_all(b"\n").map_err(io_err)?;

        for node in &self.nodes {
            let rec = NodeRecord {
                node: node.node_id,
                feature: node.feature.clone(),
                video: node.video_id.clone(),
                track: node.track_id.clone(),
                frame: node.frame_index,
            };
            serde_json::to_writer(&mut w, &rec).map_err(json_err)?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        for (node, parent) in self.parent_of.iter().enumerate() {
            if let Some(parent) = parent {
                let rec = ParentRecord {
                    node: node as u32,
                    parent: *parent,
                };
                serde_json::to_writer(&mut w, &rec).map_err(json_err)?;
                w.write_all(b"\n").map_err(io_err)?;
            }
        }
        for child in &self.child_clusters {
            let rec = ChildRecord {
                child: child.cluster_id,
                parent: child.parent_id,
                members: child.members.clone(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(json_err)?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        for edge in &self.edges {
            let rec = EdgeRecord {
                kind: edge.kind,
                a: edge.a,
                b: edge.b,
                child: match edge.origin {
                    EdgeOrigin::ChildCluster(id) => Some(id),
                    EdgeOrigin::Track => None,
                },
            };
            serde_json::to_writer(&mut w, &rec).map_err(json_err)?;
            w.write_all(b"\n").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);

        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };

        let mut lines = reader.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                Some((idx, line)) => {
                    let line = line.map_err(|e| Error::io(path, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line)
                        .map_err(|e| parse_err(idx + 1, format!("bad header: {e}")))?;
                }
                None => {
                    return Err(parse_err(1, "empty file, expected header".into()));
                }
            }
        };
        if header.version != 1 {
            return Err(parse_err(1, format!("unsupported version {}", header.version)));
        }

        let mut nodes = Vec::with_capacity(header.n_nodes);
        let mut parent_of = vec![None; header.n_nodes];
        let mut child_clusters = Vec::new();
        let mut edges = Vec::new();

        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| parse_err(lineno, e.to_string()))?;
            let obj = value
                .as_object()
                .ok_or_else(|| parse_err(lineno, "expected a JSON object".into()))?;
            if obj.contains_key("kind") {
                let rec: EdgeRecord = serde_json::from_value(value.clone())
                    .map_err(|e| parse_err(lineno, format!("bad edge record: {e}")))?;
                let origin = match (rec.kind, rec.child) {
                    (EdgeKind::Inter, Some(id)) => EdgeOrigin::ChildCluster(id),
                    (EdgeKind::Inter, None) => {
                        return Err(parse_err(lineno, "inter edge without child origin".into()))
                    }
                    (EdgeKind::Intra, None) => EdgeOrigin::Track,
                    (EdgeKind::Intra, Some(_)) => {
                        return Err(parse_err(lineno, "intra edge with child origin".into()))
                    }
                };
                if rec.a >= rec.b {
                    return Err(parse_err(
                        lineno,
                        format!("edge ({},{}) must satisfy a < b", rec.a, rec.b),
                    ));
                }
                edges.push(Edge {
                    kind: rec.kind,
                    a: rec.a,
                    b: rec.b,
                    origin,
                });
            } else if obj.contains_key("members") {
                let rec: ChildRecord = serde_json::from_value(value.clone())
                    .map_err(|e| parse_err(lineno, format!("bad child record: {e}")))?;
                child_clusters.push(ChildCluster {
                    cluster_id: rec.child,
                    parent_id: rec.parent,
                    members: rec.members,
                });
            } else if obj.contains_key("feature") {
                let rec: NodeRecord = serde_json::from_value(value.clone())
                    .map_err(|e| parse_err(lineno, format!("bad node record: {e}")))?;
                nodes.push(PatchNode {
                    node_id: rec.node,
                    feature: rec.feature,
                    video_id: rec.video,
                    track_id: rec.track,
                    frame_index: rec.frame,
                });
            } else if obj.contains_key("parent") {
                let rec: ParentRecord = serde_json::from_value(value.clone())
                    .map_err(|e| parse_err(lineno, format!("bad parent record: {e}")))?;
                if rec.node as usize >= header.n_nodes {
                    return Err(parse_err(
                        lineno,
                        format!("parent record for unknown node {}", rec.node),
                    ));
                }
                parent_of[rec.node as usize] = Some(rec.parent);
            } else {
                return Err(parse_err(lineno, "unrecognized record".into()));
            }
        }

        if nodes.len() != header.n_nodes {
            return Err(Error::Validation(format!(
                "header declares {} nodes, file contains {}",
                header.n_nodes,
                nodes.len()
            )));
        }
        if header.n_nodes > 0 && header.dim != nodes[0].feature.len() {
            return Err(Error::Validation(format!(
                "header dim {} disagrees with node feature length {}",
                header.dim,
                nodes[0].feature.len()
            )));
        }

        let mut edge_set = BTreeMap::new();
        for e in edges {
            edge_set.insert(e.key(), e);
        }
        let edges: Vec<Edge> = edge_set.into_values().collect();

        let graph = AffinityGraph {
            dim: header.dim,
            intra_adj: build_intra_adj(nodes.len(), &edges),
            nodes,
            edges,
            parent_of,
            child_clusters,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Structural invariants: dense node ids, valid edge endpoints, intra
    /// edges within one track, child-cluster cliques complete.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.node_id as usize != i {
                return Err(Error::Validation(format!(
                    "node at position {i} has id {}",
                    node.node_id
                )));
            }
        }
        for e in &self.edges {
            if e.a >= e.b {
                return Err(Error::Validation(format!(
                    "edge ({},{}) not stored with a < b",
                    e.a, e.b
                )));
            }
            if e.b as usize >= n {
                return Err(Error::UnknownNode { id: e.b, n });
            }
            if e.kind == EdgeKind::Intra
                && self.nodes[e.a as usize].track_id != self.nodes[e.b as usize].track_id
            {
                return Err(Error::Validation(format!(
                    "intra edge ({},{}) spans different tracks",
                    e.a, e.b
                )));
            }
        }
        for child in &self.child_clusters {
            for &m in &child.members {
                if m as usize >= n {
                    return Err(Error::UnknownNode { id: m, n });
                }
                if self.parent_of[m as usize] != Some(child.parent_id) {
                    return Err(Error::Validation(format!(
                        "child cluster {} member {m} not in parent {}",
                        child.cluster_id, child.parent_id
                    )));
                }
            }
            for (i, &a) in child.members.iter().enumerate() {
                for &b in &child.members[i + 1..] {
                    if !self.has_edge(EdgeKind::Inter, a, b) {
                        return Err(Error::Validation(format!(
                            "child cluster {} is missing inter edge ({a},{b})",
                            child.cluster_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn build_intra_adj(n: usize, edges: &[Edge]) -> Vec<Vec<u32>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges.iter().filter(|e| e.kind == EdgeKind::Intra) {
        adj[e.a as usize].push(e.b);
        adj[e.b as usize].push(e.a);
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Group nodes into tracks by (video id, track id), ordered by frame index
/// (node id as tie-break). Track order follows the sorted group keys.
pub fn tracks_from_meta(meta: &crate::features::NodeMeta) -> Vec<Vec<u32>> {
    let mut groups: BTreeMap<(&str, &str), Vec<(u32, u32)>> = BTreeMap::new();
    for rec in meta.records() {
        groups
            .entry((rec.video.as_str(), rec.track.as_str()))
            .or_default()
            .push((rec.frame, rec.node));
    }
    groups
        .into_values()
        .map(|mut members| {
            members.sort_unstable();
            members.into_iter().map(|(_, node)| node).collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n_nodes: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    node: u32,
    feature: Vec<f32>,
    video: String,
    track: String,
    frame: u32,
}

#[derive(Serialize, Deserialize)]
struct ParentRecord {
    node: u32,
    parent: u32,
}

#[derive(Serialize, Deserialize)]
struct ChildRecord {
    child: u32,
    parent: u32,
    members: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    kind: EdgeKind,
    a: u32,
    b: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    child: Option<u32>,
}
