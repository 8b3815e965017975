//! Per-session multi-relational graphs and the global item co-occurrence graph.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use restc_tensor::CsrMatrix;

use crate::dataio::Session;
use crate::error::{RestcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    In,
    Out,
    Bi,
    SelfLoop,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::In, Relation::Out, Relation::Bi, Relation::SelfLoop];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rel: Relation,
}

/// Session graph over unique items. `src` aggregates from `dst`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Msg {
    /// Item index of each node, in first-occurrence order.
    pub nodes: Vec<usize>,
    /// Sorted, duplicate-free.
    pub edges: Vec<Edge>,
    /// Node of each session position.
    pub position_node: Vec<usize>,
}

impl Msg {
    pub fn build(prefix: &[usize]) -> Result<Self> {
        if prefix.is_empty() {
            return Err(RestcError::Contract("cannot build a graph from an empty session".into()));
        }
        let mut nodes = Vec::new();
        let mut node_of: HashMap<usize, usize> = HashMap::new();
        let position_node: Vec<usize> = prefix
            .iter()
            .map(|&item| {
                *node_of.entry(item).or_insert_with(|| {
                    nodes.push(item);
                    nodes.len() - 1
                })
            })
            .collect();

        let transitions: HashSet<(usize, usize)> =
            position_node.windows(2).map(|w| (w[0], w[1])).collect();
        let mut edges = HashSet::new();
        for &(a, b) in &transitions {
            if a == b {
                edges.insert(Edge { src: a, dst: a, rel: Relation::SelfLoop });
            } else if transitions.contains(&(b, a)) {
                edges.insert(Edge { src: a, dst: b, rel: Relation::Bi });
                edges.insert(Edge { src: b, dst: a, rel: Relation::Bi });
            } else {
                edges.insert(Edge { src: a, dst: b, rel: Relation::Out });
                edges.insert(Edge { src: b, dst: a, rel: Relation::In });
            }
        }
        let mut touched = vec![false; nodes.len()];
        for e in &edges {
            touched[e.src] = true;
            touched[e.dst] = true;
        }
        for (n, _) in touched.iter().enumerate().filter(|(_, &t)| !t) {
            edges.insert(Edge { src: n, dst: n, rel: Relation::SelfLoop });
        }
        let mut edges: Vec<Edge> = edges.into_iter().collect();
        edges.sort();
        Ok(Msg { nodes, edges, position_node })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Same graph with node `i` moved to slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut nodes = vec![0; self.nodes.len()];
        for (i, &item) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = item;
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| Edge { src: perm[e.src], dst: perm[e.dst], rel: e.rel })
            .collect();
        edges.sort();
        Msg {
            nodes,
            edges,
            position_node: self.position_node.iter().map(|&n| perm[n]).collect(),
        }
    }

    /// Edges labelled by item index instead of node slot.
    pub fn item_edges(&self) -> Vec<(usize, usize, Relation)> {
        let mut out: Vec<_> = self
            .edges
            .iter()
            .map(|e| (self.nodes[e.src], self.nodes[e.dst], e.rel))
            .collect();
        out.sort();
        out
    }
}

/// Symmetric co-occurrence counts over items `1..=n`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Cfg {
    pub n: usize,
    weights: BTreeMap<(usize, usize), u64>,
}

impl Cfg {
    pub fn build(sessions: &[Session], n: usize) -> Result<Self> {
        let mut cfg = Cfg { n, weights: BTreeMap::new() };
        for s in sessions {
            for w in s.items.windows(2) {
                let (a, b) = (w[0], w[1]);
                if a == 0 || b == 0 || a > n || b > n {
                    return Err(RestcError::Contract(format!(
                        "item pair ({a}, {b}) outside vocabulary of {n}"
                    )));
                }
                if a != b {
                    *cfg.weights.entry((a, b)).or_default() += 1;
                    *cfg.weights.entry((b, a)).or_default() += 1;
                }
            }
        }
        Ok(cfg)
    }

    pub fn weight(&self, a: usize, b: usize) -> u64 {
        self.weights.get(&(a, b)).copied().unwrap_or(0)
    }

    /// Row sum of `A + I`.
    pub fn degree(&self, i: usize) -> f64 {
        1.0 + self.weights.range((i, 0)..(i + 1, 0)).map(|(_, &w)| w as f64).sum::<f64>()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.weights.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    /// `D̃⁻¹(A + I)` over `[0..=n]`; row 0 (padding) is the identity row.
    pub fn propagation_matrix(&self) -> Result<CsrMatrix> {
        let mut triplets = Vec::with_capacity(self.weights.len() + self.n + 1);
        triplets.push((0, 0, 1.0));
        for i in 1..=self.n {
            triplets.push((i, i, 1.0 / self.degree(i)));
        }
        for (&(a, b), &w) in &self.weights {
            triplets.push((a, b, w as f64 / self.degree(a)));
        }
        Ok(CsrMatrix::from_triplets(self.n + 1, self.n + 1, &triplets)?)
    }

    /// `N<TAB>n` header, then upper-triangle `i<TAB>j<TAB>w` lines.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!("N\t{}\n", self.n);
        for (a, b, w) in self.entries().filter(|(a, b, _)| a < b) {
            out.push_str(&format!("{a}\t{b}\t{w}\n"));
        }
        fs::write(path, out).map_err(|e| RestcError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RestcError::io(path, e))?;
        let bad = |line: usize| RestcError::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: malformed graph record"),
        };
        let mut lines = text.lines();
        let n = lines
            .next()
            .and_then(|l| l.strip_prefix("N\t"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(1))?;
        let mut cfg = Cfg { n, weights: BTreeMap::new() };
        for (k, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let parsed = (f.len() == 3)
                .then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<usize>().ok()?, f[2].parse::<u64>().ok()?)))
                .flatten();
            match parsed {
                Some((a, b, w)) if a != b && (1..=n).contains(&a) && (1..=n).contains(&b) => {
                    cfg.weights.insert((a, b), w);
                    cfg.weights.insert((b, a), w);
                }
                _ => return Err(bad(k + 2)),
            }
        }
        Ok(cfg)
    }
}
