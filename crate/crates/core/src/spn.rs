//! Sum-product networks over normalized features.
//!
//! Nodes live in an id-indexed vector; children may be shared (DAG). Leaves
//! are univariate: piecewise-constant histograms over `[0, 1]` stored as
//! log-densities, or categorical distributions stored as log-probabilities.
//! Histogram bins are `[t_i, t_{i+1})` except the last, which is closed at 1.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Value;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Smallest probability (or density) a leaf may report: `ln(1e-9)`.
pub const LOG_FLOOR: f64 = -20.723_265_836_946_41;

const WEIGHT_TOL: f64 = 1e-9;
const HIST_TOL: f64 = 1e-6;
const CAT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpnNode {
    Sum {
        children: Vec<NodeId>,
        weights: Vec<f64>,
    },
    Product {
        children: Vec<NodeId>,
    },
    Histogram {
        feature: usize,
        breakpoints: Vec<f64>,
        log_densities: Vec<f64>,
    },
    Categorical {
        feature: usize,
        log_probs: Vec<f64>,
    },
}

impl SpnNode {
    pub fn children(&self) -> &[NodeId] {
        match self {
            SpnNode::Sum { children, .. } | SpnNode::Product { children } => children,
            _ => &[],
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, SpnNode::Histogram { .. } | SpnNode::Categorical { .. })
    }

    fn leaf_feature(&self) -> Option<usize> {
        match self {
            SpnNode::Histogram { feature, .. } | SpnNode::Categorical { feature, .. } => Some(*feature),
            _ => None,
        }
    }
}

/// What kind of value a feature takes inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Real,
    Levels(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node {
            Some(n) => write!(f, "node {n}: {}", self.rule),
            None => f.write_str(&self.rule),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spn {
    num_features: usize,
    nodes: Vec<SpnNode>,
    root: NodeId,
    /// Children-before-parents order of the nodes reachable from the root.
    order: Vec<NodeId>,
}

#[derive(Serialize, Deserialize)]
struct SpnFile {
    format_version: u32,
    num_features: usize,
    root: u64,
    nodes: Vec<NodeEntry>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    id: u64,
    #[serde(flatten)]
    node: SpnNode,
}

impl Spn {
    /// Builds and validates a network.
    pub fn new(num_features: usize, nodes: Vec<SpnNode>, root: NodeId) -> Result<Self> {
        let spn = Self::new_unchecked(num_features, nodes, root);
        let v = spn.validate();
        if v.is_empty() {
            Ok(spn)
        } else {
            Err(Error::InvalidSpn(v.iter().map(|v| v.to_string()).collect()))
        }
    }

    /// Builds a network without validation; evaluation on an invalid network
    /// may give meaningless numbers.
    pub fn new_unchecked(num_features: usize, nodes: Vec<SpnNode>, root: NodeId) -> Self {
        let order = topo_order(&nodes, root).unwrap_or_default();
        Spn {
            num_features,
            nodes,
            root,
            order,
        }
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn nodes(&self) -> &[SpnNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &SpnNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Reachable nodes, children before parents.
    pub fn topological_order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn sum_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.order
            .iter()
            .copied()
            .filter(|&n| matches!(self.nodes[n], SpnNode::Sum { .. }))
    }

    /// Sum over reachable sum nodes of `ln |children|`: the worst-case gap of
    /// the max approximation.
    pub fn max_approx_gap_bound(&self) -> f64 {
        self.sum_nodes()
            .map(|n| (self.nodes[n].children().len() as f64).ln())
            .sum()
    }

    pub fn domain(&self, feature: usize) -> Option<Domain> {
        self.nodes.iter().find_map(|n| match n {
            SpnNode::Histogram { feature: f, .. } if *f == feature => Some(Domain::Real),
            SpnNode::Categorical { feature: f, log_probs } if *f == feature => Some(Domain::Levels(log_probs.len())),
            _ => None,
        })
    }

    /// Structural and parametric violations; empty iff the network is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.nodes.len();
        let mut push = |node: Option<NodeId>, rule: String| out.push(Violation { node, rule });
        if self.root >= n {
            push(None, format!("root {} does not exist", self.root));
            return out;
        }
        let mut refs_ok = true;
        for (id, node) in self.nodes.iter().enumerate() {
            for &c in node.children() {
                if c >= n {
                    push(Some(id), format!("child {c} does not exist"));
                    refs_ok = false;
                }
            }
        }
        if !refs_ok {
            return out;
        }
        if topo_order(&self.nodes, self.root).is_none() {
            push(None, "graph contains a cycle".into());
            return out;
        }

        let mut domains: HashMap<usize, Domain> = HashMap::new();
        for &id in &self.order {
            match &self.nodes[id] {
                SpnNode::Sum { children, weights } => {
                    if children.is_empty() {
                        push(Some(id), "sum node without children".into());
                    }
                    if weights.len() != children.len() {
                        push(Some(id), format!("{} weights for {} children", weights.len(), children.len()));
                    } else {
                        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                            push(Some(id), "sum weights must be positive".into());
                        }
                        let s: f64 = weights.iter().sum();
                        if (s - 1.0).abs() > WEIGHT_TOL {
                            push(Some(id), format!("sum weights add to {s}, not 1"));
                        }
                    }
                }
                SpnNode::Product { children } => {
                    if children.is_empty() {
                        push(Some(id), "product node without children".into());
                    }
                }
                SpnNode::Histogram {
                    feature,
                    breakpoints,
                    log_densities,
                } => {
                    if let Some(rule) = check_histogram(breakpoints, log_densities) {
                        push(Some(id), rule);
                    }
                    if let Some(rule) = check_domain(&mut domains, *feature, Domain::Real) {
                        push(Some(id), rule);
                    }
                }
                SpnNode::Categorical { feature, log_probs } => {
                    if log_probs.is_empty() || log_probs.iter().any(|p| p.is_nan() || *p == f64::INFINITY) {
                        push(Some(id), "categorical leaf needs finite log-probabilities".into());
                    } else {
                        let s: f64 = log_probs.iter().map(|p| p.exp()).sum();
                        if (s - 1.0).abs() > CAT_TOL {
                            push(Some(id), format!("categorical probabilities add to {s}, not 1"));
                        }
                    }
                    if let Some(rule) = check_domain(&mut domains, *feature, Domain::Levels(log_probs.len())) {
                        push(Some(id), rule);
                    }
                }
            }
            if let Some(f) = self.nodes[id].leaf_feature() {
                if f >= self.num_features {
                    push(Some(id), format!("feature {f} out of range"));
                }
            }
        }

        let scopes = self.scopes();
        for &id in &self.order {
            match &self.nodes[id] {
                SpnNode::Product { children } => {
                    let mut seen = BTreeSet::new();
                    for &c in children {
                        for f in &scopes[c] {
                            if !seen.insert(*f) {
                                push(
                                    Some(id),
                                    format!("decomposability: feature {f} appears in several children"),
                                );
                            }
                        }
                    }
                }
                SpnNode::Sum { children, .. } => {
                    if children.iter().any(|&c| scopes[c] != scopes[id]) {
                        push(Some(id), "smoothness: children scopes differ".into());
                    }
                }
                _ => {}
            }
        }
        let all: BTreeSet<usize> = (0..self.num_features).collect();
        if scopes[self.root] != all {
            push(Some(self.root), "root scope does not cover every feature".into());
        }
        out
    }

    /// Scope of every node (empty for unreachable ones).
    pub fn scopes(&self) -> Vec<BTreeSet<usize>> {
        let mut scopes = vec![BTreeSet::new(); self.nodes.len()];
        for &id in &self.order {
            let s = match &self.nodes[id] {
                SpnNode::Histogram { feature, .. } | SpnNode::Categorical { feature, .. } => BTreeSet::from([*feature]),
                node => node
                    .children()
                    .iter()
                    .flat_map(|&c| scopes[c].iter().copied())
                    .collect(),
            };
            scopes[id] = s;
        }
        scopes
    }

    pub fn log_likelihood(&self, point: &[Value]) -> Result<f64> {
        self.check_dim(point.len())?;
        self.evaluate(|f| Some(point[f]), false)
    }

    /// Max-approximate log-likelihood: each sum node takes its best weighted child.
    pub fn log_likelihood_max_approx(&self, point: &[Value]) -> Result<f64> {
        self.check_dim(point.len())?;
        self.evaluate(|f| Some(point[f]), true)
    }

    /// Log-likelihood with `None` features marginalized out.
    pub fn marginal_log_likelihood(&self, point: &[Option<Value>]) -> Result<f64> {
        self.check_dim(point.len())?;
        self.evaluate(|f| point[f], false)
    }

    /// Value of every node under the max approximation (indexed by node id).
    pub fn node_values_max_approx(&self, point: &[Value]) -> Result<Vec<f64>> {
        self.check_dim(point.len())?;
        self.node_values(&|f| Some(point[f]), true)
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.num_features {
            return Err(Error::Dimension {
                expected: self.num_features,
                got,
            });
        }
        Ok(())
    }

    fn evaluate(&self, value_of: impl Fn(usize) -> Option<Value>, max_approx: bool) -> Result<f64> {
        Ok(self.node_values(&value_of, max_approx)?[self.root])
    }

    fn node_values(&self, value_of: &dyn Fn(usize) -> Option<Value>, max_approx: bool) -> Result<Vec<f64>> {
        let mut vals = vec![f64::NAN; self.nodes.len()];
        for &id in &self.order {
            vals[id] = match &self.nodes[id] {
                SpnNode::Product { children } => children.iter().map(|&c| vals[c]).sum(),
                SpnNode::Sum { children, weights } => {
                    let terms = children.iter().zip(weights).map(|(&c, w)| vals[c] + w.ln());
                    if !max_approx && children.iter().all(|&c| vals[c] == 0.0) {
                        // weights sum to 1, but their logs do not cancel exactly
                        0.0
                    } else if max_approx {
                        terms.fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        log_sum_exp(terms)
                    }
                }
                SpnNode::Histogram {
                    feature,
                    breakpoints,
                    log_densities,
                } => match value_of(*feature) {
                    None => 0.0,
                    Some(Value::Real(x)) => match bin_index(breakpoints, x) {
                        Some(i) => log_densities[i].max(LOG_FLOOR),
                        None => LOG_FLOOR,
                    },
                    Some(v) => {
                        return Err(Error::BadValue {
                            feature: feature.to_string(),
                            reason: format!("histogram leaf needs a real value, got {v:?}"),
                        })
                    }
                },
                SpnNode::Categorical { feature, log_probs } => match value_of(*feature) {
                    None => 0.0,
                    Some(Value::Level(k)) if k < log_probs.len() => log_probs[k].max(LOG_FLOOR),
                    Some(v) => {
                        return Err(Error::BadValue {
                            feature: feature.to_string(),
                            reason: format!("categorical leaf with {} levels got {v:?}", log_probs.len()),
                        })
                    }
                },
            };
        }
        Ok(vals)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SpnFile {
            format_version: 1,
            num_features: self.num_features,
            root: self.root as u64,
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeEntry {
                    id: i as u64,
                    node: n.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses and validates a network file. Node ids may be arbitrary but unique.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SpnFile = serde_json::from_str(text)?;
        if file.format_version != 1 {
            return Err(Error::InvalidSpn(vec![format!(
                "unsupported format version {}",
                file.format_version
            )]));
        }
        let mut index = HashMap::new();
        for (i, e) in file.nodes.iter().enumerate() {
            if index.insert(e.id, i).is_some() {
                return Err(Error::InvalidSpn(vec![format!("duplicate node id {}", e.id)]));
            }
        }
        let remap = |id: &u64| -> Result<NodeId> {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidSpn(vec![format!("unknown node id {id}")]))
        };
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for e in &file.nodes {
            let mut node = e.node.clone();
            match &mut node {
                SpnNode::Sum { children, .. } | SpnNode::Product { children } => {
                    for c in children.iter_mut() {
                        *c = remap(&(*c as u64))?;
                    }
                }
                _ => {}
            }
            nodes.push(node);
        }
        Spn::new(file.num_features, nodes, remap(&file.root)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Bin containing `x`: `[t_i, t_{i+1})`, last bin closed at its right end.
/// `None` outside `[t_0, t_B]`.
pub fn bin_index(breakpoints: &[f64], x: f64) -> Option<usize> {
    let b = breakpoints.len().checked_sub(1)?;
    if b == 0 || x.is_nan() || x < breakpoints[0] || x > breakpoints[b] {
        return None;
    }
    // number of breakpoints <= x, minus one
    let k = breakpoints.partition_point(|&t| t <= x);
    Some((k - 1).min(b - 1))
}

fn check_histogram(t: &[f64], q: &[f64]) -> Option<String> {
    if t.len() < 2 || q.len() != t.len() - 1 {
        return Some(format!("histogram with {} breakpoints and {} bins", t.len(), q.len()));
    }
    if t[0] != 0.0 || t[t.len() - 1] != 1.0 {
        return Some("histogram breakpoints must cover [0, 1]".into());
    }
    if t.windows(2).any(|w| !(w[0] < w[1])) {
        return Some("histogram breakpoints must be strictly increasing".into());
    }
    if q.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Some("histogram log-densities must be finite".into());
    }
    let mass: f64 = q.iter().zip(t.windows(2)).map(|(q, w)| q.exp() * (w[1] - w[0])).sum();
    if (mass - 1.0).abs() > HIST_TOL {
        return Some(format!("histogram integrates to {mass}, not 1"));
    }
    None
}

fn check_domain(domains: &mut HashMap<usize, Domain>, feature: usize, d: Domain) -> Option<String> {
    match domains.insert(feature, d) {
        Some(prev) if prev != d => Some(format!("feature {feature}: leaves disagree on its domain")),
        _ => None,
    }
}

/// Children-before-parents order of nodes reachable from `root`; `None` on a cycle.
fn topo_order(nodes: &[SpnNode], root: NodeId) -> Option<Vec<NodeId>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    if root >= nodes.len() {
        return None;
    }
    let mut mark = vec![Mark::New; nodes.len()];
    let mut order = Vec::new();
    // explicit stack of (node, next child index)
    let mut stack = vec![(root, 0usize)];
    mark[root] = Mark::Open;
    while let Some(&mut (id, ref mut next)) = stack.last_mut() {
        let children = nodes[id].children();
        if *next < children.len() {
            let c = children[*next];
            *next += 1;
            if c >= nodes.len() {
                return None;
            }
            match mark[c] {
                Mark::Open => return None,
                Mark::Done => {}
                Mark::New => {
                    mark[c] = Mark::Open;
                    stack.push((c, 0));
                }
            }
        } else {
            mark[id] = Mark::Done;
            order.push(id);
            stack.pop();
        }
    }
    Some(order)
}

pub fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = terms.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
