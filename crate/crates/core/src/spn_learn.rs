//! LearnSPN-style structure learning.
//!
//! The recursion factorizes small slices, splits columns into independent
//! groups with a pairwise G-test, and otherwise clusters rows with 2-means.
//! Output networks are trees whose leaves are equal-width histograms
//! (real features) or smoothed categorical distributions (level features).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{DatasetSchema, FeatureKind, Value};
use crate::error::{Error, Result};
use crate::spn::{Domain, NodeId, Spn, SpnNode, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    /// Slices with fewer rows are fully factorized.
    pub min_instances_slice: usize,
    /// p-value below which two columns count as dependent.
    pub independence_threshold: f64,
    /// Upper limit on histogram bins; a column with fewer distinct values gets fewer.
    pub histogram_bins: usize,
    pub pseudo_count: f64,
    pub rng_seed: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            min_instances_slice: 200,
            independence_threshold: 0.05,
            histogram_bins: 10,
            pseudo_count: 1.0,
            rng_seed: 0,
        }
    }
}

impl LearnConfig {
    /// `ceil(n / 20)`, clamped to at least 2.
    pub fn auto_min_slice(n_rows: usize) -> usize {
        n_rows.div_ceil(20).max(2)
    }

    fn check(&self) -> Result<()> {
        if self.min_instances_slice < 2 {
            return Err(Error::Config("min_instances_slice must be at least 2".into()));
        }
        if self.histogram_bins < 1 {
            return Err(Error::Config("histogram_bins must be at least 1".into()));
        }
        if !(self.independence_threshold > 0.0 && self.independence_threshold < 1.0) {
            return Err(Error::Config("independence_threshold must lie in (0, 1)".into()));
        }
        if !(self.pseudo_count >= 0.0 && self.pseudo_count.is_finite()) {
            return Err(Error::Config("pseudo_count must be finite and non-negative".into()));
        }
        Ok(())
    }
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 50;

/// Network domains for the schema features followed by the class.
pub fn schema_domains(schema: &DatasetSchema) -> Result<Vec<Domain>> {
    let mut out = Vec::with_capacity(schema.len() + 1);
    for f in schema.features() {
        out.push(match &f.kind {
            FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. } => Domain::Real,
            FeatureKind::Binary => Domain::Levels(2),
            FeatureKind::Categorical { levels } | FeatureKind::Ordinal { levels } => Domain::Levels(levels.len()),
            FeatureKind::Mixed { .. } => {
                return Err(Error::Config(format!(
                    "mixed feature `{}` cannot be modelled by the density network",
                    f.name
                )))
            }
        });
    }
    out.push(Domain::Levels(schema.num_classes()));
    Ok(out)
}

/// Appends the class as the last network feature.
pub fn with_class(row: &[Value], class: usize) -> Vec<Value> {
    let mut v = row.to_vec();
    v.push(Value::Level(class));
    v
}

/// Learns a network over the schema features plus the class column.
pub fn learn_with_class(
    schema: &DatasetSchema,
    rows: &[Vec<Value>],
    labels: &[usize],
    config: &LearnConfig,
) -> Result<Spn> {
    if rows.len() != labels.len() {
        return Err(Error::Dimension {
            expected: rows.len(),
            got: labels.len(),
        });
    }
    let domains = schema_domains(schema)?;
    let data: Vec<Vec<Value>> = rows.iter().zip(labels).map(|(r, &y)| with_class(r, y)).collect();
    learn(&data, &domains, config)
}

/// Learns a tree-shaped network over `domains.len()` features.
pub fn learn(rows: &[Vec<Value>], domains: &[Domain], config: &LearnConfig) -> Result<Spn> {
    config.check()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if domains.is_empty() {
        return Err(Error::Config("no features to learn".into()));
    }
    for r in rows {
        if r.len() != domains.len() {
            return Err(Error::Dimension {
                expected: domains.len(),
                got: r.len(),
            });
        }
        for (v, d) in r.iter().zip(domains) {
            let ok = match (v, d) {
                (Value::Real(x), Domain::Real) => x.is_finite(),
                (Value::Level(k), Domain::Levels(n)) => k < n,
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!("value {v:?} does not fit domain {d:?}")));
            }
        }
    }
    let mut learner = Learner {
        data: rows,
        domains,
        config,
        rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
        nodes: Vec::new(),
    };
    let all_rows: Vec<usize> = (0..rows.len()).collect();
    let scope: Vec<usize> = (0..domains.len()).collect();
    let root = learner.build(&all_rows, &scope);
    Spn::new(domains.len(), learner.nodes, root)
}

struct Learner<'a> {
    data: &'a [Vec<Value>],
    domains: &'a [Domain],
    config: &'a LearnConfig,
    rng: ChaCha8Rng,
    nodes: Vec<SpnNode>,
}

impl Learner<'_> {
    fn push(&mut self, n: SpnNode) -> NodeId {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn build(&mut self, rows: &[usize], scope: &[usize]) -> NodeId {
        if scope.len() == 1 {
            return self.leaf(rows, scope[0]);
        }
        if rows.len() < self.config.min_instances_slice {
            return self.factorize(rows, scope);
        }
        let groups = self.independent_groups(rows, scope);
        if groups.len() > 1 {
            let children = groups.iter().map(|g| self.build(rows, g)).collect();
            return self.push(SpnNode::Product { children });
        }
        match self.two_means(rows, scope) {
            Some((a, b)) => {
                let n = rows.len() as f64;
                let wa = a.len() as f64 / n;
                let left = self.build(&a, scope);
                let right = self.build(&b, scope);
                self.push(SpnNode::Sum {
                    children: vec![left, right],
                    weights: vec![wa, 1.0 - wa],
                })
            }
            None => self.factorize(rows, scope),
        }
    }

    fn factorize(&mut self, rows: &[usize], scope: &[usize]) -> NodeId {
        let children = scope.iter().map(|&f| self.leaf(rows, f)).collect();
        self.push(SpnNode::Product { children })
    }

    fn leaf(&mut self, rows: &[usize], feature: usize) -> NodeId {
        let node = match self.domains[feature] {
            Domain::Real => {
                let col: Vec<f64> = rows
                    .iter()
                    .map(|&r| self.data[r][feature].as_real().unwrap())
                    .collect();
                let bins = self.config.histogram_bins.min(distinct_count(&col)).max(1);
                fit_histogram(feature, &col, bins, self.config.pseudo_count)
            }
            Domain::Levels(n) => {
                let col: Vec<usize> = rows
                    .iter()
                    .map(|&r| self.data[r][feature].as_level().unwrap())
                    .collect();
                fit_categorical(feature, &col, n, self.config.pseudo_count)
            }
        };
        self.push(node)
    }

    /// Connected components of the "dependent" graph over `scope`.
    fn independent_groups(&self, rows: &[usize], scope: &[usize]) -> Vec<Vec<usize>> {
        let codes: Vec<(Vec<usize>, usize)> = scope.iter().map(|&f| self.discretize(rows, f)).collect();
        let k = scope.len();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for a in 0..k {
            for b in a + 1..k {
                if find(&mut parent, a) == find(&mut parent, b) {
                    continue;
                }
                let p = g_test_p_value(&codes[a].0, codes[a].1, &codes[b].0, codes[b].1);
                if p < self.config.independence_threshold {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_of: Vec<Option<usize>> = vec![None; k];
        for i in 0..k {
            let r = find(&mut parent, i);
            let g = *root_of[r].get_or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[g].push(scope[i]);
        }
        groups
    }

    /// Category codes of a column and the number of categories.
    fn discretize(&self, rows: &[usize], feature: usize) -> (Vec<usize>, usize) {
        match self.domains[feature] {
            Domain::Levels(n) => (
                rows.iter().map(|&r| self.data[r][feature].as_level().unwrap()).collect(),
                n,
            ),
            Domain::Real => {
                let col: Vec<f64> = rows.iter().map(|&r| self.data[r][feature].as_real().unwrap()).collect();
                let bins = self.config.histogram_bins.min(distinct_count(&col)).max(1);
                (col.iter().map(|&x| equal_width_bin(x, bins)).collect(), bins)
            }
        }
    }

    fn embed(&self, row: usize, scope: &[usize], out: &mut Vec<f64>) {
        out.clear();
        for &f in scope {
            match (self.domains[f], self.data[row][f]) {
                (Domain::Real, Value::Real(x)) => out.push(x),
                (Domain::Levels(n), Value::Level(k)) => {
                    out.extend((0..n).map(|i| if i == k { 1.0 } else { 0.0 }));
                }
                _ => unreachable!("checked on entry"),
            }
        }
    }

    /// Best of several 2-means runs; `None` when the rows cannot be split.
    fn two_means(&mut self, rows: &[usize], scope: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        let mut buf = Vec::new();
        let points: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| {
                self.embed(r, scope, &mut buf);
                buf.clone()
            })
            .collect();
        let mut best: Option<(f64, Vec<bool>)> = None;
        for _ in 0..KMEANS_RESTARTS {
            let i = self.rng.gen_range(0..points.len());
            let distinct: Vec<usize> = (0..points.len()).filter(|&j| points[j] != points[i]).collect();
            let Some(&j) = distinct.choose(&mut self.rng) else {
                return None;
            };
            let mut centers = [points[i].clone(), points[j].clone()];
            let mut assign = vec![false; points.len()];
            for _ in 0..KMEANS_ITERS {
                let mut changed = false;
                for (p, a) in points.iter().zip(assign.iter_mut()) {
                    let second = sq_dist(p, &centers[1]) < sq_dist(p, &centers[0]);
                    changed |= second != *a;
                    *a = second;
                }
                let mut sums = [vec![0.0; points[0].len()], vec![0.0; points[0].len()]];
                let mut counts = [0usize; 2];
                for (p, &a) in points.iter().zip(&assign) {
                    let c = usize::from(a);
                    counts[c] += 1;
                    for (s, v) in sums[c].iter_mut().zip(p) {
                        *s += v;
                    }
                }
                if counts.contains(&0) {
                    break;
                }
                for c in 0..2 {
                    centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                }
                if !changed {
                    break;
                }
            }
            let inertia: f64 = points
                .iter()
                .zip(&assign)
                .map(|(p, &a)| sq_dist(p, &centers[usize::from(a)]))
                .sum();
            let n_second = assign.iter().filter(|&&a| a).count();
            if n_second == 0 || n_second == points.len() {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                best = Some((inertia, assign));
            }
        }
        let (_, assign) = best?;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (&r, &s) in rows.iter().zip(&assign) {
            if s {
                b.push(r)
            } else {
                a.push(r)
            }
        }
        Some((a, b))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(col: &[f64]) -> usize {
    let mut v = col.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn equal_width_bin(x: f64, bins: usize) -> usize {
    ((x * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// p-value of the G-test of independence between two coded columns.
pub fn g_test_p_value(a: &[usize], na: usize, b: &[usize], nb: usize) -> f64 {
    let n = a.len() as f64;
    let mut table = vec![0.0; na * nb];
    let mut ra = vec![0.0; na];
    let mut rb = vec![0.0; nb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * nb + y] += 1.0;
        ra[x] += 1.0;
        rb[y] += 1.0;
    }
    let rows_used = ra.iter().filter(|&&c| c > 0.0).count();
    let cols_used = rb.iter().filter(|&&c| c > 0.0).count();
    let dof = (rows_used.saturating_sub(1) * cols_used.saturating_sub(1)) as f64;
    if dof == 0.0 {
        return 1.0;
    }
    let mut g = 0.0;
    for x in 0..na {
        for y in 0..nb {
            let o = table[x * nb + y];
            if o > 0.0 {
                let e = ra[x] * rb[y] / n;
                g += o * (o / e).ln();
            }
        }
    }
    g *= 2.0;
    ChiSquared::new(dof).map(|d| d.sf(g.max(0.0))).unwrap_or(1.0)
}

/// Equal-width histogram leaf over `[0, 1]` with additive smoothing; densities
/// are floored at `1e-9` and renormalized to unit integral.
pub fn fit_histogram(feature: usize, column: &[f64], bins: usize, pseudo_count: f64) -> SpnNode {
    let bins = bins.max(1);
    let mut counts = vec![0.0; bins];
    for &x in column {
        counts[equal_width_bin(x.clamp(0.0, 1.0), bins)] += 1.0;
    }
    let width = 1.0 / bins as f64;
    let total = column.len() as f64 + pseudo_count * bins as f64;
    let floor = LOG_FLOOR.exp();
    let mut dens: Vec<f64> = counts
        .iter()
        .map(|c| {
            let d = if total > 0.0 { (c + pseudo_count) / total / width } else { 1.0 };
            d.max(floor)
        })
        .collect();
    let mass: f64 = dens.iter().map(|d| d * width).sum();
    for d in &mut dens {
        *d /= mass;
    }
    let mut breakpoints: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    breakpoints[bins] = 1.0;
    SpnNode::Histogram {
        feature,
        breakpoints,
        log_densities: dens.iter().map(|d| d.ln()).collect(),
    }
}

/// Smoothed categorical leaf, floored at `1e-9` and renormalized.
pub fn fit_categorical(feature: usize, column: &[usize], levels: usize, pseudo_count: f64) -> SpnNode {
    let mut counts = vec![pseudo_count; levels];
    for &k in column {
        counts[k] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let floor = LOG_FLOOR.exp();
    let mut p: Vec<f64> = counts
        .iter()
        .map(|c| if total > 0.0 { c / total } else { 1.0 / levels as f64 }.max(floor))
        .collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    SpnNode::Categorical {
        feature,
        log_probs: p.iter().map(|v| v.ln()).collect(),
    }
}
