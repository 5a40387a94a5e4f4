//! Brute-force reference checks: exhaustive counterfactual search on small
//! grids, the max-approximation bound, and a random network generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSchema, FeatureKind, MadWeights, Value};
use crate::engine::{is_actionable, sparsity};
use crate::error::{Error, Result};
use crate::formulation::CeConstraints;
use crate::nn::{class_margin, Mlp};
use crate::spn::{Domain, NodeId, Spn, SpnNode};
use crate::spn_learn::with_class;

pub const DEFAULT_GRID_CAP: u128 = 1_000_000;
pub const DEFAULT_LATTICE: usize = 16;

/// Candidate values per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteGrid {
    pub values: Vec<Vec<Value>>,
}

impl DiscreteGrid {
    /// Levels for level kinds, every integer for discrete contiguous
    /// features, and `k / lattice` for continuous ranges.
    pub fn for_schema(schema: &DatasetSchema, lattice: usize, cap: u128) -> Result<Self> {
        let lattice = lattice.max(1);
        let steps = || (0..=lattice).map(move |k| Value::Real(k as f64 / lattice as f64));
        let values: Vec<Vec<Value>> = schema
            .features()
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Continuous { .. } => steps().collect(),
                FeatureKind::DiscreteContiguous { lb, ub } => {
                    (*lb..=*ub).map(|z| Value::Real(f.normalize_number(z as f64))).collect()
                }
                FeatureKind::Binary => vec![Value::Level(0), Value::Level(1)],
                FeatureKind::Categorical { levels } | FeatureKind::Ordinal { levels } => {
                    (0..levels.len()).map(Value::Level).collect()
                }
                FeatureKind::Mixed { levels, .. } => (0..levels.len()).map(Value::Level).chain(steps()).collect(),
            })
            .collect();
        let grid = DiscreteGrid { values };
        let size = grid.size();
        if size > cap {
            return Err(Error::GridTooLarge { size, cap });
        }
        Ok(grid)
    }

    pub fn size(&self) -> u128 {
        self.values.iter().map(|v| v.len() as u128).product()
    }

    /// Points in lexicographic order (last feature varies fastest).
    pub fn points(&self) -> impl Iterator<Item = Vec<Value>> + '_ {
        let total = self.size();
        (0..total).map(move |mut idx| {
            let mut p = vec![Value::Level(0); self.values.len()];
            for j in (0..self.values.len()).rev() {
                let n = self.values[j].len() as u128;
                p[j] = self.values[j][(idx % n) as usize];
                idx /= n;
            }
            p
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub point: Vec<Value>,
    pub objective: f64,
    pub distance: f64,
    /// Max-approximation log-likelihood with the counterfactual class.
    pub ll_max_approx: Option<f64>,
}

/// Exhaustive search for the counterfactual minimizing
/// `distance - alpha * max-approx LL` over the grid, subject to validity,
/// actionability, the sparsity cap and the likelihood threshold.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_ce(
    schema: &DatasetSchema,
    factual: &[Value],
    grid: &DiscreteGrid,
    mlp: &Mlp,
    spn: Option<&Spn>,
    weights: &MadWeights,
    cons: &CeConstraints,
) -> Result<Option<OracleResult>> {
    let fx = schema.to_vector(factual);
    let factual_class = mlp.classify(&fx)?;
    let mut best: Option<OracleResult> = None;
    for p in grid.points() {
        let h = mlp.forward_raw(&schema.to_vector(&p))?;
        let (margin, ce_class) = validity(&h, factual_class, cons.target_class);
        if margin < cons.tau {
            continue;
        }
        if !is_actionable(schema, factual, &p, cons.epsilon) {
            continue;
        }
        if cons.sparsity_cap.is_some_and(|s| sparsity(schema, factual, &p, 0.0) > s) {
            continue;
        }
        let ll = match spn {
            Some(s) => {
                let point = if s.num_features() > schema.len() {
                    with_class(&p, ce_class)
                } else {
                    p.clone()
                };
                Some(s.log_likelihood_max_approx(&point)?)
            }
            None => None,
        };
        if let (Some(delta), Some(v)) = (cons.delta_spn, ll) {
            if v < delta {
                continue;
            }
        }
        let distance = weights.distance(schema, factual, &p)?;
        let objective = distance - cons.alpha * ll.unwrap_or(0.0);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(OracleResult {
                point: p,
                objective,
                distance,
                ll_max_approx: ll,
            });
        }
    }
    Ok(best)
}

/// Margin towards the counterfactual class and that class.
fn validity(h: &[f64], factual_class: usize, target: Option<usize>) -> (f64, usize) {
    if h.len() == 1 {
        let t = 1 - factual_class;
        return (class_margin(h, t), t);
    }
    if let Some(t) = target {
        return (class_margin(h, t), t);
    }
    let mut best = None;
    for (k, v) in h.iter().enumerate() {
        if k != factual_class && best.is_none_or(|(_, b): (usize, f64)| *v > b) {
            best = Some((k, *v));
        }
    }
    let (k, v) = best.expect("at least two classes");
    // margin over every other class, as the class-tied encoding requires
    (class_margin(h, k).min(v - h[factual_class]), k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub max_gap: f64,
    pub min_gap: f64,
    /// `Σ ln |children|` over sum nodes.
    pub bound: f64,
}

/// Random points uniformly over the network's domains.
pub fn random_point(spn: &Spn, rng: &mut impl Rng) -> Vec<Value> {
    (0..spn.num_features())
        .map(|f| match spn.domain(f) {
            Some(Domain::Levels(n)) => Value::Level(rng.gen_range(0..n)),
            _ => Value::Real(rng.gen_range(0.0..=1.0)),
        })
        .collect()
}

/// Checks `0 ≤ exact − max-approx ≤ Σ ln |ch|` on random points; errors on any violation.
pub fn check_spn_bounds(spn: &Spn, n_samples: usize, seed: u64) -> Result<BoundCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = spn.max_approx_gap_bound();
    let mut out = BoundCheck {
        max_gap: 0.0,
        min_gap: f64::INFINITY,
        bound,
    };
    for _ in 0..n_samples {
        let p = random_point(spn, &mut rng);
        let exact = spn.log_likelihood(&p)?;
        let approx = spn.log_likelihood_max_approx(&p)?;
        let gap = exact - approx;
        // tolerance for log-sum-exp rounding
        let tol = 1e-9 * (1.0 + exact.abs());
        if gap < -tol || gap > bound + tol {
            return Err(Error::Model(format!(
                "max-approximation gap {gap} outside [0, {bound}] at {p:?}"
            )));
        }
        out.max_gap = out.max_gap.max(gap);
        out.min_gap = out.min_gap.min(gap);
    }
    if n_samples == 0 {
        out.min_gap = 0.0;
    }
    Ok(out)
}

/// Random valid tree network over `domains` with roughly `target_nodes` nodes.
pub fn random_spn(domains: &[Domain], target_nodes: usize, seed: u64) -> Result<Spn> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
        domains,
        budget: target_nodes.max(domains.len() + 1),
    };
    let scope: Vec<usize> = (0..domains.len()).collect();
    let root = g.build(&scope, 0);
    Spn::new(domains.len(), g.nodes, root)
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    nodes: Vec<SpnNode>,
    domains: &'a [Domain],
    budget: usize,
}

impl Gen<'_> {
    fn push(&mut self, n: SpnNode) -> NodeId {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn build(&mut self, scope: &[usize], depth: usize) -> NodeId {
        let remaining = self.budget.saturating_sub(self.nodes.len());
        let room = remaining > 2 * scope.len() + 2 && depth < 8;
        if room && (scope.len() == 1 || self.rng.gen_bool(0.5)) {
            let k = self.rng.gen_range(2..=3);
            let children: Vec<NodeId> = (0..k).map(|_| self.build(scope, depth + 1)).collect();
            let raw: Vec<f64> = (0..k).map(|_| self.rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            return self.push(SpnNode::Sum {
                children,
                weights: raw.iter().map(|w| w / s).collect(),
            });
        }
        if scope.len() == 1 {
            return self.leaf(scope[0]);
        }
        let mut shuffled = scope.to_vec();
        shuffled.shuffle(&mut self.rng);
        let parts = self.rng.gen_range(2..=scope.len().min(3));
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); parts];
        for (i, f) in shuffled.into_iter().enumerate() {
            groups[if i < parts { i } else { self.rng.gen_range(0..parts) }].push(f);
        }
        let children = groups
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.sort();
                self.build(&g, depth + 1)
            })
            .collect();
        self.push(SpnNode::Product { children })
    }

    fn leaf(&mut self, feature: usize) -> NodeId {
        let node = match self.domains[feature] {
            Domain::Levels(n) => {
                let raw: Vec<f64> = (0..n).map(|_| self.rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                SpnNode::Categorical {
                    feature,
                    log_probs: raw.iter().map(|p| (p / s).ln()).collect(),
                }
            }
            Domain::Real => {
                let bins = self.rng.gen_range(1..=6);
                let mut inner: Vec<f64> = (0..bins - 1).map(|_| self.rng.gen_range(0.02..0.98)).collect();
                inner.sort_by(f64::total_cmp);
                inner.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
                let mut breakpoints = vec![0.0];
                breakpoints.extend(inner);
                breakpoints.push(1.0);
                let nb = breakpoints.len() - 1;
                let mass: Vec<f64> = (0..nb).map(|_| self.rng.gen_range(0.01..1.0)).collect();
                let total: f64 = mass.iter().sum();
                let log_densities = (0..nb)
                    .map(|i| (mass[i] / total / (breakpoints[i + 1] - breakpoints[i])).ln())
                    .collect();
                SpnNode::Histogram {
                    feature,
                    breakpoints,
                    log_densities,
                }
            }
        };
        self.push(node)
    }
}
