//! Compiles a factual, a classifier, an optional density network and the
//! actionability rules into one [`MioModel`].

use std::collections::HashMap;

use crate::data::{
    DatasetSchema, Direction, EncodedFeature, EncodedPoint, FeatureKind, MadWeights, Monotone, Value,
};
use crate::error::{Error, Result};
use crate::mio::{LinExpr, MioModel, PoolEntry, Sense, VarId};
use crate::nn::Mlp;
use crate::spn::{Domain, Spn, SpnNode, LOG_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct CeConstraints {
    /// Validity margin on raw scores.
    pub tau: f64,
    /// Minimal change, also the open side of histogram bins.
    pub epsilon: f64,
    pub sparsity_cap: Option<usize>,
    /// Lower bound on the network's root value.
    pub delta_spn: Option<f64>,
    /// Weight of the root log-likelihood in the objective.
    pub alpha: f64,
    pub target_class: Option<usize>,
    /// Fallback sum-node big-M; per-node bounds are used when they are finite.
    pub big_m_ll: f64,
}

impl Default for CeConstraints {
    fn default() -> Self {
        CeConstraints {
            tau: 1e-4,
            epsilon: 1e-4,
            sparsity_cap: None,
            delta_spn: None,
            alpha: 0.0,
            target_class: None,
            big_m_ll: 100.0,
        }
    }
}

impl CeConstraints {
    fn check(&self) -> Result<()> {
        let finite = [self.tau, self.epsilon, self.alpha, self.big_m_ll]
            .iter()
            .chain(self.delta_spn.iter())
            .all(|v| v.is_finite());
        if !finite || self.tau < 0.0 || self.epsilon <= 0.0 || self.alpha < 0.0 || self.big_m_ll <= 0.0 {
            return Err(Error::Config(format!("invalid constraint parameters {self:?}")));
        }
        Ok(())
    }
}

/// Variables of one feature's mixed-polytope encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureHandles {
    /// Factual value, or the mixed anchor when the factual is a level.
    pub anchor: f64,
    pub c: Option<VarId>,
    pub l: Option<VarId>,
    pub u: Option<VarId>,
    pub d: Vec<VarId>,
    pub d_cont: Option<VarId>,
    /// Integer proxy of a discrete contiguous feature, in raw units.
    pub z: Option<VarId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputHandles {
    pub features: Vec<FeatureHandles>,
    /// Encoded classifier input, one expression per encoded dimension.
    pub encoded: Vec<LinExpr>,
    /// `d^fact` per indicator, in feature order.
    pub factual: Vec<Value>,
}

/// Adds the mixed-polytope encoding of every feature, anchored at `factual`.
pub fn build_input(model: &mut MioModel, schema: &DatasetSchema, factual: &[Value]) -> Result<InputHandles> {
    let enc = schema.encode(factual)?;
    let mut features = Vec::with_capacity(schema.len());
    let mut encoded = vec![LinExpr::new(); schema.encoded_width()];
    for (j, (f, e)) in schema.features().iter().zip(&enc.features).enumerate() {
        let slot = schema.slot(j);
        let name = &f.name;
        let mut h = FeatureHandles {
            anchor: e.anchor,
            c: None,
            l: None,
            u: None,
            d: Vec::new(),
            d_cont: None,
            z: None,
        };
        for k in 0..slot.levels.len() {
            h.d.push(model.add_binary(format!("d[{name}][{k}]"))?);
        }
        match &f.kind {
            FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. } => {
                model.add_constraint(format!("onehot[{name}]"), LinExpr::sum(h.d.clone()), Sense::Eq, 1.0)?;
            }
            FeatureKind::Mixed { .. } => {
                let dc = model.add_binary(format!("dcont[{name}]"))?;
                h.d_cont = Some(dc);
                model.add_constraint(
                    format!("onehot[{name}]"),
                    LinExpr::sum(h.d.iter().copied().chain([dc])),
                    Sense::Eq,
                    1.0,
                )?;
            }
            _ => {}
        }
        if f.kind.has_continuous() {
            let fa = e.anchor;
            let c = model.add_continuous(format!("c[{name}]"), 0.0, 1.0)?;
            let l = model.add_continuous(format!("l[{name}]"), 0.0, fa)?;
            let u = model.add_continuous(format!("u[{name}]"), 0.0, 1.0 - fa)?;
            match h.d_cont {
                Some(dc) => {
                    model.add_eq(format!("cont[{name}]"), c, dc * fa - l + u)?;
                    model.add_le(format!("lcap[{name}]"), l, dc * fa)?;
                    model.add_le(format!("ucap[{name}]"), u, dc * (1.0 - fa))?;
                }
                None => {
                    model.add_eq(format!("cont[{name}]"), c, LinExpr::constant(fa) - l + u)?;
                }
            }
            if let FeatureKind::DiscreteContiguous { lb, ub } = f.kind {
                let z = model.add_integer(format!("z[{name}]"), lb as f64, ub as f64)?;
                model.add_eq(format!("proxy[{name}]"), c * f.scale() + f.shift(), z)?;
                h.z = Some(z);
            }
            h.c = Some(c);
            h.l = Some(l);
            h.u = Some(u);
            encoded[slot.cont.unwrap()] = c.into();
        }
        for (i, d) in slot.levels.clone().zip(&h.d) {
            encoded[i] = (*d).into();
        }
        if !f.mutable {
            fix_feature(model, &h, e)?;
        }
        features.push(h);
    }
    Ok(InputHandles {
        features,
        encoded,
        factual: factual.to_vec(),
    })
}

fn fix_feature(model: &mut MioModel, h: &FeatureHandles, e: &EncodedFeature) -> Result<()> {
    for (v, x) in h.d.iter().zip(&e.d) {
        model.fix(*v, *x)?;
    }
    if let (Some(v), Some(x)) = (h.d_cont, e.d_cont) {
        model.fix(v, x)?;
    }
    if let Some(c) = h.c {
        model.fix(c, e.c)?;
        model.fix(h.l.unwrap(), 0.0)?;
        model.fix(h.u.unwrap(), 0.0)?;
    }
    Ok(())
}

/// Bounds padding that absorbs rounding in interval propagation.
fn pad(lo: f64, hi: f64) -> (f64, f64) {
    (lo - 1e-9 * (1.0 + lo.abs()), hi + 1e-9 * (1.0 + hi.abs()))
}

/// Raw-output variables of `mlp` applied to the encoded input.
pub fn encode_classifier(model: &mut MioModel, mlp: &Mlp, input: &InputHandles) -> Result<Vec<VarId>> {
    if mlp.input_dim() != input.encoded.len() {
        return Err(Error::Dimension {
            expected: input.encoded.len(),
            got: mlp.input_dim(),
        });
    }
    let (lo, hi): (Vec<f64>, Vec<f64>) = input.encoded.iter().map(|e| model.expr_bounds(e)).unzip();
    let bounds = mlp.interval_bounds(&lo, &hi)?;
    let mut h: Vec<LinExpr> = input.encoded.clone();
    let last = mlp.layers().len() - 1;
    let mut raw = Vec::new();
    for (li, layer) in mlp.layers().iter().enumerate() {
        let mut next = Vec::with_capacity(layer.out_dim());
        for (k, (w, b)) in layer.weights.iter().zip(&layer.bias).enumerate() {
            let mut a = LinExpr::constant(*b);
            for (wi, xi) in w.iter().zip(&h) {
                if *wi != 0.0 {
                    a += xi.clone() * *wi;
                }
            }
            let (plo, phi) = if li < last {
                (bounds.lower[li][k], bounds.upper[li][k])
            } else {
                (bounds.output_lower[k], bounds.output_upper[k])
            };
            if !(plo.is_finite() && phi.is_finite()) {
                return Err(Error::Formulation(format!("unbounded pre-activation at layer {li}, unit {k}")));
            }
            let (plo, phi) = pad(plo, phi);
            if li == last {
                let v = model.add_continuous(format!("raw[{k}]"), plo, phi)?;
                model.add_eq(format!("raw_def[{k}]"), v, a)?;
                raw.push(v);
                continue;
            }
            if phi <= 0.0 {
                next.push(LinExpr::new());
            } else if plo >= 0.0 {
                let y = model.add_continuous(format!("relu[{li}][{k}]"), plo, phi)?;
                model.add_eq(format!("relu_lin[{li}][{k}]"), y, a)?;
                next.push(y.into());
            } else {
                let y = model.add_continuous(format!("relu[{li}][{k}]"), 0.0, phi)?;
                let s = model.add_binary(format!("act[{li}][{k}]"))?;
                model.add_ge(format!("relu_ge[{li}][{k}]"), y, a.clone())?;
                // y <= a - lo (1 - s)
                model.add_le(format!("relu_on[{li}][{k}]"), y, a + s * plo - plo)?;
                model.add_le(format!("relu_off[{li}][{k}]"), y, s * phi)?;
                next.push(y.into());
            }
        }
        h = next;
    }
    Ok(raw)
}

/// Per-class indicator expressions of the counterfactual class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHandles {
    pub indicators: Vec<LinExpr>,
    pub g: Vec<Option<VarId>>,
}

/// Adds the rows that make the counterfactual change (or target) the class.
/// With `tie_class`, untargeted multiclass problems also get indicators `y_k`
/// naming the class the counterfactual lands in.
pub fn add_validity(
    model: &mut MioModel,
    raw: &[VarId],
    num_classes: usize,
    factual_class: usize,
    cons: &CeConstraints,
    tie_class: bool,
) -> Result<ClassHandles> {
    if factual_class >= num_classes {
        return Err(Error::Formulation(format!("class {factual_class} out of range")));
    }
    if let Some(t) = cons.target_class {
        if t >= num_classes || t == factual_class {
            return Err(Error::Formulation(format!(
                "target class {t} must differ from the factual class {factual_class} and exist"
            )));
        }
    }
    let tau = cons.tau;
    let fixed = |t: usize| ClassHandles {
        indicators: (0..num_classes)
            .map(|k| LinExpr::constant(if k == t { 1.0 } else { 0.0 }))
            .collect(),
        g: vec![None; num_classes],
    };
    if num_classes == 2 {
        if raw.len() != 1 {
            return Err(Error::Formulation("binary classifier needs one raw output".into()));
        }
        let t = 1 - factual_class;
        if t == 1 {
            model.add_constraint("valid", raw[0], Sense::Ge, tau)?;
        } else {
            model.add_constraint("valid", raw[0], Sense::Le, -tau)?;
        }
        return Ok(fixed(t));
    }
    if raw.len() != num_classes {
        return Err(Error::Formulation(format!("{num_classes} classes but {} raw outputs", raw.len())));
    }
    if let Some(t) = cons.target_class {
        for k in (0..num_classes).filter(|&k| k != t) {
            model.add_ge(format!("valid[{t}>{k}]"), raw[t] - raw[k], LinExpr::constant(tau))?;
        }
        return Ok(fixed(t));
    }
    let fc = factual_class;
    let mut g = vec![None; num_classes];
    for k in (0..num_classes).filter(|&k| k != fc) {
        let gk = model.add_binary(format!("g[{k}]"))?;
        model.set_pool_key(gk, false);
        model.add_indicator(format!("g_on[{k}]"), gk, true, raw[k] - raw[fc], Sense::Ge, tau)?;
        model.add_indicator(format!("g_off[{k}]"), gk, false, raw[k] - raw[fc], Sense::Le, tau)?;
        g[k] = Some(gk);
    }
    model.add_constraint("valid_any", LinExpr::sum(g.iter().flatten().copied()), Sense::Ge, 1.0)?;
    let mut indicators = vec![LinExpr::new(); num_classes];
    if tie_class {
        let mut ys = Vec::new();
        for k in (0..num_classes).filter(|&k| k != fc) {
            let yk = model.add_binary(format!("y[{k}]"))?;
            model.set_pool_key(yk, false);
            for j in (0..num_classes).filter(|&j| j != k) {
                model.add_indicator(format!("y_wins[{k}>{j}]"), yk, true, raw[k] - raw[j], Sense::Ge, tau)?;
            }
            model.add_ge(format!("g_covers_y[{k}]"), g[k].unwrap(), yk)?;
            indicators[k] = yk.into();
            ys.push(yk);
        }
        model.add_constraint("one_class", LinExpr::sum(ys), Sense::Eq, 1.0)?;
    }
    Ok(ClassHandles { indicators, g })
}

/// Max-approximation value ranges `(lo, hi)` of every node.
pub fn node_ranges(spn: &Spn) -> Vec<(f64, f64)> {
    let mut r = vec![(0.0, 0.0); spn.nodes().len()];
    for &id in spn.topological_order() {
        r[id] = match spn.node(id) {
            SpnNode::Histogram { log_densities: q, .. } | SpnNode::Categorical { log_probs: q, .. } => {
                let v = q.iter().map(|x| x.max(LOG_FLOOR));
                (v.clone().fold(f64::INFINITY, f64::min), v.fold(f64::NEG_INFINITY, f64::max))
            }
            SpnNode::Product { children } => children
                .iter()
                .fold((0.0, 0.0), |(a, b), c| (a + r[*c].0, b + r[*c].1)),
            SpnNode::Sum { children, weights } => children.iter().zip(weights).fold(
                (f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b), (c, w)| (a.max(r[*c].0 + w.ln()), b.max(r[*c].1 + w.ln())),
            ),
        };
    }
    r
}

/// Adds the network rows and returns the root value variable `o_root`.
/// `class` gives indicator expressions for the class feature when the
/// network has one more feature than the schema.
pub fn encode_spn(
    model: &mut MioModel,
    spn: &Spn,
    schema: &DatasetSchema,
    input: &InputHandles,
    class: Option<&ClassHandles>,
    cons: &CeConstraints,
) -> Result<VarId> {
    let p = schema.len();
    if spn.num_features() != p && spn.num_features() != p + 1 {
        return Err(Error::Formulation(format!(
            "network has {} features, schema has {p} (plus an optional class)",
            spn.num_features()
        )));
    }
    // expressions feeding the leaves
    let mut real_inputs: HashMap<usize, LinExpr> = HashMap::new();
    let mut level_inputs: HashMap<usize, Vec<LinExpr>> = HashMap::new();
    for feat in 0..spn.num_features() {
        let Some(dom) = spn.domain(feat) else { continue };
        if feat == p {
            let cl = class.ok_or_else(|| Error::Formulation("class feature needs class indicators".into()))?;
            if dom != Domain::Levels(cl.indicators.len()) {
                return Err(Error::Formulation(format!("class feature domain {dom:?} does not match")));
            }
            level_inputs.insert(feat, cl.indicators.clone());
            continue;
        }
        let f = schema.feature(feat);
        let h = &input.features[feat];
        match (&f.kind, dom) {
            (FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. }, Domain::Real) => {
                real_inputs.insert(feat, h.c.unwrap().into());
            }
            (FeatureKind::Binary, Domain::Levels(2)) => {
                level_inputs.insert(feat, vec![LinExpr::constant(1.0) - h.d[0], h.d[0].into()]);
            }
            (FeatureKind::Categorical { levels } | FeatureKind::Ordinal { levels }, Domain::Levels(n))
                if n == levels.len() =>
            {
                level_inputs.insert(feat, h.d.iter().map(|v| LinExpr::from(*v)).collect());
            }
            (kind, dom) => {
                return Err(Error::Formulation(format!(
                    "network domain {dom:?} does not fit feature `{}` of kind {kind:?}",
                    f.name
                )))
            }
        }
    }

    let ranges = node_ranges(spn);
    let mut out: Vec<Option<LinExpr>> = vec![None; spn.nodes().len()];
    // shared bin indicators per (feature, breakpoints)
    let mut bins: HashMap<(usize, Vec<u64>), Vec<VarId>> = HashMap::new();
    let eps = cons.epsilon;
    for &id in spn.topological_order() {
        let expr = match spn.node(id) {
            SpnNode::Categorical { feature, log_probs } => {
                let ind = &level_inputs[feature];
                let mut e = LinExpr::new();
                for (x, q) in ind.iter().zip(log_probs) {
                    e += x.clone() * q.max(LOG_FLOOR);
                }
                e
            }
            SpnNode::Histogram {
                feature,
                breakpoints,
                log_densities,
            } => {
                let q: Vec<f64> = log_densities.iter().map(|v| v.max(LOG_FLOOR)).collect();
                let nb = q.len();
                if nb == 1 {
                    LinExpr::constant(q[0])
                } else {
                    let key = (*feature, breakpoints.iter().map(|t| t.to_bits()).collect::<Vec<_>>());
                    let bbar = match bins.get(&key) {
                        Some(v) => v.clone(),
                        None => {
                            let x = real_inputs[feature].clone();
                            let (xlo, xhi) = model.expr_bounds(&x);
                            let tag = bins.len();
                            let mut bbar = Vec::with_capacity(nb);
                            for i in 0..nb {
                                let b = model.add_binary(format!("bin[{tag}][{i}]"))?;
                                // b >= t_i - x
                                if breakpoints[i] > xlo {
                                    model.add_ge(format!("bin_below[{tag}][{i}]"), b + x.clone(), breakpoints[i])?;
                                }
                                // b >= x + eps - t_{i+1}; the last bin is closed
                                if i + 1 < nb && xhi + eps > breakpoints[i + 1] {
                                    model.add_ge(
                                        format!("bin_above[{tag}][{i}]"),
                                        LinExpr::from(b) - x.clone(),
                                        eps - breakpoints[i + 1],
                                    )?;
                                }
                                bbar.push(b);
                            }
                            model.add_constraint(
                                format!("one_bin[{tag}]"),
                                LinExpr::sum(bbar.clone()),
                                Sense::Eq,
                                (nb - 1) as f64,
                            )?;
                            bins.insert(key, bbar.clone());
                            bbar
                        }
                    };
                    let mut e = LinExpr::constant(q.iter().sum());
                    for (b, qi) in bbar.iter().zip(&q) {
                        e.add_term(*b, -qi);
                    }
                    e
                }
            }
            SpnNode::Product { children } => {
                let (lo, hi) = pad(ranges[id].0, ranges[id].1);
                let o = model.add_continuous(format!("o[{id}]"), lo, hi)?;
                let mut e = LinExpr::new();
                for c in children {
                    e += out[*c].clone().unwrap();
                }
                model.add_eq(format!("prod[{id}]"), o, e)?;
                o.into()
            }
            SpnNode::Sum { children, weights } => {
                let (lo, hi) = pad(ranges[id].0, ranges[id].1);
                let o = model.add_continuous(format!("o[{id}]"), lo, hi)?;
                let mut ms = Vec::with_capacity(children.len());
                for (a, (c, w)) in children.iter().zip(weights).enumerate() {
                    let m = model.add_binary(format!("m[{id}][{a}]"))?;
                    model.set_pool_key(m, false);
                    let lw = w.ln();
                    let tight = hi - (ranges[*c].0 + lw);
                    let t = if tight.is_finite() { tight.max(0.0) } else { cons.big_m_ll };
                    // o <= o_a + ln w + m T
                    model.add_le(format!("sum[{id}][{a}]"), o, out[*c].clone().unwrap() + lw + m * t)?;
                    ms.push(m);
                }
                model.add_constraint(
                    format!("sum_pick[{id}]"),
                    LinExpr::sum(ms),
                    Sense::Eq,
                    (children.len() - 1) as f64,
                )?;
                o.into()
            }
        };
        out[id] = Some(expr);
    }
    let root = out[spn.root()].clone().unwrap();
    match root.terms.as_slice() {
        [(v, c)] if *c == 1.0 && root.constant == 0.0 => Ok(*v),
        _ => {
            let (lo, hi) = pad(ranges[spn.root()].0, ranges[spn.root()].1);
            let o = model.add_continuous("o_root", lo, hi)?;
            model.add_eq("root", o, root)?;
            Ok(o)
        }
    }
}

/// `r ≥ [cause moved in direction]` and `r ⇒ effect moved in direction`.
fn add_causal(
    model: &mut MioModel,
    schema: &DatasetSchema,
    input: &InputHandles,
    idx: usize,
    cause: usize,
    cause_dir: Direction,
    effect: usize,
    effect_dir: Direction,
    eps: f64,
) -> Result<()> {
    let r = model.add_binary(format!("causal[{idx}]"))?;
    model.set_pool_key(r, false);
    let hc = &input.features[cause];
    match moved_expr(schema, input, cause, cause_dir) {
        Moved::Continuous => {
            let (l, u) = (hc.l.unwrap(), hc.u.unwrap());
            let diff = match cause_dir {
                Direction::Increase => u - l,
                Direction::Decrease => l - u,
            };
            model.add_ge(format!("causal_cause[{idx}]"), r, diff)?;
        }
        Moved::Levels(e) => {
            model.add_ge(format!("causal_cause[{idx}]"), r, e)?;
        }
    }
    let he = &input.features[effect];
    match moved_expr(schema, input, effect, effect_dir) {
        Moved::Continuous => {
            let fa = he.anchor;
            let (l, u) = (he.l.unwrap(), he.u.unwrap());
            let (grow, shrink, room) = match effect_dir {
                Direction::Increase => (u, l, fa),
                Direction::Decrease => (l, u, 1.0 - fa),
            };
            model.add_ge(format!("causal_effect_min[{idx}]"), grow, r * eps)?;
            model.add_le(
                format!("causal_effect_back[{idx}]"),
                shrink,
                LinExpr::constant(room) - r * room,
            )?;
        }
        Moved::Levels(e) => {
            model.add_le(format!("causal_effect[{idx}]"), r, e)?;
        }
    }
    Ok(())
}

enum Moved {
    Continuous,
    /// Indicator sum of the levels strictly beyond the factual in the direction.
    Levels(LinExpr),
}

fn moved_expr(schema: &DatasetSchema, input: &InputHandles, j: usize, dir: Direction) -> Moved {
    let f = schema.feature(j);
    let h = &input.features[j];
    let level = input.factual[j].as_level();
    match (&f.kind, level) {
        (FeatureKind::Binary, Some(fl)) => Moved::Levels(match (dir, fl) {
            (Direction::Increase, 0) => h.d[0].into(),
            (Direction::Decrease, 1) => LinExpr::constant(1.0) - h.d[0],
            _ => LinExpr::new(),
        }),
        (FeatureKind::Ordinal { .. }, Some(fl)) => Moved::Levels(LinExpr::sum(
            h.d.iter()
                .enumerate()
                .filter(|(k, _)| match dir {
                    Direction::Increase => *k > fl,
                    Direction::Decrease => *k < fl,
                })
                .map(|(_, v)| *v),
        )),
        _ => Moved::Continuous,
    }
}

/// Monotonicity, causal rules, the sparsity cap and the plausibility row.
/// Immutability is applied in [`build_input`].
pub fn add_desiderata(
    model: &mut MioModel,
    input: &InputHandles,
    schema: &DatasetSchema,
    cons: &CeConstraints,
    o_root: Option<VarId>,
) -> Result<()> {
    for (j, f) in schema.features().iter().enumerate() {
        let h = &input.features[j];
        if f.monotone == Monotone::None || !f.mutable {
            continue;
        }
        match (&f.kind, input.factual[j]) {
            (FeatureKind::Ordinal { .. }, Value::Level(fl)) => {
                for (k, v) in h.d.iter().enumerate() {
                    let blocked = match f.monotone {
                        Monotone::NonDecreasing => k < fl,
                        _ => k > fl,
                    };
                    if blocked {
                        model.fix(*v, 0.0)?;
                    }
                }
            }
            (FeatureKind::Binary, Value::Level(fl)) => match (f.monotone, fl) {
                (Monotone::NonDecreasing, 1) => model.fix(h.d[0], 1.0)?,
                (Monotone::NonIncreasing, 0) => model.fix(h.d[0], 0.0)?,
                _ => {}
            },
            (kind, _) if kind.has_continuous() => match f.monotone {
                Monotone::NonDecreasing => model.fix(h.l.unwrap(), 0.0)?,
                _ => model.fix(h.u.unwrap(), 0.0)?,
            },
            (kind, _) => {
                return Err(Error::Formulation(format!(
                    "monotonicity is undefined for `{}` of kind {kind:?}",
                    f.name
                )))
            }
        }
    }

    for (i, rule) in schema.causal_rules().iter().enumerate() {
        let find = |n: &str| {
            schema
                .feature_index(n)
                .ok_or_else(|| Error::Formulation(format!("causal rule names unknown feature `{n}`")))
        };
        add_causal(
            model,
            schema,
            input,
            i,
            find(&rule.cause_feature)?,
            rule.cause_direction,
            find(&rule.effect_feature)?,
            rule.effect_direction,
            cons.epsilon,
        )?;
    }

    if let Some(cap) = cons.sparsity_cap {
        let mut s_all = Vec::new();
        for (j, f) in schema.features().iter().enumerate() {
            let h = &input.features[j];
            let s = model.add_binary(format!("s[{}]", f.name))?;
            model.set_pool_key(s, false);
            if let (Some(l), Some(u)) = (h.l, h.u) {
                model.add_ge(format!("s_cont[{}]", f.name), s, l + u)?;
            }
            match (&f.kind, input.factual[j]) {
                (FeatureKind::Binary, Value::Level(fl)) => {
                    let changed = if fl == 1 { LinExpr::constant(1.0) - h.d[0] } else { h.d[0].into() };
                    model.add_ge(format!("s_bin[{}]", f.name), s, changed)?;
                }
                (_, Value::Level(fl)) => {
                    for (k, d) in h.d.iter().enumerate() {
                        let changed = if k == fl { LinExpr::constant(1.0) - *d } else { (*d).into() };
                        model.add_ge(format!("s_lvl[{}][{k}]", f.name), s, changed)?;
                    }
                }
                (_, Value::Real(_)) => {
                    // a mixed feature leaving the continuous branch
                    for (k, d) in h.d.iter().enumerate() {
                        model.add_ge(format!("s_lvl[{}][{k}]", f.name), s, *d)?;
                    }
                }
            }
            s_all.push(s);
        }
        model.add_constraint("sparsity", LinExpr::sum(s_all), Sense::Le, cap as f64)?;
    }

    if let Some(delta) = cons.delta_spn {
        let o = o_root.ok_or_else(|| Error::Formulation("likelihood threshold needs a density network".into()))?;
        model.add_constraint("plausibility", o, Sense::Ge, delta)?;
    }
    Ok(())
}

/// `(l + u)ᵀ v_cont + Σ v_bin |d - d_fact|`, linear because `d_fact` is constant.
pub fn distance_expr(input: &InputHandles, schema: &DatasetSchema, weights: &MadWeights) -> Result<LinExpr> {
    if weights.dims.len() != schema.encoded_width() {
        return Err(Error::Dimension {
            expected: schema.encoded_width(),
            got: weights.dims.len(),
        });
    }
    let fact = schema.to_vector(&input.factual);
    let mut e = LinExpr::new();
    for (j, h) in input.features.iter().enumerate() {
        let slot = schema.slot(j);
        if let Some(ci) = slot.cont {
            let w = weights.dims[ci];
            e += h.l.unwrap() * w;
            e += h.u.unwrap() * w;
        }
        for (i, d) in slot.levels.clone().zip(&h.d) {
            let w = weights.dims[i];
            if fact[i] >= 0.5 {
                e += LinExpr::constant(w) - *d * w;
            } else {
                e += *d * w;
            }
        }
    }
    Ok(e)
}

pub fn set_objective(
    model: &mut MioModel,
    input: &InputHandles,
    schema: &DatasetSchema,
    weights: &MadWeights,
    alpha: f64,
    o_root: Option<VarId>,
) -> Result<LinExpr> {
    let dist = distance_expr(input, schema, weights)?;
    let mut obj = dist.clone();
    if alpha != 0.0 {
        let o = o_root.ok_or_else(|| Error::Formulation("alpha > 0 needs a density network".into()))?;
        obj += o * -alpha;
    }
    model.set_objective(obj)?;
    Ok(dist)
}

/// One complete counterfactual problem.
#[derive(Debug, Clone)]
pub struct Formulation {
    pub model: MioModel,
    pub input: InputHandles,
    pub raw: Vec<VarId>,
    pub class: ClassHandles,
    pub o_root: Option<VarId>,
    pub distance: LinExpr,
}

impl Formulation {
    pub fn build(
        schema: &DatasetSchema,
        factual: &[Value],
        factual_class: usize,
        mlp: &Mlp,
        spn: Option<&Spn>,
        weights: &MadWeights,
        cons: &CeConstraints,
    ) -> Result<Self> {
        cons.check()?;
        let mut model = MioModel::new();
        let input = build_input(&mut model, schema, factual)?;
        let raw = encode_classifier(&mut model, mlp, &input)?;
        let class = add_validity(
            &mut model,
            &raw,
            schema.num_classes(),
            factual_class,
            cons,
            spn.is_some_and(|s| s.num_features() > schema.len()),
        )?;
        let o_root = match spn {
            Some(s) => Some(encode_spn(&mut model, s, schema, &input, Some(&class), cons)?),
            None => None,
        };
        add_desiderata(&mut model, &input, schema, cons, o_root)?;
        let distance = set_objective(&mut model, &input, schema, weights, cons.alpha, o_root)?;
        Ok(Formulation {
            model,
            input,
            raw,
            class,
            o_root,
            distance,
        })
    }

    /// Mixed-polytope values of a pool entry.
    pub fn encoded_point(&self, entry: &PoolEntry) -> EncodedPoint {
        let get = |v: Option<VarId>| v.map(|v| entry.value(v));
        EncodedPoint {
            features: self
                .input
                .features
                .iter()
                .map(|h| EncodedFeature {
                    anchor: h.anchor,
                    lower: 0.0,
                    upper: 1.0,
                    c: get(h.c).unwrap_or(0.0),
                    l: get(h.l).unwrap_or(0.0),
                    u: get(h.u).unwrap_or(0.0),
                    d: h.d.iter().map(|v| entry.value(*v)).collect(),
                    d_cont: get(h.d_cont),
                })
                .collect(),
        }
    }

    /// Normalized counterfactual row of a pool entry.
    pub fn decode(&self, schema: &DatasetSchema, entry: &PoolEntry) -> Result<Vec<Value>> {
        schema.decode(&self.encoded_point(entry))
    }

    pub fn raw_values(&self, entry: &PoolEntry) -> Vec<f64> {
        self.raw.iter().map(|v| entry.value(*v)).collect()
    }

    /// Fixes every encoding variable to the encoding of `row` (anchored at the factual).
    pub fn fix_input(&mut self, schema: &DatasetSchema, row: &[Value]) -> Result<()> {
        fix_input(&mut self.model, &self.input, schema, row)
    }
}

/// Fixes the encoding variables of `input` to the encoding of `row`.
pub fn fix_input(model: &mut MioModel, input: &InputHandles, schema: &DatasetSchema, row: &[Value]) -> Result<()> {
    let target = schema.to_vector(row);
    for (j, h) in input.features.iter().enumerate() {
        let slot = schema.slot(j);
        for (i, d) in slot.levels.clone().zip(&h.d) {
            model.fix(*d, target[i])?;
        }
        let on_cont = matches!(row[j], Value::Real(_));
        if let Some(dc) = h.d_cont {
            model.fix(dc, if on_cont { 1.0 } else { 0.0 })?;
        }
        if let Some(c) = h.c {
            let x = if on_cont { target[slot.cont.unwrap()] } else { 0.0 };
            let base = if on_cont { h.anchor } else { 0.0 };
            model.fix(c, x)?;
            model.fix(h.l.unwrap(), (base - x).max(0.0))?;
            model.fix(h.u.unwrap(), (x - base).max(0.0))?;
            if let Some(z) = h.z {
                let f = schema.feature(j);
                model.fix(z, f.denormalize_number(x).round())?;
            }
        }
    }
    Ok(())
}
