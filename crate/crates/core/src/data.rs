//! Tabular schema, normalization, MAD weights and the mixed-polytope
//! encoding of rows.
//!
//! Three row representations are used throughout the crate:
//!
//! * [`RawValue`] rows, exactly as read from CSV;
//! * [`Value`] rows, one entry per feature, with numeric features scaled
//!   to `[0, 1]` and level-valued features replaced by their level index;
//! * flat encoded vectors (`Vec<f64>`), the classifier input, in which
//!   level-valued features are one-hot encoded.
//!
//! [`EncodedPoint`] adds the `(l, u, c, d)` image used by the MIO input
//! encoding on top of the flat vector.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stats;

/// Tolerance used when reading binaries back from a solver assignment.
pub const BINARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous {
        lb: f64,
        ub: f64,
    },
    Categorical {
        levels: Vec<String>,
    },
    /// Levels listed in increasing rank.
    Ordinal {
        levels: Vec<String>,
    },
    Binary,
    DiscreteContiguous {
        lb: i64,
        ub: i64,
    },
    /// Either a number in `[lb, ub]` or one of `levels`. `median` is the raw
    /// median of the numeric entries, used as the continuous anchor when the
    /// factual takes a level.
    Mixed {
        lb: f64,
        ub: f64,
        levels: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        median: Option<f64>,
    },
}

impl FeatureKind {
    /// True when the feature has a continuous (`c_j`) component.
    pub fn has_continuous(&self) -> bool {
        matches!(
            self,
            FeatureKind::Continuous { .. }
                | FeatureKind::DiscreteContiguous { .. }
                | FeatureKind::Mixed { .. }
        )
    }

    pub fn levels(&self) -> &[String] {
        match self {
            FeatureKind::Categorical { levels }
            | FeatureKind::Ordinal { levels }
            | FeatureKind::Mixed { levels, .. } => levels,
            _ => &[],
        }
    }

    /// Number of values a level-valued feature can take (2 for binary).
    pub fn level_count(&self) -> usize {
        match self {
            FeatureKind::Binary => 2,
            other => other.levels().len(),
        }
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            FeatureKind::Continuous { lb, ub } | FeatureKind::Mixed { lb, ub, .. } => Some((lb, ub)),
            FeatureKind::DiscreteContiguous { lb, ub } => Some((lb as f64, ub as f64)),
            _ => None,
        }
    }

    /// Ordered kinds admit monotonicity and causal direction.
    pub fn is_ordered(&self) -> bool {
        matches!(
            self,
            FeatureKind::Continuous { .. }
                | FeatureKind::DiscreteContiguous { .. }
                | FeatureKind::Ordinal { .. }
                | FeatureKind::Binary
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotone {
    #[default]
    None,
    NonDecreasing,
    NonIncreasing,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default = "default_true")]
    pub mutable: bool,
    #[serde(default)]
    pub monotone: Monotone,
    /// raw = normalized * scale + shift. Defaults to `ub - lb` / `lb`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        FeatureSpec {
            name: name.into(),
            kind,
            mutable: true,
            monotone: Monotone::None,
            scale: None,
            shift: None,
        }
    }

    pub fn immutable(mut self) -> Self {
        self.mutable = false;
        self
    }

    pub fn monotone(mut self, m: Monotone) -> Self {
        self.monotone = m;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
            .unwrap_or_else(|| self.kind.bounds().map_or(1.0, |(lb, ub)| ub - lb))
    }

    pub fn shift(&self) -> f64 {
        self.shift
            .unwrap_or_else(|| self.kind.bounds().map_or(0.0, |(lb, _)| lb))
    }

    pub fn normalize_number(&self, v: f64) -> f64 {
        (v - self.shift()) / self.scale()
    }

    pub fn denormalize_number(&self, v: f64) -> f64 {
        v * self.scale() + self.shift()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Increase => 1.0,
            Direction::Decrease => -1.0,
        }
    }
}

/// If `cause` moves in `cause_direction`, `effect` must move in `effect_direction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalRule {
    pub cause_feature: String,
    pub cause_direction: Direction,
    pub effect_feature: String,
    pub effect_direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetKind {
    Binary,
    Multiclass { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub name: String,
    #[serde(flatten)]
    pub kind: TargetKind,
}

impl Target {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            TargetKind::Binary => 2,
            TargetKind::Multiclass { classes } => classes,
        }
    }
}

/// Encoded-vector positions of one feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    /// Position of `c_j`, if the feature has a continuous part.
    pub cont: Option<usize>,
    /// Positions of the level indicators (one for binary features).
    pub levels: Range<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    #[serde(default = "schema_version")]
    format_version: u32,
    features: Vec<FeatureSpec>,
    target: Target,
    #[serde(default)]
    causal_rules: Vec<CausalRule>,
}

fn schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct DatasetSchema {
    features: Vec<FeatureSpec>,
    target: Target,
    causal_rules: Vec<CausalRule>,
    slots: Vec<Slot>,
    width: usize,
}

impl TryFrom<SchemaFile> for DatasetSchema {
    type Error = Error;

    fn try_from(f: SchemaFile) -> Result<Self> {
        if f.format_version != 1 {
            return Err(Error::Schema(format!(
                "unsupported schema format version {}",
                f.format_version
            )));
        }
        DatasetSchema::new(f.features, f.target, f.causal_rules)
    }
}

impl From<DatasetSchema> for SchemaFile {
    fn from(s: DatasetSchema) -> Self {
        SchemaFile {
            format_version: 1,
            features: s.features,
            target: s.target,
            causal_rules: s.causal_rules,
        }
    }
}

impl DatasetSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        target: Target,
        causal_rules: Vec<CausalRule>,
    ) -> Result<Self> {
        let mut names = HashSet::new();
        for f in &features {
            if !names.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            check_feature(f)?;
        }
        if names.contains(target.name.as_str()) {
            return Err(Error::Schema(format!(
                "target `{}` collides with a feature name",
                target.name
            )));
        }
        if target.num_classes() < 2 {
            return Err(Error::Schema("target needs at least 2 classes".into()));
        }
        for r in &causal_rules {
            if r.cause_feature == r.effect_feature {
                return Err(Error::Schema(format!(
                    "causal rule on `{}` refers to itself",
                    r.cause_feature
                )));
            }
            for name in [&r.cause_feature, &r.effect_feature] {
                let f = features
                    .iter()
                    .find(|f| &f.name == name)
                    .ok_or_else(|| Error::Schema(format!("causal rule names unknown feature `{name}`")))?;
                if !f.kind.is_ordered() {
                    return Err(Error::Schema(format!(
                        "causal rule on `{name}` needs an ordered feature kind"
                    )));
                }
            }
        }

        let mut slots = Vec::with_capacity(features.len());
        let mut pos = 0;
        for f in &features {
            let cont = if f.kind.has_continuous() {
                pos += 1;
                Some(pos - 1)
            } else {
                None
            };
            let n = match f.kind {
                FeatureKind::Binary => 1,
                ref k => k.levels().len(),
            };
            slots.push(Slot {
                cont,
                levels: pos..pos + n,
            });
            pos += n;
        }
        Ok(DatasetSchema {
            features,
            target,
            causal_rules,
            slots,
            width: pos,
        })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature(&self, j: usize) -> &FeatureSpec {
        &self.features[j]
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    pub fn num_classes(&self) -> usize {
        self.target.num_classes()
    }

    pub fn causal_rules(&self) -> &[CausalRule] {
        &self.causal_rules
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, j: usize) -> &Slot {
        &self.slots[j]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Length of the encoded (classifier input) vector.
    pub fn encoded_width(&self) -> usize {
        self.width
    }

    /// Names of the encoded dimensions in order.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.width];
        for (f, s) in self.features.iter().zip(&self.slots) {
            if let Some(c) = s.cont {
                names[c] = f.name.clone();
            }
            match &f.kind {
                FeatureKind::Binary => names[s.levels.start] = format!("{}=1", f.name),
                k => {
                    for (i, lvl) in k.levels().iter().enumerate() {
                        names[s.levels.start + i] = format!("{}={}", f.name, lvl);
                    }
                }
            }
        }
        names
    }

    /// Hash of the encoded-dimension ordering; stored alongside network
    /// weights to catch schema/network misalignment.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in self.encoded_names() {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Whether dimension `i` of the encoded vector is a continuous one.
    pub fn is_continuous_dim(&self, i: usize) -> bool {
        self.slots.iter().any(|s| s.cont == Some(i))
    }

    pub fn parse_raw(&self, j: usize, cell: &str) -> Result<RawValue> {
        let f = &self.features[j];
        let cell = cell.trim();
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::BadValue {
                feature: f.name.clone(),
                reason: format!("`{s}` is not a number"),
            })
        };
        Ok(match &f.kind {
            FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. } | FeatureKind::Binary => {
                RawValue::Num(num(cell)?)
            }
            FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. } => RawValue::Label(cell.to_string()),
            FeatureKind::Mixed { levels, .. } => {
                if levels.iter().any(|l| l == cell) {
                    RawValue::Label(cell.to_string())
                } else {
                    RawValue::Num(num(cell)?)
                }
            }
        })
    }

    /// Maps a raw row to per-feature normalized values. Out-of-bounds values are errors.
    pub fn normalize_row(&self, raw: &[RawValue]) -> Result<Vec<Value>> {
        self.normalize_impl(raw, false)
    }

    /// As [`normalize_row`](Self::normalize_row) but clips numeric values to
    /// the schema bounds (with a warning) instead of failing.
    pub fn normalize_row_clipped(&self, raw: &[RawValue]) -> Result<Vec<Value>> {
        self.normalize_impl(raw, true)
    }

    fn normalize_impl(&self, raw: &[RawValue], clip: bool) -> Result<Vec<Value>> {
        if raw.len() != self.features.len() {
            return Err(Error::Dimension {
                expected: self.features.len(),
                got: raw.len(),
            });
        }
        self.features
            .iter()
            .zip(raw)
            .map(|(f, v)| normalize_value(f, v, clip))
            .collect()
    }

    /// Flat encoded vector of a normalized row (continuous parts and one-hot levels).
    pub fn to_vector(&self, row: &[Value]) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for ((f, s), v) in self.features.iter().zip(&self.slots).zip(row) {
            match (v, &f.kind) {
                (Value::Real(x), _) => {
                    if let Some(c) = s.cont {
                        out[c] = *x;
                    }
                }
                (Value::Level(k), FeatureKind::Binary) => out[s.levels.start] = *k as f64,
                (Value::Level(k), _) => out[s.levels.start + k] = 1.0,
            }
        }
        out
    }

    /// Raw row to encoded vector.
    pub fn normalize(&self, raw: &[RawValue]) -> Result<Vec<f64>> {
        Ok(self.to_vector(&self.normalize_row(raw)?))
    }

    /// Inverse of [`to_vector`](Self::to_vector); binaries are rounded at 0.5.
    pub fn from_vector(&self, x: &[f64]) -> Result<Vec<Value>> {
        if x.len() != self.width {
            return Err(Error::Dimension {
                expected: self.width,
                got: x.len(),
            });
        }
        self.features
            .iter()
            .zip(&self.slots)
            .map(|(f, s)| {
                let lv = &x[s.levels.clone()];
                match &f.kind {
                    FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. } => {
                        Ok(Value::Real(x[s.cont.unwrap()]))
                    }
                    FeatureKind::Binary => Ok(Value::Level(usize::from(lv[0] >= 0.5))),
                    FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. } => {
                        one_hot_level(&f.name, lv, true).map(|k| Value::Level(k.unwrap()))
                    }
                    FeatureKind::Mixed { .. } => Ok(match one_hot_level(&f.name, lv, false)? {
                        Some(k) => Value::Level(k),
                        None => Value::Real(x[s.cont.unwrap()]),
                    }),
                }
            })
            .collect()
    }

    /// Normalized row back to raw values. Discrete contiguous values are rounded.
    pub fn denormalize_row(&self, row: &[Value]) -> Result<Vec<RawValue>> {
        self.features
            .iter()
            .zip(row)
            .map(|(f, v)| match (&f.kind, v) {
                (FeatureKind::Continuous { .. } | FeatureKind::Mixed { .. }, Value::Real(x)) => {
                    Ok(RawValue::Num(f.denormalize_number(*x)))
                }
                (FeatureKind::DiscreteContiguous { .. }, Value::Real(x)) => {
                    Ok(RawValue::Num(f.denormalize_number(*x).round()))
                }
                (FeatureKind::Binary, Value::Level(k)) if *k < 2 => Ok(RawValue::Num(*k as f64)),
                (k, Value::Level(i)) if *i < k.levels().len() => Ok(RawValue::Label(k.levels()[*i].clone())),
                _ => Err(Error::BadValue {
                    feature: f.name.clone(),
                    reason: format!("value {v:?} does not fit the feature kind"),
                }),
            })
            .collect()
    }

    /// Normalized continuous anchor of a mixed feature (its median).
    pub fn mixed_anchor(&self, j: usize) -> Result<f64> {
        let f = &self.features[j];
        match f.kind {
            FeatureKind::Mixed { median: Some(m), .. } => Ok(f.normalize_number(m)),
            FeatureKind::Mixed { median: None, .. } => Err(Error::Schema(format!(
                "mixed feature `{}` has no median; call fit_mixed_medians",
                f.name
            ))),
            _ => Err(Error::Schema(format!("feature `{}` is not mixed", f.name))),
        }
    }

    /// Fills the median of every mixed feature from the numeric entries of a raw dataset.
    pub fn fit_mixed_medians(&mut self, rows: &[Vec<RawValue>]) -> Result<()> {
        for j in 0..self.features.len() {
            if let FeatureKind::Mixed { median, .. } = &mut self.features[j].kind {
                let nums: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| match r.get(j) {
                        Some(RawValue::Num(x)) => Some(*x),
                        _ => None,
                    })
                    .collect();
                *median = stats::median(&nums);
            }
        }
        Ok(())
    }

    /// Mixed-polytope image of a normalized row, anchored at that row.
    pub fn encode(&self, row: &[Value]) -> Result<EncodedPoint> {
        if row.len() != self.features.len() {
            return Err(Error::Dimension {
                expected: self.features.len(),
                got: row.len(),
            });
        }
        let features = self
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let v = &row[j];
                let n_ind = self.slots[j].levels.len();
                let mut d = vec![0.0; n_ind];
                Ok(match (&f.kind, v) {
                    (FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. }, Value::Real(x)) => {
                        EncodedFeature::continuous(*x, d, None)
                    }
                    (FeatureKind::Binary, Value::Level(k)) => {
                        d[0] = *k as f64;
                        EncodedFeature::levels(d, None)
                    }
                    (FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. }, Value::Level(k)) => {
                        d[*k] = 1.0;
                        EncodedFeature::levels(d, None)
                    }
                    (FeatureKind::Mixed { .. }, Value::Real(x)) => EncodedFeature::continuous(*x, d, Some(1.0)),
                    (FeatureKind::Mixed { .. }, Value::Level(k)) => {
                        d[*k] = 1.0;
                        let mut e = EncodedFeature::levels(d, Some(0.0));
                        e.anchor = self.mixed_anchor(j)?;
                        e
                    }
                    _ => {
                        return Err(Error::BadValue {
                            feature: f.name.clone(),
                            reason: format!("value {v:?} does not fit the feature kind"),
                        })
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedPoint { features })
    }

    /// Reads an encoded point back to a normalized row.
    pub fn decode(&self, point: &EncodedPoint) -> Result<Vec<Value>> {
        if point.features.len() != self.features.len() {
            return Err(Error::Dimension {
                expected: self.features.len(),
                got: point.features.len(),
            });
        }
        self.features
            .iter()
            .zip(&point.features)
            .map(|(f, e)| {
                let cont = |e: &EncodedFeature| {
                    let x = e.c.clamp(e.lower, e.upper);
                    match f.kind {
                        FeatureKind::DiscreteContiguous { .. } => {
                            // land on the integer lattice of the raw scale
                            let z = f.denormalize_number(x).round();
                            f.normalize_number(z)
                        }
                        _ => x,
                    }
                };
                Ok(match &f.kind {
                    FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. } => Value::Real(cont(e)),
                    FeatureKind::Binary => Value::Level(usize::from(round_binary(&f.name, e.d[0])?)),
                    FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. } => {
                        Value::Level(one_hot_level(&f.name, &e.d, true)?.unwrap())
                    }
                    FeatureKind::Mixed { .. } => {
                        let on = round_binary(&f.name, e.d_cont.unwrap_or(0.0))?;
                        let lvl = one_hot_level(&f.name, &e.d, false)?;
                        match (on, lvl) {
                            (true, None) => Value::Real(cont(e)),
                            (false, Some(k)) => Value::Level(k),
                            _ => {
                                return Err(Error::BadValue {
                                    feature: f.name.clone(),
                                    reason: "mixed indicators do not sum to one".into(),
                                })
                            }
                        }
                    }
                })
            })
            .collect()
    }
}

fn check_feature(f: &FeatureSpec) -> Result<()> {
    let bad = |msg: String| Err(Error::Schema(format!("feature `{}`: {msg}", f.name)));
    match &f.kind {
        FeatureKind::Continuous { lb, ub } | FeatureKind::Mixed { lb, ub, .. } => {
            if !(lb.is_finite() && ub.is_finite() && lb < ub) {
                return bad(format!("needs finite lb < ub, got [{lb}, {ub}]"));
            }
        }
        FeatureKind::DiscreteContiguous { lb, ub } => {
            if lb >= ub {
                return bad(format!("needs lb < ub, got [{lb}, {ub}]"));
            }
        }
        _ => {}
    }
    match &f.kind {
        FeatureKind::Categorical { levels } | FeatureKind::Ordinal { levels } => {
            let distinct: HashSet<_> = levels.iter().collect();
            if levels.len() < 2 || distinct.len() != levels.len() {
                return bad("needs at least 2 distinct levels".into());
            }
        }
        FeatureKind::Mixed { levels, .. } => {
            let distinct: HashSet<_> = levels.iter().collect();
            if levels.is_empty() || distinct.len() != levels.len() {
                return bad("needs at least 1 distinct level".into());
            }
        }
        _ => {}
    }
    if f.monotone != Monotone::None
        && !matches!(
            f.kind,
            FeatureKind::Continuous { .. } | FeatureKind::Ordinal { .. } | FeatureKind::DiscreteContiguous { .. }
        )
    {
        return bad("monotonicity needs a continuous, ordinal or discrete contiguous kind".into());
    }
    let scale = f.scale();
    if !(scale.is_finite() && scale > 0.0) || !f.shift().is_finite() {
        return bad(format!("scale must be finite and positive, got {scale}"));
    }
    Ok(())
}

// Drops rounding noise from the raw round trip so values on a breakpoint stay on it.
fn snap(v: Value) -> Value {
    match v {
        Value::Real(x) => Value::Real((x * 1e9).round() / 1e9),
        other => other,
    }
}

fn normalize_value(f: &FeatureSpec, v: &RawValue, clip: bool) -> Result<Value> {
    let level = |levels: &[String], s: &str| {
        levels
            .iter()
            .position(|l| l == s)
            .map(Value::Level)
            .ok_or_else(|| Error::UnknownLevel {
                feature: f.name.clone(),
                level: s.to_string(),
            })
    };
    let number = |x: f64, lb: f64, ub: f64| -> Result<Value> {
        if !x.is_finite() {
            return Err(Error::BadValue {
                feature: f.name.clone(),
                reason: format!("non-finite value {x}"),
            });
        }
        let x = if x < lb || x > ub {
            if !clip {
                return Err(Error::OutOfBounds {
                    feature: f.name.clone(),
                    value: x.to_string(),
                    lb,
                    ub,
                });
            }
            log::warn!("feature `{}`: clipping {} to [{}, {}]", f.name, x, lb, ub);
            x.clamp(lb, ub)
        } else {
            x
        };
        Ok(Value::Real(f.normalize_number(x)))
    };
    match (&f.kind, v) {
        (FeatureKind::Continuous { lb, ub }, RawValue::Num(x)) => number(*x, *lb, *ub).map(snap),
        (FeatureKind::Mixed { lb, ub, .. }, RawValue::Num(x)) => number(*x, *lb, *ub).map(snap),
        (FeatureKind::DiscreteContiguous { lb, ub }, RawValue::Num(x)) => {
            if x.fract() != 0.0 {
                return Err(Error::BadValue {
                    feature: f.name.clone(),
                    reason: format!("{x} is not an integer"),
                });
            }
            number(*x, *lb as f64, *ub as f64)
        }
        (FeatureKind::Binary, RawValue::Num(x)) if *x == 0.0 || *x == 1.0 => Ok(Value::Level(*x as usize)),
        (FeatureKind::Binary, RawValue::Num(x)) => Err(Error::BadValue {
            feature: f.name.clone(),
            reason: format!("binary value must be 0 or 1, got {x}"),
        }),
        (
            FeatureKind::Categorical { levels } | FeatureKind::Ordinal { levels } | FeatureKind::Mixed { levels, .. },
            RawValue::Label(s),
        ) => level(levels, s),
        (_, v) => Err(Error::BadValue {
            feature: f.name.clone(),
            reason: format!("value {v} does not fit the feature kind"),
        }),
    }
}

fn round_binary(feature: &str, v: f64) -> Result<bool> {
    if !(-BINARY_TOL..=1.0 + BINARY_TOL).contains(&v) || !v.is_finite() {
        return Err(Error::BadValue {
            feature: feature.to_string(),
            reason: format!("indicator value {v} outside [0, 1]"),
        });
    }
    Ok(v >= 0.5)
}

/// Index of the single indicator rounding to 1. With `exactly_one`, none set is an error.
fn one_hot_level(feature: &str, d: &[f64], exactly_one: bool) -> Result<Option<usize>> {
    let sum: f64 = d.iter().sum();
    let ones: Vec<usize> = d.iter().enumerate().filter(|(_, &v)| v >= 0.5).map(|(i, _)| i).collect();
    let err = |msg: &str| Error::BadValue {
        feature: feature.to_string(),
        reason: format!("{msg} (indicator sum {sum})"),
    };
    match ones.as_slice() {
        [k] => {
            if (sum - 1.0).abs() > 0.5 {
                return Err(err("one-hot indicators do not sum to one"));
            }
            Ok(Some(*k))
        }
        [] if !exactly_one => Ok(None),
        [] => Err(err("no level indicator set")),
        _ => Err(err("several level indicators set")),
    }
}

/// A single raw CSV value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Num(f64),
    Label(String),
}

impl fmt::Display for RawValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawValue::Num(x) => write!(f, "{x}"),
            RawValue::Label(s) => f.write_str(s),
        }
    }
}

/// A normalized per-feature value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Real(f64),
    Level(usize),
}

impl Value {
    pub fn as_real(self) -> Option<f64> {
        match self {
            Value::Real(x) => Some(x),
            Value::Level(_) => None,
        }
    }

    pub fn as_level(self) -> Option<usize> {
        match self {
            Value::Level(k) => Some(k),
            Value::Real(_) => None,
        }
    }
}

/// `(F, L, U, c, l, u, d, d_cont)` image of one feature. Purely continuous
/// features have no indicators and an implicit `d_cont = 1`; purely
/// level-valued features have no `d_cont`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature {
    pub anchor: f64,
    pub lower: f64,
    pub upper: f64,
    pub c: f64,
    pub l: f64,
    pub u: f64,
    pub d: Vec<f64>,
    pub d_cont: Option<f64>,
}

impl EncodedFeature {
    fn continuous(x: f64, d: Vec<f64>, d_cont: Option<f64>) -> Self {
        EncodedFeature {
            anchor: x,
            lower: 0.0,
            upper: 1.0,
            c: x,
            l: 0.0,
            u: 0.0,
            d,
            d_cont,
        }
    }

    fn levels(d: Vec<f64>, d_cont: Option<f64>) -> Self {
        EncodedFeature {
            anchor: 0.0,
            lower: 0.0,
            upper: 1.0,
            c: 0.0,
            l: 0.0,
            u: 0.0,
            d,
            d_cont,
        }
    }

    /// Checks the mixed-polytope rows for this feature within `tol`.
    pub fn check(&self, kind: &FeatureKind, tol: f64) -> std::result::Result<(), String> {
        let on = match kind {
            FeatureKind::Continuous { .. } | FeatureKind::DiscreteContiguous { .. } => 1.0,
            FeatureKind::Mixed { .. } => self.d_cont.ok_or("mixed feature without d_cont")?,
            _ => 0.0,
        };
        match kind {
            FeatureKind::Categorical { .. } | FeatureKind::Ordinal { .. } => {
                let s: f64 = self.d.iter().sum();
                if (s - 1.0).abs() > tol || self.d_cont.is_some() {
                    return Err(format!("categorical one-hot sum {s}"));
                }
            }
            FeatureKind::Mixed { .. } => {
                let s: f64 = self.d.iter().sum::<f64>() + on;
                if (s - 1.0).abs() > tol {
                    return Err(format!("mixed indicator sum {s}"));
                }
            }
            _ => {}
        }
        if kind.has_continuous() {
            let c = self.anchor * on - self.l + self.u;
            if (c - self.c).abs() > tol {
                return Err(format!("c = {} but F*d_cont - l + u = {c}", self.c));
            }
            if self.l < -tol || self.l > (self.anchor - self.lower) * on + tol {
                return Err(format!("l = {} out of range", self.l));
            }
            if self.u < -tol || self.u > (self.upper - self.anchor) * on + tol {
                return Err(format!("u = {} out of range", self.u));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPoint {
    pub features: Vec<EncodedFeature>,
}

impl EncodedPoint {
    /// Flat encoded vector (`c_j` and `d_jk`, never `d_cont`).
    pub fn to_vector(&self, schema: &DatasetSchema) -> Vec<f64> {
        let mut out = vec![0.0; schema.encoded_width()];
        for (e, s) in self.features.iter().zip(schema.slots()) {
            if let Some(c) = s.cont {
                out[c] = e.c;
            }
            for (i, d) in s.levels.clone().zip(&e.d) {
                out[i] = *d;
            }
        }
        out
    }

    pub fn check(&self, schema: &DatasetSchema, tol: f64) -> std::result::Result<(), String> {
        for (f, e) in schema.features().iter().zip(&self.features) {
            e.check(&f.kind, tol).map_err(|m| format!("{}: {m}", f.name))?;
        }
        Ok(())
    }
}

/// Inverse-MAD weights, one per encoded dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadWeights {
    pub dims: Vec<f64>,
}

impl MadWeights {
    /// Weight `1 / MAD` per encoded dimension, `1.0` where the MAD is zero.
    /// The continuous part of a mixed feature uses only rows on its continuous branch.
    pub fn fit(schema: &DatasetSchema, rows: &[Vec<Value>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let vectors: Vec<Vec<f64>> = rows.iter().map(|r| schema.to_vector(r)).collect();
        let mut dims = vec![1.0; schema.encoded_width()];
        for (j, s) in schema.slots().iter().enumerate() {
            if let Some(c) = s.cont {
                let col: Vec<f64> = vectors
                    .iter()
                    .zip(rows)
                    .filter(|(_, r)| matches!(r[j], Value::Real(_)))
                    .map(|(v, _)| v[c])
                    .collect();
                dims[c] = inverse_mad(&col);
            }
            for i in s.levels.clone() {
                let col: Vec<f64> = vectors.iter().map(|v| v[i]).collect();
                dims[i] = inverse_mad(&col);
            }
        }
        Ok(MadWeights { dims })
    }

    pub fn uniform(schema: &DatasetSchema) -> Self {
        MadWeights {
            dims: vec![1.0; schema.encoded_width()],
        }
    }

    /// Weights of the continuous dimensions, in feature order.
    pub fn v_cont<'a>(&'a self, schema: &'a DatasetSchema) -> impl Iterator<Item = f64> + 'a {
        schema.slots().iter().filter_map(|s| s.cont.map(|c| self.dims[c]))
    }

    /// Weights of the indicator dimensions, in feature order.
    pub fn v_bin<'a>(&'a self, schema: &'a DatasetSchema) -> impl Iterator<Item = f64> + 'a {
        schema
            .slots()
            .iter()
            .flat_map(|s| s.levels.clone().map(|i| self.dims[i]))
    }

    /// Weighted L1 distance between two normalized rows. For a mixed feature
    /// the continuous part is measured from its anchor and only counts when
    /// the counterfactual is on the continuous branch.
    pub fn distance(&self, schema: &DatasetSchema, factual: &[Value], ce: &[Value]) -> Result<f64> {
        let a = schema.to_vector(factual);
        let b = schema.to_vector(ce);
        let mut total = 0.0;
        for (j, s) in schema.slots().iter().enumerate() {
            if let Some(c) = s.cont {
                let anchor = match factual[j] {
                    Value::Real(x) => x,
                    Value::Level(_) => schema.mixed_anchor(j)?,
                };
                if let Value::Real(x) = ce[j] {
                    total += self.dims[c] * (x - anchor).abs();
                }
            }
            for i in s.levels.clone() {
                total += self.dims[i] * (a[i] - b[i]).abs();
            }
        }
        Ok(total)
    }
}

fn inverse_mad(col: &[f64]) -> f64 {
    match stats::mad(col) {
        Some(m) if m > 0.0 => 1.0 / m,
        _ => 1.0,
    }
}

/// A labelled raw dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Vec<RawValue>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Reads a CSV whose header names the schema features and the target column.
    pub fn read_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file, schema)
    }

    pub fn from_reader<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let col_of = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("CSV has no column `{name}`")))
        };
        let cols: Vec<usize> = schema
            .features()
            .iter()
            .map(|f| col_of(&f.name))
            .collect::<Result<_>>()?;
        let target_col = col_of(&schema.target().name)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = cols
                .iter()
                .enumerate()
                .map(|(j, &c)| schema.parse_raw(j, rec.get(c).unwrap_or("")))
                .collect::<Result<Vec<_>>>()?;
            let label_cell = rec.get(target_col).unwrap_or("").trim();
            let label: usize = label_cell.parse().map_err(|_| Error::BadValue {
                feature: schema.target().name.clone(),
                reason: format!("`{label_cell}` is not a class index"),
            })?;
            if label >= schema.num_classes() {
                return Err(Error::BadValue {
                    feature: schema.target().name.clone(),
                    reason: format!("class {label} out of range"),
                });
            }
            rows.push(row);
            labels.push(label);
        }
        Ok(Dataset { rows, labels })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W, schema: &DatasetSchema) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = schema.features().iter().map(|f| f.name.as_str()).collect();
        header.push(&schema.target().name);
        w.write_record(&header)?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Normalizes every row; with `clip`, out-of-range numbers are clipped.
    pub fn normalize(&self, schema: &DatasetSchema, clip: bool) -> Result<Vec<Vec<Value>>> {
        self.rows
            .iter()
            .map(|r| {
                if clip {
                    schema.normalize_row_clipped(r)
                } else {
                    schema.normalize_row(r)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> Target {
        Target {
            name: "y".into(),
            kind: TargetKind::Binary,
        }
    }

    fn abc() -> Vec<String> {
        vec!["A".into(), "B".into(), "C".into()]
    }

    fn schema() -> DatasetSchema {
        DatasetSchema::new(
            vec![
                FeatureSpec::new("income", FeatureKind::Continuous { lb: 0.0, ub: 50000.0 }),
                FeatureSpec::new("grade", FeatureKind::Categorical { levels: abc() }),
                FeatureSpec::new("kids", FeatureKind::DiscreteContiguous { lb: 0, ub: 9 }),
                FeatureSpec::new("flag", FeatureKind::Binary),
                FeatureSpec::new(
                    "hours",
                    FeatureKind::Mixed {
                        lb: 0.0,
                        ub: 10.0,
                        levels: vec!["none".into()],
                        median: Some(4.0),
                    },
                ),
            ],
            target(),
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn normalize_examples() {
        let s = schema();
        let row = vec![
            RawValue::Num(25000.0),
            RawValue::Label("B".into()),
            RawValue::Num(3.0),
            RawValue::Num(1.0),
            RawValue::Num(5.0),
        ];
        let v = s.normalize(&row).unwrap();
        assert_eq!(v[0], 0.5);
        assert_eq!(&v[1..4], &[0.0, 1.0, 0.0]);
        assert!((v[4] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v[5], 1.0);
        assert_eq!(v[6], 0.5);
        assert_eq!(v[7], 0.0);
        assert_eq!(s.encoded_width(), 8);
    }

    #[test]
    fn normalize_errors() {
        let s = schema();
        let mut row = vec![
            RawValue::Num(60000.0),
            RawValue::Label("B".into()),
            RawValue::Num(3.0),
            RawValue::Num(1.0),
            RawValue::Num(5.0),
        ];
        assert!(matches!(s.normalize_row(&row), Err(Error::OutOfBounds { .. })));
        let clipped = s.normalize_row_clipped(&row).unwrap();
        assert_eq!(clipped[0], Value::Real(1.0));
        row[0] = RawValue::Num(1.0);
        row[1] = RawValue::Label("Z".into());
        assert!(matches!(s.normalize_row(&row), Err(Error::UnknownLevel { .. })));
    }

    #[test]
    fn schema_validation() {
        let bad = DatasetSchema::new(
            vec![FeatureSpec::new("x", FeatureKind::Continuous { lb: 1.0, ub: 1.0 })],
            target(),
            vec![],
        );
        assert!(bad.is_err());
        let dup = DatasetSchema::new(
            vec![FeatureSpec::new("x", FeatureKind::Binary), FeatureSpec::new("x", FeatureKind::Binary)],
            target(),
            vec![],
        );
        assert!(dup.is_err());
        let mono_cat = DatasetSchema::new(
            vec![FeatureSpec::new("c", FeatureKind::Categorical { levels: abc() }).monotone(Monotone::NonDecreasing)],
            target(),
            vec![],
        );
        assert!(mono_cat.is_err());
        let rule = CausalRule {
            cause_feature: "c".into(),
            cause_direction: Direction::Increase,
            effect_feature: "x".into(),
            effect_direction: Direction::Increase,
        };
        let cat_rule = DatasetSchema::new(
            vec![
                FeatureSpec::new("c", FeatureKind::Categorical { levels: abc() }),
                FeatureSpec::new("x", FeatureKind::Binary),
            ],
            target(),
            vec![rule],
        );
        assert!(cat_rule.is_err());
    }

    #[test]
    fn json_roundtrip_keeps_layout() {
        let s = schema();
        let text = s.to_json().unwrap();
        let back: DatasetSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn mad_examples() {
        let s = DatasetSchema::new(
            vec![
                FeatureSpec::new("a", FeatureKind::Continuous { lb: 0.0, ub: 1.0 }),
                FeatureSpec::new("b", FeatureKind::Continuous { lb: 0.0, ub: 1.0 }),
            ],
            target(),
            vec![],
        )
        .unwrap();
        let rows: Vec<Vec<Value>> = [0.0, 0.2, 0.4, 0.6, 0.8]
            .iter()
            .map(|&x| vec![Value::Real(x), Value::Real(0.0)])
            .collect();
        let w = MadWeights::fit(&s, &rows).unwrap();
        assert!((w.dims[0] - 5.0).abs() < 1e-9);
        assert_eq!(w.dims[1], 1.0);
        let single = MadWeights::fit(&s, &rows[..1]).unwrap();
        assert_eq!(single.dims, vec![1.0, 1.0]);
        assert!(matches!(MadWeights::fit(&s, &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn encode_examples() {
        let s = schema();
        let row = vec![
            Value::Real(0.3),
            Value::Level(1),
            Value::Real(1.0 / 3.0),
            Value::Level(0),
            Value::Level(0),
        ];
        let p = s.encode(&row).unwrap();
        assert_eq!(p.features[0].anchor, 0.3);
        assert_eq!(p.features[0].c, 0.3);
        assert!(p.features[0].d.is_empty() && p.features[0].d_cont.is_none());
        assert_eq!(p.features[1].d, vec![0.0, 1.0, 0.0]);
        assert!(p.features[1].d_cont.is_none());
        // mixed feature on a level: anchor is the normalized median 4/10
        assert_eq!(p.features[4].d_cont, Some(0.0));
        assert_eq!(p.features[4].d, vec![1.0]);
        assert!((p.features[4].anchor - 0.4).abs() < 1e-15);
        p.check(&s, 1e-12).unwrap();
        assert_eq!(s.decode(&p).unwrap(), row);
    }

    #[test]
    fn mixed_median_from_data() {
        let mut s = schema();
        let rows: Vec<Vec<RawValue>> = [1.0, 7.0, 3.0]
            .iter()
            .map(|&h| {
                vec![
                    RawValue::Num(0.0),
                    RawValue::Label("A".into()),
                    RawValue::Num(0.0),
                    RawValue::Num(0.0),
                    RawValue::Num(h),
                ]
            })
            .chain(std::iter::once(vec![
                RawValue::Num(0.0),
                RawValue::Label("A".into()),
                RawValue::Num(0.0),
                RawValue::Num(0.0),
                RawValue::Label("none".into()),
            ]))
            .collect();
        s.fit_mixed_medians(&rows).unwrap();
        assert!((s.mixed_anchor(4).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn decode_rounding_and_errors() {
        let s = DatasetSchema::new(
            vec![FeatureSpec::new(
                "c",
                FeatureKind::Categorical {
                    levels: vec!["x".into(), "y".into()],
                },
            )],
            target(),
            vec![],
        )
        .unwrap();
        let mut p = s.encode(&[Value::Level(1)]).unwrap();
        p.features[0].d = vec![0.9999, 0.0001];
        assert_eq!(s.decode(&p).unwrap(), vec![Value::Level(0)]);
        p.features[0].d = vec![0.9, 0.8];
        assert!(s.decode(&p).is_err());
        p.features[0].d = vec![0.1, 0.2];
        assert!(s.decode(&p).is_err());
    }

    #[test]
    fn denormalize_inverse() {
        let s = schema();
        let raw = s.denormalize_row(&[Value::Real(0.5), Value::Level(2), Value::Real(1.0 / 3.0), Value::Level(1), Value::Level(0)]).unwrap();
        assert_eq!(raw[0], RawValue::Num(25000.0));
        assert_eq!(raw[1], RawValue::Label("C".into()));
        assert_eq!(raw[2], RawValue::Num(3.0));
        assert_eq!(raw[4], RawValue::Label("none".into()));
    }

    #[test]
    fn distance_counts_levels_twice_and_mixed_anchor() {
        let s = schema();
        let w = MadWeights::uniform(&s);
        let f = vec![Value::Real(0.5), Value::Level(0), Value::Real(0.0), Value::Level(0), Value::Level(0)];
        let mut ce = f.clone();
        ce[1] = Value::Level(2);
        assert!((w.distance(&s, &f, &ce).unwrap() - 2.0).abs() < 1e-12);
        // mixed: level -> continuous 0.9 costs |0.9 - 0.4| plus one indicator
        let mut ce = f.clone();
        ce[4] = Value::Real(0.9);
        assert!((w.distance(&s, &f, &ce).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn csv_roundtrip() {
        let s = schema();
        let text = "income,grade,kids,flag,hours,y\n100,A,2,0,none,1\n2000.5,C,9,1,3.5,0\n";
        let d = Dataset::from_reader(text.as_bytes(), &s).unwrap();
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.rows[0][4], RawValue::Label("none".into()));
        let mut out = Vec::new();
        d.write_csv(&mut out, &s).unwrap();
        let back = Dataset::from_reader(out.as_slice(), &s).unwrap();
        assert_eq!(back, d);
    }
}
