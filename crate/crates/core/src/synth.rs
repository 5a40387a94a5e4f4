//! Seeded synthetic credit data.
//!
//! Rows come from a small latent-factor model: a standard normal "wealth"
//! factor drives income, savings, debt and education, and age shifts income
//! and education upward. Labels are the decisions of a fixed random ReLU
//! network whose output bias is shifted so that half the rows are approved.
//! Continuous values are rounded to a 1/1000 grid of their range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    CausalRule, Dataset, DatasetSchema, Direction, FeatureKind, FeatureSpec, Monotone, RawValue, Target,
    TargetKind, Value,
};
use crate::error::{Error, Result};
use crate::nn::{Layer, Mlp};
use crate::stats::median;

pub const EMPLOYMENT: [&str; 3] = ["employed", "self_employed", "unemployed"];
pub const EDUCATION: [&str; 4] = ["basic", "secondary", "bachelor", "master"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub rows: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rows: 1000,
            hidden: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCredit {
    pub schema: DatasetSchema,
    pub data: Dataset,
    pub mlp: Mlp,
}

/// Schema of the synthetic credit table.
pub fn credit_schema() -> DatasetSchema {
    let levels = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    DatasetSchema::new(
        vec![
            FeatureSpec::new("age", FeatureKind::DiscreteContiguous { lb: 18, ub: 70 }).monotone(Monotone::NonDecreasing),
            FeatureSpec::new("income", FeatureKind::Continuous { lb: 0.0, ub: 150_000.0 }),
            FeatureSpec::new("savings", FeatureKind::Continuous { lb: 0.0, ub: 50_000.0 }),
            FeatureSpec::new("debt_ratio", FeatureKind::Continuous { lb: 0.0, ub: 1.0 }),
            FeatureSpec::new("employment", FeatureKind::Categorical { levels: levels(&EMPLOYMENT) }),
            FeatureSpec::new("education", FeatureKind::Ordinal { levels: levels(&EDUCATION) }),
            FeatureSpec::new("foreign_worker", FeatureKind::Binary).immutable(),
        ],
        Target {
            name: "approved".into(),
            kind: TargetKind::Binary,
        },
        vec![CausalRule {
            cause_feature: "education".into(),
            cause_direction: Direction::Increase,
            effect_feature: "age".into(),
            effect_direction: Direction::Increase,
        }],
    )
    .expect("built-in schema is valid")
}

fn quantize(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 1000.0).round() / 1000.0
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn sample_row(rng: &mut ChaCha8Rng) -> Vec<Value> {
    let wealth = normal(rng);
    let age_u: f64 = rng.gen();
    let age = (age_u * 52.0).round() as usize; // 0..=52 over 18..=70
    let edu_score = 0.8 * wealth + 0.6 * age_u + 0.5 * normal(rng);
    let education = match edu_score {
        s if s < -0.3 => 0,
        s if s < 0.5 => 1,
        s if s < 1.2 => 2,
        _ => 3,
    };
    let employment = {
        let u: f64 = rng.gen();
        let p_unemp = 0.15 - 0.05 * wealth.clamp(-1.0, 1.0);
        if u < p_unemp {
            2
        } else if u < p_unemp + 0.2 {
            1
        } else {
            0
        }
    };
    let income = 0.3 + 0.12 * wealth + 0.05 * education as f64 + 0.1 * age_u + 0.06 * normal(rng)
        - if employment == 2 { 0.2 } else { 0.0 };
    let savings = 0.25 + 0.15 * wealth + 0.1 * age_u + 0.08 * normal(rng);
    let debt_ratio = 0.4 - 0.1 * wealth + 0.12 * normal(rng);
    let foreign = usize::from(rng.gen_bool(0.2));
    vec![
        Value::Real(age as f64 / 52.0),
        Value::Real(quantize(income)),
        Value::Real(quantize(savings)),
        Value::Real(quantize(debt_ratio)),
        Value::Level(employment),
        Value::Level(education),
        Value::Level(foreign),
    ]
}

/// Generates `cfg.rows` rows, the labelling network and the schema.
pub fn synth_credit(cfg: &SynthConfig) -> Result<SynthCredit> {
    if cfg.rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let schema = credit_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows: Vec<Vec<Value>> = (0..cfg.rows).map(|_| sample_row(&mut rng)).collect();
    let width = schema.encoded_width();
    let base = Mlp::random(&[width, cfg.hidden.max(1), 1], 2, cfg.seed.wrapping_add(0x5eed))?;
    let xs: Vec<Vec<f64>> = rows.iter().map(|r| schema.to_vector(r)).collect();
    let scores: Vec<f64> = xs
        .iter()
        .map(|x| base.forward_raw(x).map(|h| h[0]))
        .collect::<Result<_>>()?;
    let shift = median(&scores).unwrap_or(0.0);
    let mut layers: Vec<Layer> = base.layers().to_vec();
    let last = layers.last_mut().expect("network has layers");
    last.bias[0] -= shift;
    let mlp = Mlp::new(layers, 2)?.with_fingerprint(schema.fingerprint());
    let labels = xs.iter().map(|x| mlp.classify(x)).collect::<Result<Vec<_>>>()?;
    let raw = rows
        .iter()
        .map(|r| schema.denormalize_row(r))
        .collect::<Result<Vec<Vec<RawValue>>>>()?;
    Ok(SynthCredit {
        schema,
        data: Dataset { rows: raw, labels },
        mlp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig {
            rows: 400,
            ..Default::default()
        };
        let a = synth_credit(&cfg).unwrap();
        let b = synth_credit(&cfg).unwrap();
        assert_eq!(a.data, b.data);
        let ones = a.data.labels.iter().filter(|&&l| l == 1).count();
        assert!((150..=250).contains(&ones), "{ones}");
    }

    #[test]
    fn rows_round_trip_through_schema() {
        let s = synth_credit(&SynthConfig {
            rows: 50,
            ..Default::default()
        })
        .unwrap();
        let norm = s.data.normalize(&s.schema, false).unwrap();
        for r in &norm {
            for v in r {
                if let Value::Real(x) = v {
                    assert!((0.0..=1.0).contains(x));
                }
            }
        }
        let mut buf = Vec::new();
        s.data.write_csv(&mut buf, &s.schema).unwrap();
        let back = Dataset::from_reader(buf.as_slice(), &s.schema).unwrap();
        assert_eq!(back.labels, s.data.labels);
    }
}
