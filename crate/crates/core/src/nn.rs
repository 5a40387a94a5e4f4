//! Feed-forward ReLU classifier: exact forward pass, interval bounds and JSON IO.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out][in]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }
}

/// ReLU on hidden layers, raw scores at the output (one score for binary targets).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    num_classes: usize,
    fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    format_version: u32,
    activation: String,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    layers: Vec<Layer>,
}

/// Pre-activation interval of every hidden unit, `[layer][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    /// Bounds of the raw output scores.
    pub output_lower: Vec<f64>,
    pub output_upper: Vec<f64>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::Network(m));
        if layers.is_empty() {
            return bad("network has no layers".into());
        }
        if num_classes < 2 {
            return bad("need at least two classes".into());
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.bias.len() || l.bias.is_empty() {
                return bad(format!("layer {i}: {} weight rows for {} biases", l.weights.len(), l.bias.len()));
            }
            let w = l.in_dim();
            if w == 0 || l.weights.iter().any(|r| r.len() != w) {
                return bad(format!("layer {i}: ragged or empty weight rows"));
            }
            if i > 0 && layers[i - 1].out_dim() != w {
                return bad(format!("layer {i} expects {w} inputs, previous layer gives {}", layers[i - 1].out_dim()));
            }
            if l.weights.iter().flatten().chain(&l.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {i}: non-finite parameter"));
            }
        }
        let out = layers.last().unwrap().out_dim();
        let expect = if num_classes == 2 { 1 } else { num_classes };
        if out != expect {
            return bad(format!("{num_classes} classes need {expect} output scores, network has {out}"));
        }
        Ok(Mlp {
            layers,
            num_classes,
            fingerprint: None,
        })
    }

    pub fn with_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.fingerprint = Some(fp.into());
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn fingerprint(&self) -> Option<&str> {
        self.fingerprint.as_deref()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Random network with Gaussian-ish weights scaled by fan-in.
    pub fn random(dims: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let scale = (2.0 / w[0] as f64).sqrt();
                Layer {
                    weights: (0..w[1])
                        .map(|_| (0..w[0]).map(|_| normal(&mut rng) * scale).collect())
                        .collect(),
                    bias: (0..w[1]).map(|_| normal(&mut rng) * 0.1).collect(),
                }
            })
            .collect();
        Mlp::new(layers, num_classes)
    }

    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.affine(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Binary: `1{h >= 0}`; multiclass: first argmax.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        let h = self.forward_raw(x)?;
        Ok(if h.len() == 1 {
            usize::from(h[0] >= 0.0)
        } else {
            argmax(&h)
        })
    }

    /// Margin of `class` over the strongest competitor, in raw-score units.
    /// Binary: `h` for class 1 and `-h` for class 0.
    pub fn margin(&self, x: &[f64], class: usize) -> Result<f64> {
        let h = self.forward_raw(x)?;
        Ok(class_margin(&h, class))
    }

    /// Interval propagation over `[lo_i, hi_i]` input boxes.
    pub fn interval_bounds(&self, lo: &[f64], hi: &[f64]) -> Result<ActivationBounds> {
        if lo.len() != self.input_dim() || hi.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: lo.len().min(hi.len()),
            });
        }
        let (mut a, mut b) = (lo.to_vec(), hi.to_vec());
        let mut bounds = ActivationBounds {
            lower: Vec::new(),
            upper: Vec::new(),
            output_lower: Vec::new(),
            output_upper: Vec::new(),
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (mut pl, mut pu) = (Vec::new(), Vec::new());
            for (w, bias) in l.weights.iter().zip(&l.bias) {
                let (mut s_lo, mut s_hi) = (*bias, *bias);
                for ((wk, ak), bk) in w.iter().zip(&a).zip(&b) {
                    if *wk >= 0.0 {
                        s_lo += wk * ak;
                        s_hi += wk * bk;
                    } else {
                        s_lo += wk * bk;
                        s_hi += wk * ak;
                    }
                }
                pl.push(s_lo);
                pu.push(s_hi);
            }
            if i < last {
                a = pl.iter().map(|v| v.max(0.0)).collect();
                b = pu.iter().map(|v| v.max(0.0)).collect();
                bounds.lower.push(pl);
                bounds.upper.push(pu);
            } else {
                bounds.output_lower = pl;
                bounds.output_upper = pu;
            }
        }
        Ok(bounds)
    }

    pub fn interval_bounds_unit(&self) -> Result<ActivationBounds> {
        let n = self.input_dim();
        self.interval_bounds(&vec![0.0; n], &vec![1.0; n])
    }

    /// Rejects the network if it carries a fingerprint different from `expected`.
    /// A network without a fingerprint is accepted with a warning.
    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        match &self.fingerprint {
            Some(f) if f == expected => Ok(()),
            Some(f) => Err(Error::Fingerprint {
                expected: expected.to_string(),
                found: f.clone(),
            }),
            None => {
                log::warn!("network file has no schema fingerprint; assuming it matches");
                Ok(())
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MlpFile {
            format_version: FORMAT_VERSION,
            activation: "relu".into(),
            num_classes: self.num_classes,
            fingerprint: self.fingerprint.clone(),
            layers: self.layers.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MlpFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Network(format!("unsupported format version {}", file.format_version)));
        }
        if file.activation != "relu" {
            return Err(Error::Network(format!("unsupported activation `{}`", file.activation)));
        }
        let mut m = Mlp::new(file.layers, file.num_classes)?;
        m.fingerprint = file.fingerprint;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn argmax(h: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in h.iter().enumerate() {
        if *v > h[best] {
            best = i;
        }
    }
    best
}

pub fn class_margin(h: &[f64], class: usize) -> f64 {
    if h.len() == 1 {
        return if class == 1 { h[0] } else { -h[0] };
    }
    let other = h
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != class)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    h[class] - other
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
