use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};

/// Batch of class scores, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Array2<f64>);

impl Logits {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::invalid("logits must have at least one sample and one class"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits contain non-finite entries"));
        }
        Ok(Logits(values))
    }

    /// A single sample.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let k = values.len();
        Self::new(Array2::from_shape_vec((1, k), values).expect("1 x k"))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Temperature-softened class distribution per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrediction {
    probs: Array2<f64>,
    temperature: f64,
}

impl SoftPrediction {
    /// Wraps explicit probabilities; each row must be a distribution.
    pub fn new(probs: Array2<f64>, temperature: f64) -> Result<Self> {
        for row in probs.axis_iter(Axis(0)) {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
                return Err(Error::invalid("probabilities must lie in [0, 1]"));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
            }
        }
        Ok(SoftPrediction { probs, temperature })
    }

    pub fn from_vec(probs: Vec<f64>, temperature: f64) -> Result<Self> {
        let k = probs.len();
        Self::new(Array2::from_shape_vec((1, k), probs).expect("1 x k"), temperature)
    }

    pub(crate) fn from_raw(probs: Array2<f64>, temperature: f64) -> Self {
        SoftPrediction { probs, temperature }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Shannon entropy (nats) of each sample's distribution.
    pub fn entropy(&self) -> Array1<f64> {
        self.probs.map_axis(Axis(1), |row| {
            -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
        })
    }
}

/// Batched tensor that loss terms treat as one flat vector per sample.
pub trait SampleMap: Clone {
    fn shape(&self) -> &[usize];
    fn flat(&self) -> &[f64];
    /// Same shape, new contents.
    fn with_flat(&self, data: Vec<f64>) -> Self;

    fn batch(&self) -> usize {
        self.shape()[0]
    }

    fn sample_len(&self) -> usize {
        self.shape()[1..].iter().product()
    }

    fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.flat()[b * n..(b + 1) * n]
    }
}

/// (batch, channels, height, width) activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Array4<f64>);

impl FeatureMap {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("feature map has an empty axis: {:?}", data.shape())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite entries"));
        }
        Ok(FeatureMap(data.as_standard_layout().into_owned()))
    }

    pub fn from_shape_vec(shape: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let a = Array4::from_shape_vec(shape, data).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(a)
    }

    pub(crate) fn from_raw(data: Array4<f64>) -> Self {
        FeatureMap(data.as_standard_layout().into_owned())
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2], s[3])
    }
}

impl SampleMap for FeatureMap {
    fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    fn flat(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    fn with_flat(&self, data: Vec<f64>) -> Self {
        FeatureMap(Array4::from_shape_vec(self.0.raw_dim(), data).expect("same shape"))
    }
}

/// (batch, height, width) nonnegative spatial attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Array3<f64>);

impl AttentionMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("attention map has an empty axis: {:?}", data.shape())));
        }
        if data.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("attention entries must be finite and nonnegative"));
        }
        Ok(AttentionMap(data.as_standard_layout().into_owned()))
    }

    pub fn from_shape_vec(shape: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let a = Array3::from_shape_vec(shape, data).map_err(|e| Error::invalid(e.to_string()))?;
        Self::new(a)
    }

    pub(crate) fn from_raw(data: Array3<f64>) -> Self {
        AttentionMap(data.as_standard_layout().into_owned())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }
}

impl SampleMap for AttentionMap {
    fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    fn flat(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    fn with_flat(&self, data: Vec<f64>) -> Self {
        AttentionMap(Array3::from_shape_vec(self.0.raw_dim(), data).expect("same shape"))
    }
}

/// One weighted entry of a [`LossValue`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    pub value: f64,
}

/// A scalar objective together with its weighted breakdown.
///
/// `scalar` is always `sum(weight * value)` over the components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    scalar: f64,
    components: Vec<LossTerm>,
}

impl LossValue {
    pub fn single(name: impl Into<String>, value: f64) -> Self {
        LossValue {
            scalar: value,
            components: vec![LossTerm {
                name: name.into(),
                weight: 1.0,
                value,
            }],
        }
    }

    pub fn from_terms(components: Vec<LossTerm>) -> Self {
        let scalar = components.iter().map(|t| t.weight * t.value).sum();
        LossValue { scalar, components }
    }

    /// Flattens weighted sub-losses; component names get `prefix.` unless the
    /// prefix is empty.
    pub fn combine(parts: &[(&str, f64, &LossValue)]) -> Self {
        let mut terms = Vec::new();
        for (prefix, weight, part) in parts {
            for t in &part.components {
                let name = if prefix.is_empty() {
                    t.name.clone()
                } else {
                    format!("{prefix}.{}", t.name)
                };
                terms.push(LossTerm {
                    name,
                    weight: weight * t.weight,
                    value: t.value,
                });
            }
        }
        Self::from_terms(terms)
    }

    pub fn scalar(&self) -> f64 {
        self.scalar
    }

    pub fn components(&self) -> &[LossTerm] {
        &self.components
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.scalar.is_finite()
    }
}
