use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub values: Vec<f64>,
}

/// Flat parameter vector split into ordered, named segments.
///
/// The DRS iterates `u`, `x`, `y` are all `ParamVector`s sharing one layout;
/// every binary operation checks that layouts agree segment by segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Vec<f64>)>) -> Self {
        Self {
            segments: segments
                .into_iter()
                .map(|(name, values)| Segment { name, values })
                .collect(),
        }
    }

    /// Single anonymous segment; handy for toy problems.
    pub fn flat(values: Vec<f64>) -> Self {
        Self::new(vec![("p".to_string(), values)])
    }

    pub fn encoder_decoder(encoder: Vec<f64>, decoder: Vec<f64>) -> Self {
        Self::new(vec![(ENCODER.into(), encoder), (DECODER.into(), decoder)])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_dim(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.values.as_slice())
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.segments
            .iter_mut()
            .find(|s| s.name == name)
            .map(|s| &mut s.values)
    }

    /// Copy of this vector with all entries zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    values: vec![0.0; s.values.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.segments.iter().flat_map(|s| s.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.segments.iter_mut().flat_map(|s| s.values.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// Entry at a global (cross-segment) index.
    pub fn get(&self, mut i: usize) -> Option<f64> {
        for s in &self.segments {
            if i < s.values.len() {
                return Some(s.values[i]);
            }
            i -= s.values.len();
        }
        None
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for s in &mut self.segments {
            if i < s.values.len() {
                s.values[i] = v;
                return;
            }
            i -= s.values.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn check_aligned(&self, other: &ParamVector) -> Result<()> {
        if self.segments.len() != other.segments.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} segments vs {}",
                self.segments.len(),
                other.segments.len()
            )));
        }
        for (a, b) in self.segments.iter().zip(&other.segments) {
            if a.name != b.name || a.values.len() != b.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "segment {}[{}] vs {}[{}]",
                    a.name,
                    a.values.len(),
                    b.name,
                    b.values.len()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise combination `f(self_i, other_i)` with layout checking.
    pub fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_aligned(other)?;
        Ok(Self {
            segments: self
                .segments
                .iter()
                .zip(&other.segments)
                .map(|(a, b)| Segment {
                    name: a.name.clone(),
                    values: a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
                })
                .collect(),
        })
    }

    pub fn add(&self, other: &ParamVector) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ParamVector) -> Result<Self> {
        self.zip_with(other, |a, b| a + c * b)
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Squared Euclidean distance `sum_i (a_i - b_i)^2` across all segments.
pub fn param_distance_sq(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    a.check_aligned(b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
}
