//! Evaluable functions with a known (or estimated) `L2` norm.
//!
//! Analytic norms assume the design the toolkit generates: a centred
//! isotropic random vector, for which `‖⟨t,·⟩ + b‖₂² = ‖t‖² + b²`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::{sample_isotropic, ScalarLaw};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::rng::Seed;

pub type EvalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `L2(μ)` norm of a handle; `stderr` is `None` when the value is exact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Norm {
    pub value: f64,
    pub stderr: Option<f64>,
}

impl L2Norm {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: None }
    }
}

#[derive(Clone)]
pub enum Descriptor {
    /// `x ↦ ⟨w, x⟩ + b`
    Affine { weights: Vec<f64>, intercept: f64 },
    /// `x ↦ clamp(⟨w, x⟩ + b, -bound, bound)`
    Clipped {
        weights: Vec<f64>,
        intercept: f64,
        bound: f64,
    },
    /// Member of a user-supplied dictionary, identified by name.
    Dictionary { name: String, dim: usize, eval: EvalFn },
    /// `Σ cᵢ hᵢ`
    Combination(Vec<(f64, FunctionHandle)>),
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Descriptor::Affine { weights, intercept } => f
                .debug_struct("Affine")
                .field("weights", weights)
                .field("intercept", intercept)
                .finish(),
            Descriptor::Clipped {
                weights,
                intercept,
                bound,
            } => f
                .debug_struct("Clipped")
                .field("weights", weights)
                .field("intercept", intercept)
                .field("bound", bound)
                .finish(),
            Descriptor::Dictionary { name, dim, .. } => f
                .debug_struct("Dictionary")
                .field("name", name)
                .field("dim", dim)
                .finish(),
            Descriptor::Combination(terms) => f.debug_tuple("Combination").field(terms).finish(),
        }
    }
}

impl PartialEq for Descriptor {
    fn eq(&self, other: &Self) -> bool {
        use Descriptor::*;
        match (self, other) {
            (
                Affine {
                    weights: a,
                    intercept: b,
                },
                Affine {
                    weights: c,
                    intercept: d,
                },
            ) => a == c && b == d,
            (
                Clipped {
                    weights: a,
                    intercept: b,
                    bound: e,
                },
                Clipped {
                    weights: c,
                    intercept: d,
                    bound: f,
                },
            ) => a == c && b == d && e == f,
            (Dictionary { name: a, dim: x, .. }, Dictionary { name: b, dim: y, .. }) => a == b && x == y,
            (Combination(a), Combination(b)) => {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|((c, h), (e, g))| c == e && h.descriptor == g.descriptor)
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FunctionHandle {
    pub id: usize,
    pub descriptor: Descriptor,
    pub l2: L2Norm,
}

impl FunctionHandle {
    pub fn linear(id: usize, weights: Vec<f64>) -> Self {
        Self::affine(id, weights, 0.0)
    }

    pub fn affine(id: usize, weights: Vec<f64>, intercept: f64) -> Self {
        let l2 = (dot(&weights, &weights) + intercept * intercept).sqrt();
        Self {
            id,
            descriptor: Descriptor::Affine { weights, intercept },
            l2: L2Norm::exact(l2),
        }
    }

    pub fn constant(id: usize, dim: usize, value: f64) -> Self {
        Self::affine(id, vec![0.0; dim], value)
    }

    /// Clipped affine function. Its norm has no closed form; pass an
    /// estimate or call [`FunctionHandle::with_estimated_norm`].
    pub fn clipped(id: usize, weights: Vec<f64>, intercept: f64, bound: f64, l2: L2Norm) -> Self {
        Self {
            id,
            descriptor: Descriptor::Clipped {
                weights,
                intercept,
                bound,
            },
            l2,
        }
    }

    pub fn dictionary(
        id: usize,
        name: impl Into<String>,
        dim: usize,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        l2: L2Norm,
    ) -> Self {
        Self {
            id,
            descriptor: Descriptor::Dictionary {
                name: name.into(),
                dim,
                eval: Arc::new(eval),
            },
            l2,
        }
    }

    /// `Σ cᵢ hᵢ`. Collapses to an affine handle (with exact norm) when all
    /// terms are affine; otherwise the norm is left at NaN until estimated.
    pub fn combination(id: usize, terms: Vec<(f64, FunctionHandle)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Input("empty combination".into()));
        }
        let dim = terms[0].1.dim();
        if terms.iter().any(|(_, h)| h.dim() != dim) {
            return Err(Error::Shape("combination of handles of different dimension".into()));
        }
        if terms.iter().all(|(_, h)| h.is_affine()) {
            let d = dim.unwrap_or(0);
            let mut w = vec![0.0; d];
            let mut b = 0.0;
            for (c, h) in &terms {
                let (hw, hb) = h.affine_parts().expect("affine");
                for (wi, hi) in w.iter_mut().zip(hw) {
                    *wi += c * hi;
                }
                b += c * hb;
            }
            return Ok(Self::affine(id, w, b));
        }
        Ok(Self {
            id,
            descriptor: Descriptor::Combination(terms),
            l2: L2Norm {
                value: f64::NAN,
                stderr: None,
            },
        })
    }

    /// `center + λ (self - center)`, i.e. `λ·self + (1-λ)·center`.
    pub fn toward(&self, id: usize, center: &FunctionHandle, lambda: f64) -> Result<Self> {
        if let (Some((w, b)), Some((cw, cb))) = (self.affine_parts(), center.affine_parts()) {
            if w.len() != cw.len() {
                return Err(Error::Shape("segment between handles of different dimension".into()));
            }
            let weights = cw.iter().zip(w).map(|(c, h)| c + lambda * (h - c)).collect();
            return Ok(Self::affine(id, weights, cb + lambda * (b - cb)));
        }
        if self.descriptor == center.descriptor {
            return Ok(Self { id, ..center.clone() });
        }
        Self::combination(id, vec![(lambda, self.clone()), (1.0 - lambda, center.clone())])
    }

    /// `self - other`
    pub fn minus(&self, id: usize, other: &FunctionHandle) -> Result<Self> {
        Self::combination(id, vec![(1.0, self.clone()), (-1.0, other.clone())])
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn with_norm(mut self, l2: L2Norm) -> Self {
        self.l2 = l2;
        self
    }

    /// Replaces the norm by a Monte Carlo estimate under an isotropic design.
    pub fn with_estimated_norm(mut self, law: ScalarLaw, mc_size: usize, seed: Seed) -> Result<Self> {
        let d = self
            .dim()
            .ok_or_else(|| Error::Input("handle without a dimension".into()))?;
        let x = sample_isotropic(law, d, mc_size, seed)?;
        let sq: Vec<f64> = self.eval_rows(&x).into_iter().map(|v| v * v).collect();
        let n = sq.len() as f64;
        let mean = sq.iter().sum::<f64>() / n;
        let var = sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let value = mean.sqrt();
        // delta method for the square root
        let stderr = if value > 0.0 {
            (var / n).sqrt() / (2.0 * value)
        } else {
            0.0
        };
        self.l2 = L2Norm {
            value,
            stderr: Some(stderr),
        };
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2.value
    }

    pub fn dim(&self) -> Option<usize> {
        match &self.descriptor {
            Descriptor::Affine { weights, .. } | Descriptor::Clipped { weights, .. } => Some(weights.len()),
            Descriptor::Dictionary { dim, .. } => Some(*dim),
            Descriptor::Combination(terms) => terms.first().and_then(|(_, h)| h.dim()),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self.descriptor, Descriptor::Affine { .. })
    }

    pub fn affine_parts(&self) -> Option<(&[f64], f64)> {
        match &self.descriptor {
            Descriptor::Affine { weights, intercept } => Some((weights, *intercept)),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.descriptor {
            Descriptor::Affine { weights, intercept } => dot(weights, x) + intercept,
            Descriptor::Clipped {
                weights,
                intercept,
                bound,
            } => (dot(weights, x) + intercept).clamp(-bound, *bound),
            Descriptor::Dictionary { eval, .. } => eval(x),
            Descriptor::Combination(terms) => terms.iter().map(|(c, h)| c * h.eval(x)).sum(),
        }
    }

    pub fn eval_rows(&self, x: &Matrix) -> Vec<f64> {
        x.row_iter().map(|r| self.eval(r)).collect()
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(k) if k != d => Err(Error::Shape(format!(
                "handle {} expects dimension {k}, design has {d}",
                self.id
            ))),
            _ => Ok(()),
        }
    }

    pub fn describe(&self) -> String {
        match &self.descriptor {
            Descriptor::Affine { weights, intercept } => {
                format!("affine(w={weights:?}, b={intercept})")
            }
            Descriptor::Clipped {
                weights,
                intercept,
                bound,
            } => format!("clipped(w={weights:?}, b={intercept}, M={bound})"),
            Descriptor::Dictionary { name, .. } => format!("dictionary({name})"),
            Descriptor::Combination(terms) => {
                let parts: Vec<String> = terms.iter().map(|(c, h)| format!("{c}*[{}]", h.describe())).collect();
                parts.join(" + ")
            }
        }
    }
}

/// `‖a - b‖_{L2}`: exact for affine pairs, otherwise the empirical RMS
/// over `reference`.
pub fn l2_distance(a: &FunctionHandle, b: &FunctionHandle, reference: Option<&Matrix>) -> Result<f64> {
    if let (Some((wa, ba)), Some((wb, bb))) = (a.affine_parts(), b.affine_parts()) {
        if wa.len() != wb.len() {
            return Err(Error::Shape("distance between handles of different dimension".into()));
        }
        let s: f64 = wa.iter().zip(wb).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((s + (ba - bb) * (ba - bb)).sqrt());
    }
    let x =
        reference.ok_or_else(|| Error::Input("non-affine handles need a reference sample for L2 distances".into()))?;
    if x.nrows() == 0 {
        return Err(Error::Input("empty reference sample".into()));
    }
    let s: f64 = x
        .row_iter()
        .map(|r| {
            let v = a.eval(r) - b.eval(r);
            v * v
        })
        .sum();
    Ok((s / x.nrows() as f64).sqrt())
}
