//! Axis-aligned boxes, the set representation used for constraints,
//! uncertainty bounds and the tube.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed axis-aligned box `{x : lo <= x <= hi}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
                context: "box bounds",
            });
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("box bounds must be finite".into()));
        }
        let inverted: Vec<usize> = (0..lo.len()).filter(|&i| lo[i] > hi[i]).collect();
        if !inverted.is_empty() {
            return Err(Error::EmptySet {
                components: inverted,
                context: "box constructor".into(),
            });
        }
        Ok(Self { lo, hi })
    }

    /// `[-r_i, r_i]` in every component.
    pub fn symmetric(radius: &[f64]) -> Result<Self> {
        Self::new(radius.iter().map(|r| -r).collect(), radius.to_vec())
    }

    pub fn point(p: &[f64]) -> Self {
        Self {
            lo: p.to_vec(),
            hi: p.to_vec(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::point(&vec![0.0; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    fn check_dim(&self, other: usize, context: &'static str) -> Result<()> {
        if self.dim() != other {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other,
                context,
            });
        }
        Ok(())
    }

    /// Closed-boundary membership.
    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (l, h))| *l <= *x && *x <= *h)
    }

    /// Membership with a per-component slack.
    pub fn contains_with_slack(&self, p: &[f64], slack: f64) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(x, (l, h))| *l - slack <= *x && *x <= *h + slack)
    }

    pub fn contains_box(&self, other: &BoxSet) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    pub fn contains_origin(&self) -> bool {
        self.contains(&vec![0.0; self.dim()])
    }

    /// Scale the box about the origin by `factor` (> 0).
    pub fn inflate(&self, factor: f64) -> BoxSet {
        BoxSet {
            lo: self.lo.iter().map(|v| v * factor).collect(),
            hi: self.hi.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn translate(&self, offset: &[f64]) -> Result<BoxSet> {
        self.check_dim(offset.len(), "translation")?;
        Ok(BoxSet {
            lo: self.lo.iter().zip(offset).map(|(l, o)| l + o).collect(),
            hi: self.hi.iter().zip(offset).map(|(h, o)| h + o).collect(),
        })
    }

    /// Componentwise clamp of `p` into the box.
    pub fn clamp(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(x, (l, h))| x.clamp(*l, *h))
            .collect()
    }

    /// Components `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> BoxSet {
        BoxSet {
            lo: self.lo[start..start + len].to_vec(),
            hi: self.hi[start..start + len].to_vec(),
        }
    }

    /// Cartesian product `self × other`.
    pub fn stack(&self, other: &BoxSet) -> BoxSet {
        BoxSet {
            lo: self.lo.iter().chain(&other.lo).copied().collect(),
            hi: self.hi.iter().chain(&other.hi).copied().collect(),
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if h > l { rng.random_range(*l..=*h) } else { *l })
            .collect()
    }

    /// A random vertex: each component independently at `lo` or `hi`.
    pub fn sample_vertex<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if rng.random_bool(0.5) { *h } else { *l })
            .collect()
    }
}

pub fn minkowski_sum(a: &BoxSet, b: &BoxSet) -> Result<BoxSet> {
    a.check_dim(b.dim(), "minkowski sum")?;
    Ok(BoxSet {
        lo: a.lo.iter().zip(&b.lo).map(|(x, y)| x + y).collect(),
        hi: a.hi.iter().zip(&b.hi).map(|(x, y)| x + y).collect(),
    })
}

/// `a ⊖ b`. Returns [`Error::EmptySet`] naming the inverted components
/// instead of clamping them.
pub fn pontryagin_diff(a: &BoxSet, b: &BoxSet) -> Result<BoxSet> {
    a.check_dim(b.dim(), "pontryagin difference")?;
    let lo: Vec<f64> = a.lo.iter().zip(&b.lo).map(|(x, y)| x - y).collect();
    let hi: Vec<f64> = a.hi.iter().zip(&b.hi).map(|(x, y)| x - y).collect();
    let inverted: Vec<usize> = (0..lo.len()).filter(|&i| lo[i] > hi[i]).collect();
    if !inverted.is_empty() {
        return Err(Error::EmptySet {
            components: inverted,
            context: "pontryagin difference".into(),
        });
    }
    Ok(BoxSet { lo, hi })
}

/// Tightest axis-aligned box containing `{M x : x in a}` (interval arithmetic).
pub fn linear_map_outer(m: &DMatrix<f64>, a: &BoxSet) -> Result<BoxSet> {
    a.check_dim(m.ncols(), "linear map")?;
    let mut lo = vec![0.0; m.nrows()];
    let mut hi = vec![0.0; m.nrows()];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let p = m[(i, j)] * a.lo[j];
            let q = m[(i, j)] * a.hi[j];
            lo[i] += p.min(q);
            hi[i] += p.max(q);
        }
    }
    Ok(BoxSet { lo, hi })
}

pub fn outer_box_of_points<'a, I>(points: I) -> Result<BoxSet>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = points.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InvalidParameter("outer box of an empty point set".into()))?;
    let mut b = BoxSet::point(first);
    for p in iter {
        b.check_dim(p.len(), "outer box")?;
        for i in 0..p.len() {
            b.lo[i] = b.lo[i].min(p[i]);
            b.hi[i] = b.hi[i].max(p[i]);
        }
    }
    Ok(b)
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
