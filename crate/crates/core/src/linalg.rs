//! Small dense linear-algebra helpers shared by synthesis and control.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Largest eigenvalue modulus.
///
/// The Schur iteration is capped; when it stalls (defective or highly
/// repeated spectra) the radius is taken from Gelfand's formula
/// `|M^k|^(1/k)` with `k = 2^40`, computed by rescaled repeated squaring.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if let Some(schur) = m.clone().try_schur(1e-14, 10_000) {
        return schur
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
    }
    gelfand_radius(m)
}

fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let mut p = m.clone();
    // log of the accumulated scale, divided by k = 2^j as we go
    let mut log_rho = 0.0;
    for j in 0..40 {
        let s = p.norm();
        if s == 0.0 {
            return 0.0;
        }
        p /= s;
        log_rho += s.ln() / f64::powi(2.0, j);
        p = &p * &p;
    }
    (log_rho + p.norm().max(f64::MIN_POSITIVE).ln() / f64::powi(2.0, 40)).exp()
}

pub fn is_schur(m: &DMatrix<f64>) -> bool {
    spectral_radius(m) < 1.0
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * m.amax().max(1.0)
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

/// `[[a, b], [c, d]]` from four blocks.
pub fn block2x2(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let (r0, c0) = a.shape();
    let mut m = DMatrix::zeros(r0 + c.nrows(), c0 + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, c0), b.shape()).copy_from(b);
    m.view_mut((r0, 0), c.shape()).copy_from(c);
    m.view_mut((r0, c0), d.shape()).copy_from(d);
    m
}

/// Serde adapter writing matrices as row-major nested arrays.
pub mod row_major {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}
