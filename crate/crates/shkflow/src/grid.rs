//! Periodic midpoint grid on [-pi, pi) and the field type everything else
//! builds on.
//!
//! The grid places `n` cell midpoints at `x_i = -pi + (i + 1/2) dx` with
//! `dx = 2 pi / n`. Midpoint quadrature on this layout integrates every
//! trigonometric harmonic below the Nyquist frequency exactly, which is what
//! makes the Gibbs normalizations and divergence integrals in the rest of
//! the crate behave like their continuum counterparts up to roundoff.
//!
//! All reductions run left to right in index order so that repeated runs
//! produce bitwise-identical results.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::{Error, Result};

/// Uniform periodic midpoint grid on [-pi, pi).
///
/// Cheap to clone: the node table is shared behind an `Arc`.
#[derive(Clone, Debug)]
pub struct PeriodicGrid {
    n: usize,
    dx: f64,
    nodes: Arc<[f64]>,
}

/// Builds the `n`-cell midpoint grid. `n` must be even and at least 8.
pub fn build_grid(n: usize) -> Result<PeriodicGrid> {
    if n < 8 || n % 2 != 0 {
        return Err(Error::GridSize { n });
    }
    let dx = 2.0 * PI / n as f64;
    let nodes: Vec<f64> = (0..n).map(|i| -PI + (i as f64 + 0.5) * dx).collect();
    Ok(PeriodicGrid {
        n,
        dx,
        nodes: nodes.into(),
    })
}

impl PeriodicGrid {
    /// Number of cells.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Cell width `2 pi / n`.
    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Midpoint coordinates in increasing order.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Midpoint of cell `i`.
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    /// Two grids are interchangeable when they have the same resolution;
    /// the node layout is fully determined by `n`.
    pub fn same_layout(&self, other: &PeriodicGrid) -> bool {
        self.n == other.n
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len == self.n {
            Ok(())
        } else {
            Err(Error::FieldLength {
                expected: self.n,
                got: len,
            })
        }
    }
}

/// A real-valued function sampled at the grid midpoints.
#[derive(Clone, Debug)]
pub struct GridField {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl GridField {
    /// Wraps `values` as a field on `grid`. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(grid: &PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        grid.check_len(values.len())?;
        for (cell, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "grid field",
                    cell,
                });
            }
        }
        Ok(GridField {
            grid: grid.clone(),
            values,
        })
    }

    /// Samples `f` at every midpoint.
    pub fn from_fn(grid: &PeriodicGrid, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.nodes().iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Serializes the field as CSV with columns `theta,<label>` using
    /// 17-significant-digit scientific notation, which round-trips `f64`
    /// exactly.
    pub fn to_csv(&self, label: &str) -> String {
        let mut out = String::with_capacity(48 * self.values.len() + 16);
        let _ = writeln!(out, "theta,{label}");
        for (x, v) in self.grid.nodes().iter().zip(&self.values) {
            let _ = writeln!(out, "{x:.16e},{v:.16e}");
        }
        out
    }
}

/// Midpoint quadrature `sum_i f_i dx`, summed left to right.
pub fn quadrature(f: &GridField) -> f64 {
    quad_raw(f.values(), f.grid().dx())
}

/// Oscillation `max f - min f`.
pub fn oscillation(f: &GridField) -> f64 {
    osc_raw(f.values())
}

/// Sup norm `max |f_i|`.
pub fn sup_norm(f: &GridField) -> f64 {
    sup_raw(f.values())
}

pub(crate) fn quad_raw(values: &[f64], dx: f64) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc += v;
    }
    acc * dx
}

pub(crate) fn osc_raw(values: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    hi - lo
}

pub(crate) fn sup_raw(values: &[f64]) -> f64 {
    let mut hi: f64 = 0.0;
    for &v in values {
        hi = hi.max(v.abs());
    }
    hi
}

/// Spectral derivative on the periodic grid.
///
/// Applies the standard even-`n` trigonometric differentiation kernel
/// `D_m = (-1)^(m+1) cot(m dx / 2) / 2`, which is exact for harmonics up to
/// `n/2 - 1`; the crate only ever feeds it content at or below `n/4`.
/// The apply is a dense O(n^2) circulant product, deterministic by
/// construction.
pub fn spectral_derivative(f: &GridField) -> GridField {
    let n = f.grid().n();
    let dx = f.grid().dx();
    let values = f.values();

    let mut kernel = vec![0.0f64; n];
    for m in 1..n {
        let sign = if m % 2 == 0 { -0.5 } else { 0.5 };
        kernel[m] = sign / (m as f64 * dx / 2.0).tan();
    }

    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0;
        for m in 1..n {
            let j = if i + m < n { i + m } else { i + m - n };
            acc += kernel[m] * values[j];
        }
        out[i] = acc;
    }

    GridField {
        grid: f.grid().clone(),
        values: out,
    }
}
