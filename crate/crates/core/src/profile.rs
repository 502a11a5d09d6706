//! Smooth radial transition profiles used for cutoffs and partitions of unity.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

/// Generalized smoothstep of degree 9: 0 at `t <= 0`, 1 at `t >= 1`, with four
/// vanishing derivatives at both ends.
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    // t^5 * (126 - 420 t + 540 t^2 - 315 t^3 + 70 t^4)
    let p = 126.0 + t * (-420.0 + t * (540.0 + t * (-315.0 + t * 70.0)));
    t.powi(5) * p
}

/// Derivative of [`smoothstep`]: `630 t^4 (1 - t)^4` on `(0, 1)`.
pub fn smoothstep_prime(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    630.0 * (t * (1.0 - t)).powi(4)
}

/// Radial derivative of [`plateau`].
pub fn plateau_prime(r: f64, flat: f64, support: f64) -> f64 {
    -smoothstep_prime((r - flat) / (support - flat)) / (support - flat)
}

/// Radial plateau: 1 for `r <= flat`, 0 for `r >= support`, smooth in between.
pub fn plateau(r: f64, flat: f64, support: f64) -> f64 {
    1.0 - smoothstep((r - flat) / (support - flat))
}

/// Cutoff function `a` with `a = 1` on `|x| <= flat_radius` and `a = 0` on
/// `|x| >= support_radius`.
#[derive(Debug, Clone)]
pub struct Cutoff {
    pub a: ScalarField,
    /// Exact gradient `∂_i a`, one field per axis.
    pub grad: Vec<ScalarField>,
    pub flat_radius: f64,
    pub support_radius: f64,
}

impl Cutoff {
    pub fn new(grid: &Arc<Grid>, flat_radius: f64, support_radius: f64) -> Result<Self> {
        if !(flat_radius > 0.0 && flat_radius < support_radius && support_radius < 1.0) {
            return Err(Error::config(
                "cutoff",
                format!("need 0 < flat < support < 1, got ({flat_radius}, {support_radius})"),
            ));
        }
        let a = ScalarField::from_fn(grid, |x| {
            let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            plateau(r, flat_radius, support_radius)
        });
        let grad = (0..grid.dim())
            .map(|i| {
                ScalarField::from_fn(grid, |x| {
                    let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                    if r == 0.0 {
                        0.0
                    } else {
                        plateau_prime(r, flat_radius, support_radius) * x[i] / r
                    }
                })
            })
            .collect();
        Ok(Self { a, grad, flat_radius, support_radius })
    }

    /// Cutoff between the grid's stored radii `R1` and `R2`.
    pub fn for_grid(grid: &Arc<Grid>) -> Result<Self> {
        let r = grid.radii();
        Self::new(grid, r.inner, r.outer)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.a.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, SupportRadii};

    #[test]
    fn smoothstep_endpoints_and_symmetry() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            assert!((smoothstep(t) + smoothstep(1.0 - t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothstep_is_flat_to_fourth_order_at_ends() {
        let eps: f64 = 1e-3;
        assert!(smoothstep(eps) < 200.0 * eps.powi(5));
        assert!(1.0 - smoothstep(1.0 - eps) < 200.0 * eps.powi(5));
    }

    #[test]
    fn derivative_matches_difference_quotient() {
        for k in 1..10 {
            let t = k as f64 / 10.0;
            let fd = (smoothstep(t + 1e-6) - smoothstep(t - 1e-6)) / 2e-6;
            assert!((fd - smoothstep_prime(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn cutoff_bounds_and_support() {
        let g = make_grid(2, 65, SupportRadii::new(0.5, 0.75)).unwrap();
        let c = Cutoff::for_grid(&g).unwrap();
        for p in 0..g.len() {
            let a = c.a.values()[p];
            assert!((0.0..=1.0).contains(&a));
            let r = g.radius(p);
            if r <= 0.5 {
                assert_eq!(a, 1.0);
            }
            if r >= 0.75 {
                assert_eq!(a, 0.0);
            }
        }
    }
}
