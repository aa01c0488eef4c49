//! Central finite-difference gradient checking.
//!
//! The oracle side of every gradient test: perturb one coordinate at a time,
//! evaluate the scalar objective twice, and compare the central difference
//! against the analytic gradient. It never looks at the backward pass it
//! checks — only at forward evaluations.

/// Settings for a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdSettings {
    /// Central-difference step.
    pub step: f64,
    /// Maximum acceptable relative error.
    pub tol: f64,
    /// Check at most this many coordinates (0 = all), sampled evenly.
    pub max_coords: usize,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-5,
            tol: 1e-4,
            max_coords: 0,
        }
    }
}

/// Outcome of [`check_grad`].
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

impl FdReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Per-coordinate relative error with a floor that keeps near-zero
/// derivative pairs from blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare `analytic` against central finite differences of `f` around `x0`.
///
/// `f` must be a deterministic function of its argument.
pub fn check_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    settings: &FdSettings,
) -> FdReport {
    assert_eq!(x0.len(), analytic.len());
    let n = x0.len();
    let coords: Vec<usize> = if settings.max_coords == 0 || settings.max_coords >= n {
        (0..n).collect()
    } else {
        // Even stride so every parameter block gets coverage.
        let stride = n as f64 / settings.max_coords as f64;
        (0..settings.max_coords)
            .map(|k| ((k as f64 * stride) as usize).min(n - 1))
            .collect()
    };

    let mut x = x0.to_vec();
    let mut worst = FdReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        checked: coords.len(),
    };
    for &i in &coords {
        let saved = x[i];
        x[i] = saved + settings.step;
        let fp = f(&x);
        x[i] = saved - settings.step;
        let fm = f(&x);
        x[i] = saved;
        let fd = (fp - fm) / (2.0 * settings.step);
        let e = rel_err(analytic[i], fd);
        if e > worst.max_rel_err {
            worst.max_rel_err = e;
            worst.worst_coord = i;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = Σ i·x_i², df/dx_i = 2i·x_i
        let x0: Vec<f64> = vec![0.3, -1.2, 2.5];
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| i as f64 * v * v).sum();
        let analytic: Vec<f64> = x0
            .iter()
            .enumerate()
            .map(|(i, v)| 2.0 * i as f64 * v)
            .collect();
        let rep = check_grad(f, &x0, &analytic, &FdSettings::default());
        assert!(rep.ok(1e-6), "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x0 = vec![1.0, 2.0];
        let f = |x: &[f64]| x[0] * x[0] + x[1];
        let wrong = vec![2.0, 0.5]; // true is [2, 1]
        let rep = check_grad(f, &x0, &wrong, &FdSettings::default());
        assert!(rep.max_rel_err > 0.3);
    }
}
