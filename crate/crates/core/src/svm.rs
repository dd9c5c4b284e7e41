//! Hinge-loss linear SVM solved by dual coordinate descent.
//!
//! The bias is handled by appending a constant feature of 1 to every point,
//! so the dual has only box constraints `0 ≤ αᵢ ≤ C`:
//!
//! ```text
//! min_α  ½ αᵀQα − Σ αᵢ,   Q_ij = y_i y_j x̃_i·x̃_j
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub max_sweeps: usize,
    /// Stop once the largest projected-gradient magnitude falls below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 0.1,
            max_sweeps: 10_000,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvmSolution {
    /// Weights over the original features.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// One dual variable per training point, positives first.
    pub duals: Vec<f64>,
    pub sweeps: usize,
    pub kkt_violation: f64,
}

impl SvmSolution {
    /// Dual objective `½‖w̃‖² − Σαᵢ` at the solution.
    pub fn dual_objective(&self) -> f64 {
        let wsq: f64 = self.weights.iter().map(|w| w * w).sum::<f64>() + self.bias * self.bias;
        0.5 * wsq - self.duals.iter().sum::<f64>()
    }

    pub fn decision(&self, x: &[f32]) -> f64 {
        self.weights.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + self.bias
    }
}

pub fn train_svm(positives: &[&[f32]], negatives: &[&[f32]], config: &SvmConfig) -> Result<SvmSolution> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "svm needs both classes, got {} positives and {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    if !(config.c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "svm C must be positive, got {}",
            config.c
        )));
    }
    let dim = positives[0].len();
    let points: Vec<(&[f32], f64)> = positives
        .iter()
        .map(|p| (*p, 1.0))
        .chain(negatives.iter().map(|n| (*n, -1.0)))
        .collect();
    if points.iter().any(|(x, _)| x.len() != dim) {
        return Err(Error::Shape("svm points of unequal dimension".into()));
    }

    let c = config.c;
    let n = points.len();
    let diag: Vec<f64> = points
        .iter()
        .map(|(x, _)| x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + 1.0)
        .collect();
    let mut alpha = vec![0.0; n];
    // w̃ = [w, b]
    let mut w = vec![0.0; dim + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let gradient = |w: &[f64], i: usize| -> f64 {
        let (x, y) = points[i];
        let margin: f64 = x.iter().zip(w).map(|(&v, w)| v as f64 * w).sum::<f64>() + w[dim];
        y * margin - 1.0
    };
    let projected = |g: f64, a: f64| -> f64 {
        if a <= 0.0 {
            g.min(0.0)
        } else if a >= c {
            g.max(0.0)
        } else {
            g
        }
    };

    let mut sweeps = 0;
    let mut violation = f64::INFINITY;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        order.shuffle(&mut rng);
        let mut max_pg = 0.0f64;
        for &i in &order {
            let g = gradient(&w, i);
            let pg = projected(g, alpha[i]);
            max_pg = max_pg.max(pg.abs());
            if pg.abs() > 1e-15 {
                let old = alpha[i];
                alpha[i] = (old - g / diag[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * points[i].1;
                if delta != 0.0 {
                    for (wj, &xj) in w.iter_mut().zip(points[i].0) {
                        *wj += delta * xj as f64;
                    }
                    w[dim] += delta;
                }
            }
        }
        violation = max_pg;
        if max_pg < config.tolerance {
            break;
        }
    }
    if violation >= config.tolerance {
        return Err(Error::Convergence {
            iterations: sweeps,
            residual: violation,
        });
    }
    let kkt_violation = (0..n)
        .map(|i| projected(gradient(&w, i), alpha[i]).abs())
        .fold(0.0, f64::max);
    let bias = w.pop().unwrap_or(0.0);
    Ok(SvmSolution {
        weights: w,
        bias,
        duals: alpha,
        sweeps,
        kkt_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_antipodal_pair() {
        let cfg = SvmConfig {
            c: 10.0,
            ..SvmConfig::default()
        };
        let sol = train_svm(&[&[1.0, 0.0]], &[&[-1.0, 0.0]], &cfg).unwrap();
        assert!((sol.weights[0] - 1.0).abs() < 1e-6);
        assert!(sol.weights[1].abs() < 1e-9);
        assert!(sol.bias.abs() < 1e-6);
        assert!(sol.duals.iter().all(|&a| (a - 0.5).abs() < 1e-6));
    }

    #[test]
    fn mirror_symmetric_sets_give_axis_parallel_normal() {
        // Reflection y -> -y maps each class onto itself.
        let pos: Vec<[f32; 2]> = vec![[0.9, 0.3], [0.9, -0.3], [0.6, 0.0]];
        let neg: Vec<[f32; 2]> = vec![[-0.4, 0.8], [-0.4, -0.8]];
        let p: Vec<&[f32]> = pos.iter().map(|v| v.as_slice()).collect();
        let n: Vec<&[f32]> = neg.iter().map(|v| v.as_slice()).collect();
        let sol = train_svm(
            &p,
            &n,
            &SvmConfig {
                c: 5.0,
                ..Default::default()
            },
        )
        .unwrap();
        let norm = sol.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(sol.weights[0] > 0.0);
        assert!((sol.weights[1] / norm).abs() < 1e-6);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(
            train_svm(&[&[1.0]], &[], &SvmConfig::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn sweep_budget_exhaustion_reports_residual() {
        let pos: Vec<[f32; 2]> = vec![[0.2, 0.9], [0.8, 0.1]];
        let neg: Vec<[f32; 2]> = vec![[0.3, 0.7], [0.9, 0.2]];
        let p: Vec<&[f32]> = pos.iter().map(|v| v.as_slice()).collect();
        let n: Vec<&[f32]> = neg.iter().map(|v| v.as_slice()).collect();
        let cfg = SvmConfig {
            c: 100.0,
            max_sweeps: 1,
            tolerance: 1e-12,
            seed: 0,
        };
        assert!(matches!(
            train_svm(&p, &n, &cfg),
            Err(Error::Convergence { iterations: 1, .. })
        ));
    }
}
