//! Gauss–Hermite rules and their tensor products.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Quadrature settings for integrating out random effects.
///
/// `points` is the number of nodes per dimension. When `max_nodes` is set,
/// the per-dimension count is lowered for high-dimensional models until the
/// tensor grid has at most that many nodes (never below 1, which is the
/// Laplace approximation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    pub points: usize,
    #[serde(default)]
    pub max_nodes: Option<usize>,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { points: 9, max_nodes: None }
    }
}

impl QuadratureConfig {
    pub fn points_for_dim(&self, dim: usize) -> usize {
        let mut q = self.points.max(1);
        if let Some(cap) = self.max_nodes {
            while q > 1 && q.saturating_pow(dim as u32) > cap {
                q -= 1;
            }
        }
        q
    }
}

/// Nodes and weights of the `n`-point rule for `∫ e^{-x²} f(x) dx`, nodes in
/// increasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    let mut z = 0.0_f64;
    for i in 0..m {
        // Initial guesses for the largest roots, then walk inwards.
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2 - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[m - 1] = 0.0;
    }
    x.reverse();
    w.reverse();
    (x, w)
}

/// Tensor-product grid in `dim` dimensions. Each node stores its standard
/// coordinates `z` and `ln W + |z|²`, the log of the weight that turns the
/// Gauss–Hermite kernel back into Lebesgue measure.
#[derive(Clone, Debug)]
pub struct TensorGrid {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl TensorGrid {
    pub fn new(points: usize, dim: usize) -> Self {
        let (x, w) = gauss_hermite(points);
        let count = points.pow(dim as u32);
        let mut nodes = Vec::with_capacity(count * dim);
        let mut log_weights = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            let mut lw = 0.0;
            for &k in &idx {
                nodes.push(x[k]);
                lw += w[k].ln() + x[k] * x[k];
            }
            log_weights.push(lw);
            for d in (0..dim).rev() {
                idx[d] += 1;
                if idx[d] < points {
                    break;
                }
                idx[d] = 0;
            }
        }
        Self { dim, nodes, log_weights }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }
}
