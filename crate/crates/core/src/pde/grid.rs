use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Values on every node of a [`SpatialGrid`], `x₁` varying fastest.
pub type GridFunction = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Homogeneous Dirichlet: boundary nodes are held at zero.
    #[serde(rename = "dirichlet0")]
    Dirichlet,
    /// Period `2R`; the last node on each axis duplicates the first.
    Periodic,
}

/// Uniform tensor grid on `[−R, R]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialGrid {
    pub d: usize,
    pub half_width: f64,
    pub m: usize,
    pub boundary: Boundary,
}

impl SpatialGrid {
    pub fn new(d: usize, half_width: f64, m: usize, boundary: Boundary) -> Result<Self> {
        if !(d == 1 || d == 2) {
            return Err(LabError::usage(format!("spatial dimension must be 1 or 2, got {d}")));
        }
        if m < 3 {
            return Err(LabError::usage(format!("need at least 3 points per axis, got {m}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(LabError::usage("grid half-width must be positive"));
        }
        Ok(Self {
            d,
            half_width,
            m,
            boundary,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.d, self.half_width, self.m, self.boundary).map(|_| ())
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / (self.m - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid with half the spacing (`2m − 1` points per axis).
    pub fn refine(&self) -> Self {
        Self {
            m: 2 * self.m - 1,
            ..*self
        }
    }

    pub fn axis_coord(&self, i: usize) -> f64 {
        if i == self.m - 1 {
            self.half_width
        } else {
            -self.half_width + i as f64 * self.dx()
        }
    }

    /// Per-axis indices of node `k`.
    pub fn multi_index(&self, k: usize) -> [usize; 2] {
        if self.d == 1 {
            [k, 0]
        } else {
            [k % self.m, k / self.m]
        }
    }

    pub fn node(&self, idx: [usize; 2]) -> usize {
        if self.d == 1 {
            idx[0]
        } else {
            idx[0] + self.m * idx[1]
        }
    }

    pub fn coord(&self, k: usize) -> Vec<f64> {
        let idx = self.multi_index(k);
        (0..self.d).map(|a| self.axis_coord(idx[a])).collect()
    }

    pub fn on_boundary(&self, k: usize) -> bool {
        let idx = self.multi_index(k);
        (0..self.d).any(|a| idx[a] == 0 || idx[a] == self.m - 1)
    }

    /// Nodes carrying an unknown: interior nodes (Dirichlet) or the
    /// non-duplicated nodes (periodic).
    pub fn is_active(&self, k: usize) -> bool {
        let idx = self.multi_index(k);
        match self.boundary {
            Boundary::Dirichlet => !self.on_boundary(k),
            Boundary::Periodic => (0..self.d).all(|a| idx[a] < self.m - 1),
        }
    }

    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.is_active(k)).collect()
    }

    /// Quadrature weight of node `k` in `(u, v) = Σ w_k u_k v_k`.
    pub fn weight(&self, k: usize) -> f64 {
        let idx = self.multi_index(k);
        if self.boundary == Boundary::Periodic && (0..self.d).any(|a| idx[a] == self.m - 1) {
            0.0
        } else {
            self.dx().powi(self.d as i32)
        }
    }

    /// Lebesgue measure of the domain as seen by the quadrature.
    pub fn measure(&self) -> f64 {
        (0..self.len()).map(|k| self.weight(k)).sum()
    }

    /// Neighbor of node `k` along `axis` in direction `dir = ±1`, wrapping for
    /// periodic grids; `None` past a Dirichlet edge.
    pub fn neighbor(&self, k: usize, axis: usize, dir: isize) -> Option<usize> {
        let mut idx = self.multi_index(k);
        let i = idx[axis] as isize + dir;
        let period = (self.m - 1) as isize;
        idx[axis] = match self.boundary {
            Boundary::Dirichlet => {
                if i < 0 || i > period {
                    return None;
                }
                i as usize
            }
            Boundary::Periodic => i.rem_euclid(period) as usize,
        };
        Some(self.node(idx))
    }

    pub fn sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> GridFunction {
        (0..self.len()).map(|k| f(&self.coord(k))).collect()
    }

    /// Imposes the boundary condition: zero boundary values, or copies of the
    /// wrapped nodes.
    pub fn enforce(&self, u: &mut [f64]) {
        for k in 0..self.len() {
            match self.boundary {
                Boundary::Dirichlet => {
                    if self.on_boundary(k) {
                        u[k] = 0.0;
                    }
                }
                Boundary::Periodic => {
                    if !self.is_active(k) {
                        let mut idx = self.multi_index(k);
                        for a in 0..self.d {
                            if idx[a] == self.m - 1 {
                                idx[a] = 0;
                            }
                        }
                        u[k] = u[self.node(idx)];
                    }
                }
            }
        }
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let w = self.dx().powi(self.d as i32);
        (0..self.len()).filter(|&k| self.weight(k) > 0.0).map(|k| u[k] * v[k]).sum::<f64>() * w
    }

    pub fn norm2(&self, u: &[f64]) -> f64 {
        self.inner(u, u)
    }

    /// Central-difference gradient, one-sided on Dirichlet edges; `d` components.
    pub fn gradient(&self, u: &[f64]) -> Vec<GridFunction> {
        let h = self.dx();
        (0..self.d)
            .map(|a| {
                (0..self.len())
                    .map(|k| match (self.neighbor(k, a, -1), self.neighbor(k, a, 1)) {
                        (Some(lo), Some(hi)) => (u[hi] - u[lo]) / (2.0 * h),
                        (None, Some(hi)) => (u[hi] - u[k]) / h,
                        (Some(lo), None) => (u[k] - u[lo]) / h,
                        (None, None) => 0.0,
                    })
                    .collect()
            })
            .collect()
    }

    /// `‖∇u‖²` with the central-difference gradient.
    pub fn grad_norm2(&self, u: &[f64]) -> f64 {
        self.gradient(u).iter().map(|g| self.norm2(g)).sum()
    }

    /// Largest `|u|` on boundary nodes (the truncation guard).
    pub fn boundary_max(&self, u: &[f64]) -> f64 {
        (0..self.len())
            .filter(|&k| self.on_boundary(k))
            .map(|k| u[k].abs())
            .fold(0.0, f64::max)
    }

    /// Multilinear interpolation; zero outside a Dirichlet domain, wrapped on
    /// a periodic one.
    pub fn interpolate(&self, u: &[f64], x: &[f64]) -> f64 {
        let h = self.dx();
        let r = self.half_width;
        let mut base = [0usize; 2];
        let mut frac = [0.0f64; 2];
        for a in 0..self.d {
            let mut xa = x[a];
            match self.boundary {
                Boundary::Dirichlet => {
                    if !(xa >= -r && xa <= r) {
                        return 0.0;
                    }
                }
                Boundary::Periodic => xa = (xa + r).rem_euclid(2.0 * r) - r,
            }
            let s = ((xa + r) / h).clamp(0.0, (self.m - 1) as f64);
            let i = (s.floor() as usize).min(self.m - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.d) {
            let mut idx = [0usize; 2];
            let mut w = 1.0;
            for a in 0..self.d {
                let up = (corner >> a) & 1;
                idx[a] = base[a] + up;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * u[self.node(idx)];
            }
        }
        acc
    }

    /// Interpolated gradient (each component interpolated separately).
    pub fn interpolate_gradient(&self, grad: &[GridFunction], x: &[f64]) -> Vec<f64> {
        grad.iter().map(|g| self.interpolate(g, x)).collect()
    }

    /// Nodes at least `collar` away from the edge of the box.
    pub fn interior_with_collar(&self, collar: f64) -> Vec<usize> {
        let lim = self.half_width - collar;
        (0..self.len())
            .filter(|&k| self.coord(k).iter().all(|c| c.abs() <= lim + 1e-12))
            .collect()
    }
}
