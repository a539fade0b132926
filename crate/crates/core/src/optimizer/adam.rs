//! First-order adaptive steps with projection onto the feasible set.

use serde::{Deserialize, Serialize};

use super::GradientSet;
use crate::diffplane::DifferencePlane;
use crate::volume::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    /// Density step in optical depth per voxel edge; the applied rate is
    /// this divided by the current edge length.
    pub lr_density: f64,
    pub lr_color: f64,
    pub lr_alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_density: f64,
    pub eps_color: f64,
    /// Large on purpose: plane gradients carry the `σ_s` factor and a tiny
    /// epsilon would normalize it away.
    pub eps_alpha: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_density: 0.05,
            lr_color: 0.1,
            lr_alpha: 100.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_density: 1e-8,
            eps_color: 1e-8,
            eps_alpha: 1e-3,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment buffers for the grid and planes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m_density: Vec<f64>,
    v_density: Vec<f64>,
    m_color: Vec<f64>,
    v_color: Vec<f64>,
    m_alpha: Vec<Vec<f64>>,
    v_alpha: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(grid: &VoxelGrid, planes: &[DifferencePlane]) -> Self {
        let n = grid.voxel_count();
        Self {
            t: 0,
            m_density: vec![0.0; n],
            v_density: vec![0.0; n],
            m_color: vec![0.0; 3 * n],
            v_color: vec![0.0; 3 * n],
            m_alpha: planes.iter().map(|p| vec![0.0; p.alpha.len()]).collect(),
            v_alpha: planes.iter().map(|p| vec![0.0; p.alpha.len()]).collect(),
        }
    }

    /// Applies one update scaled by `lr_scale`, then projects `σ ≥ 0`,
    /// `c ∈ [0, 1]` and `α_s ≥ 0`. Planes with `σ_s = 0` stay frozen.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        lr_scale: f64,
        grid: &mut VoxelGrid,
        planes: &mut [DifferencePlane],
        grads: &GradientSet,
    ) {
        self.t += 1;
        let t = self.t;
        let lr_density = lr_scale * cfg.lr_density / grid.voxel_edge();
        adam_update(
            &mut grid.density,
            &grads.density,
            &mut self.m_density,
            &mut self.v_density,
            t,
            lr_density,
            cfg.beta1,
            cfg.beta2,
            cfg.eps_density,
        );
        adam_update(
            grid.color.as_flattened_mut(),
            grads.color.as_flattened(),
            &mut self.m_color,
            &mut self.v_color,
            t,
            lr_scale * cfg.lr_color,
            cfg.beta1,
            cfg.beta2,
            cfg.eps_color,
        );
        grid.project_constraints();
        for (k, plane) in planes.iter_mut().enumerate() {
            if plane.sigma_s == 0.0 {
                continue;
            }
            adam_update(
                &mut plane.alpha,
                &grads.alpha[k],
                &mut self.m_alpha[k],
                &mut self.v_alpha[k],
                t,
                lr_scale * cfg.lr_alpha,
                cfg.beta1,
                cfg.beta2,
                cfg.eps_alpha,
            );
            plane.project_constraints();
        }
    }
}

/// Halves the learning rate after `patience` consecutive increases.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceGuard {
    pub patience: usize,
    last: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            last: None,
            streak: 0,
        }
    }

    /// Records one objective value; true when the rate should be halved.
    pub fn observe(&mut self, value: f64) -> bool {
        if let Some(last) = self.last {
            if value > last {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.last = Some(value);
        if self.patience > 0 && self.streak >= self.patience {
            self.streak = 0;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut grid = VoxelGrid::initial([3; 3], Aabb::centered_cube(1.0)).unwrap();
        let mut planes = vec![DifferencePlane::new(2, 2, 0.002)];
        planes[0].alpha[1] = 5.0;
        let before = (grid.clone(), planes.clone());
        let grads = GradientSet::zeros(grid.voxel_count(), &planes);
        let mut state = AdamState::new(&grid, &planes);
        for _ in 0..5 {
            state.step(&AdamConfig::default(), 1.0, &mut grid, &mut planes, &grads);
        }
        assert_eq!(grid, before.0);
        assert_eq!(planes, before.1);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)², minimizer 3
        let mut x = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let mut hit = None;
        for t in 1..=200 {
            let g = [2.0 * (x[0] - 3.0)];
            adam_update(&mut x, &g, &mut m, &mut v, t, 0.1, 0.9, 0.999, 1e-8);
            if hit.is_none() && (x[0] - 3.0).abs() < 1e-4 {
                hit = Some(t);
            }
        }
        assert!((x[0] - 3.0).abs() < 1e-4, "{}", x[0]);
        assert!(hit.is_some());
    }

    #[test]
    fn projection_after_step() {
        let mut grid = VoxelGrid::new([2; 3], Aabb::centered_cube(1.0), 0.01, [0.99; 3]).unwrap();
        let mut planes = vec![DifferencePlane::new(2, 2, 0.002)];
        let mut grads = GradientSet::zeros(grid.voxel_count(), &planes);
        grads.density.iter_mut().for_each(|g| *g = 1.0);
        grads.color.iter_mut().for_each(|c| *c = [-1.0; 3]);
        grads.alpha[0].iter_mut().for_each(|g| *g = 1.0);
        let mut state = AdamState::new(&grid, &planes);
        state.step(&AdamConfig::default(), 1.0, &mut grid, &mut planes, &grads);
        assert!(grid.density.iter().all(|&d| d == 0.0));
        assert!(grid.color.iter().flatten().all(|&c| c == 1.0));
        assert!(planes[0].alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn disabled_planes_do_not_move() {
        let grid = VoxelGrid::initial([2; 3], Aabb::centered_cube(1.0)).unwrap();
        let mut g2 = grid.clone();
        let mut planes = vec![DifferencePlane::new(2, 2, 0.0)];
        let mut grads = GradientSet::zeros(grid.voxel_count(), &planes);
        grads.alpha[0].iter_mut().for_each(|g| *g = -1.0);
        let mut state = AdamState::new(&grid, &planes);
        state.step(&AdamConfig::default(), 1.0, &mut g2, &mut planes, &grads);
        assert!(planes[0].alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn guard_needs_a_full_streak() {
        let mut g = DivergenceGuard::new(3);
        let mut fired = vec![];
        for v in [5.0, 6.0, 7.0, 6.5, 7.0, 8.0, 9.0, 10.0] {
            fired.push(g.observe(v));
        }
        assert_eq!(fired, vec![false, false, false, false, false, false, true, false]);
    }
}
