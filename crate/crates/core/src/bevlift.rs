//! Lift-splat: every visible pixel's feature vector is spread along its
//! camera ray with the pixel's depth distribution as weights and
//! sum-pooled into the BEV cell under each depth sample.

use ndarray::{Array2, Array3, ArrayView2};

use crate::channels::{NUM_CLASSES, OFFSET};
use crate::depthcrf::DepthDistribution;
use crate::error::{invalid, Result};
use crate::geometry::{BevGrid, CameraModel};
use crate::scenesim::{AgentFrame, AgentId, Domain, Scene};

/// A `n_x x n_y x C` feature grid and the agents that contributed to it.
#[derive(Clone, Debug, PartialEq)]
pub struct BevFeature {
    pub grid: BevGrid,
    pub data: Array3<f64>,
    pub agents: Vec<AgentId>,
}

impl BevFeature {
    pub fn zeros(grid: &BevGrid, channels: usize, agents: Vec<AgentId>) -> Self {
        Self {
            grid: grid.clone(),
            data: Array3::zeros((grid.n_x, grid.n_y, channels)),
            agents,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Common domain of the contributing agents, if there is one.
    pub fn domain(&self) -> Option<Domain> {
        let first = self.agents.first()?.domain();
        self.agents.iter().all(|a| a.domain() == first).then_some(first)
    }

    /// Per-channel sum over all cells.
    pub fn channel_sums(&self) -> Vec<f64> {
        (0..self.channels()).map(|c| self.data.index_axis(ndarray::Axis(2), c).sum()).collect()
    }
}

/// Splats `features` (`N x C`, one row per visible slot) through the
/// distribution `dist` into `grid`. Samples outside the grid are dropped.
pub fn lift_splat_features(
    frame: &AgentFrame,
    features: ArrayView2<'_, f64>,
    dist: &DepthDistribution,
    cam: &CameraModel,
    grid: &BevGrid,
) -> Result<BevFeature> {
    splat(frame, features, dist, cam, grid, false)
}

/// Like [`lift_splat_features`], but the `OFFSET` channels of each depth
/// sample are re-expressed relative to the cell the sample lands in.
///
/// A pixel's offset points from its surface point to the object centre.
/// The surface point is taken at the expected depth, so every sample of
/// the pixel points at the same centre estimate, whichever bin it came
/// from. Each row's correction is scaled by its class mass, matching how
/// the offset channels are stored. Class and payload channels are the
/// same as in the plain splat.
pub fn lift_splat_cell_offsets(
    frame: &AgentFrame,
    features: ArrayView2<'_, f64>,
    dist: &DepthDistribution,
    cam: &CameraModel,
    grid: &BevGrid,
) -> Result<BevFeature> {
    splat(frame, features, dist, cam, grid, true)
}

fn splat(
    frame: &AgentFrame,
    features: ArrayView2<'_, f64>,
    dist: &DepthDistribution,
    cam: &CameraModel,
    grid: &BevGrid,
    cell_offsets: bool,
) -> Result<BevFeature> {
    let n = frame.n_visible();
    if dist.n_pixels() != n || features.nrows() != n {
        return invalid(format!(
            "{}: {} visible pixels but {} depth rows and {} feature rows",
            frame.agent,
            n,
            dist.n_pixels(),
            features.nrows()
        ));
    }
    if dist.q.ncols() != dist.bins.k() {
        return invalid("depth distribution width differs from its bin count");
    }
    let c = features.ncols();
    if cell_offsets && c < OFFSET.end {
        return invalid(format!("cell-relative offsets need at least {} channels, got {c}", OFFSET.end));
    }
    let mut out = BevFeature::zeros(grid, c, vec![frame.agent]);
    let eye = cam.center();
    let k = dist.bins.k();
    let q_all = dist.q.as_standard_layout();
    let q_all = q_all.as_slice().expect("standard layout");
    let f_all = features.as_standard_layout();
    let f_all = f_all.as_slice().expect("standard layout");
    let data = out.data.as_slice_mut().expect("fresh array is contiguous");
    for i in 0..n {
        let (u, v) = frame.pixel_uv(i);
        let ray = cam.pixel_ray(u as f64 + 0.5, v as f64 + 0.5);
        let f = &f_all[i * c..(i + 1) * c];
        let (surface, mass) = if cell_offsets {
            let m: f64 = f.iter().take(NUM_CLASSES).map(|x| x.max(0.0)).sum();
            (eye + ray * dist.expected_depth(i), m)
        } else {
            (eye, 0.0)
        };
        for (&q, &d) in q_all[i * k..(i + 1) * k].iter().zip(&dist.bins.centers) {
            if q == 0.0 {
                continue;
            }
            let (px, py) = (eye.x + ray.x * d, eye.y + ray.y * d);
            if let Some((ix, iy)) = grid.cell_of_xy(px, py) {
                let base = (ix * grid.n_y + iy) * c;
                for (o, x) in data[base..base + c].iter_mut().zip(f) {
                    *o += q * x;
                }
                if cell_offsets {
                    let (cx, cy) = grid.cell_center(ix, iy);
                    data[base + OFFSET.start] += q * mass * (surface.x - cx);
                    data[base + OFFSET.start + 1] += q * mass * (surface.y - cy);
                }
            }
        }
    }
    Ok(out)
}

/// Lift-splat of the frame's own features.
pub fn lift_splat(frame: &AgentFrame, dist: &DepthDistribution, cam: &CameraModel, grid: &BevGrid) -> Result<BevFeature> {
    lift_splat_features(frame, frame.features.view(), dist, cam, grid)
}

/// Frame features scaled per pixel by the ground area the pixel covers at
/// its expected depth, `(E[D] / f)^2`. Makes an object's lifted mass
/// roughly its visible surface area, whichever camera saw it.
pub fn area_weighted_features(frame: &AgentFrame, dist: &DepthDistribution, cam: &CameraModel) -> Array2<f64> {
    let f2 = cam.fx() * cam.fy();
    let mut out = frame.features.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let d = dist.expected_depth(i);
        row *= d * d / f2;
    }
    out
}

/// Radius (in cells) of a CenterNet-style Gaussian target for a box of
/// `l x w` cells, such that a box shifted by the radius still overlaps the
/// truth with IoU at least `min_overlap`.
pub fn gaussian_radius(l: f64, w: f64, min_overlap: f64) -> f64 {
    let (a1, b1, c1) = (1.0, l + w, l * w * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r1 = (b1 + (b1 * b1 - 4.0 * a1 * c1).sqrt()) / 2.0;
    let (a2, b2, c2) = (4.0, 2.0 * (l + w), (1.0 - min_overlap) * l * w);
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (4.0 * min_overlap, -2.0 * min_overlap * (l + w), (min_overlap - 1.0) * l * w);
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Per-class target heatmap: a unit-peak Gaussian at each object's centre
/// cell, truncated at its radius; overlapping splats combine by max.
pub fn bev_gt_heatmap(scene: &Scene, grid: &BevGrid) -> Array3<f64> {
    let mut out = Array3::zeros((grid.n_x, grid.n_y, NUM_CLASSES));
    for o in &scene.objects {
        let Some((cx, cy)) = grid.cell_of_xy(o.center[0], o.center[1]) else {
            continue;
        };
        let r = gaussian_radius(o.size[0] / grid.cell_size, o.size[1] / grid.cell_size, 0.1)
            .floor()
            .max(2.0) as isize;
        let sigma = (2 * r + 1) as f64 / 6.0;
        let ch = o.class.index();
        for dx in -r..=r {
            for dy in -r..=r {
                let (ix, iy) = (cx as isize + dx, cy as isize + dy);
                if ix < 0 || iy < 0 || ix >= grid.n_x as isize || iy >= grid.n_y as isize {
                    continue;
                }
                let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut out[(ix as usize, iy as usize, ch)];
                *cell = f64::max(*cell, g);
            }
        }
    }
    out
}
