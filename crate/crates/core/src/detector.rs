//! BEV box decoding.
//!
//! [`center_head`] turns a lifted (or fused) feature grid into the decoder
//! layout: class heatmaps in the class channels and per-cell regression
//! targets in the remaining ones. Every cell votes its class mass to the
//! object centre implied by its mean offset; the votes are smoothed and
//! squashed into scores. [`decode`] then reads 3x3 local maxima.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::bevlift::BevFeature;
use crate::channels::{self, NUM_CHANNELS, NUM_CLASSES};
use crate::error::{invalid, Result};
use crate::geometry::BevGrid;
use crate::scenesim::{ObjectClass, SceneObject};

pub const DETECTIONS_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class: ObjectClass,
    pub score: f64,
}

impl Box3D {
    pub fn from_object(o: &SceneObject) -> Self {
        Self {
            center: o.center,
            size: o.size,
            yaw: normalize_yaw(o.yaw),
            velocity: o.velocity,
            class: o.class,
            score: 1.0,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_yaw(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Vote mass at which the score reaches one half.
    pub tau: f64,
    /// Gaussian smoothing of the vote maps, in cells (0 disables).
    pub vote_sigma: f64,
    /// Half-width in cells of the window pooled for regression targets.
    pub payload_radius: usize,
    /// Cells whose total class mass is at most this are ignored.
    pub min_mass: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            vote_sigma: 1.0,
            payload_radius: 1,
            min_mass: 1e-9,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return invalid("tau must be positive");
        }
        if !(self.vote_sigma >= 0.0) || !(self.min_mass >= 0.0) {
            return invalid("vote_sigma and min_mass must be non-negative");
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

/// Separable convolution with unnormalized taps (unit centre tap), zero
/// outside the grid.
fn smooth(map: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    if taps.len() == 1 {
        return map.clone();
    }
    let r = (taps.len() / 2) as isize;
    let (nx, ny) = map.dim();
    let pass = |src: &Array2<f64>, along_x: bool| {
        Array2::from_shape_fn((nx, ny), |(ix, iy)| {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let d = t as isize - r;
                let (jx, jy) = if along_x { (ix as isize + d, iy as isize) } else { (ix as isize, iy as isize + d) };
                if jx >= 0 && jy >= 0 && (jx as usize) < nx && (jy as usize) < ny {
                    acc += w * src[(jx as usize, jy as usize)];
                }
            }
            acc
        })
    };
    pass(&pass(map, true), false)
}

/// Vote-based centre head. Output channels follow [`channels`]: class
/// scores in `CLASS`, offset of the regressed centre from the cell centre
/// in `OFFSET`, and mean payload elsewhere.
pub fn center_head(bev: &BevFeature, cfg: &HeadConfig) -> Result<BevFeature> {
    cfg.validate()?;
    if bev.channels() != NUM_CHANNELS {
        return invalid(format!("center head expects {NUM_CHANNELS} channels, got {}", bev.channels()));
    }
    let g = &bev.grid;
    let (nx, ny) = (g.n_x, g.n_y);
    let mut votes = Array3::<f64>::zeros((nx, ny, NUM_CLASSES));
    // mass, mass * x, mass * y, payload channels 6..13
    let mut acc = Array3::<f64>::zeros((nx, ny, 3 + NUM_CHANNELS - channels::LOG_SIZE.start));
    for ix in 0..nx {
        for iy in 0..ny {
            let f = bev.data.slice(s![ix, iy, ..]);
            let mass: f64 = f.slice(s![channels::CLASS]).iter().map(|m| m.max(0.0)).sum();
            if mass <= cfg.min_mass {
                continue;
            }
            let (cx, cy) = g.cell_center(ix, iy);
            let tx = cx + f[channels::OFFSET.start] / mass;
            let ty = cy + f[channels::OFFSET.start + 1] / mass;
            let Some((jx, jy)) = g.cell_of_xy(tx, ty) else {
                continue;
            };
            for c in 0..NUM_CLASSES {
                votes[(jx, jy, c)] += f[c].max(0.0);
            }
            acc[(jx, jy, 0)] += mass;
            acc[(jx, jy, 1)] += mass * tx;
            acc[(jx, jy, 2)] += mass * ty;
            for (k, ch) in (channels::LOG_SIZE.start..NUM_CHANNELS).enumerate() {
                acc[(jx, jy, 3 + k)] += f[ch];
            }
        }
    }

    let taps = gaussian_taps(cfg.vote_sigma);
    let mut out = BevFeature::zeros(g, NUM_CHANNELS, bev.agents.clone());
    for c in 0..NUM_CLASSES {
        let v = smooth(&votes.slice(s![.., .., c]).to_owned(), &taps);
        out.data
            .slice_mut(s![.., .., c])
            .assign(&v.mapv(|s| if s > 0.0 { s / (s + cfg.tau) } else { 0.0 }));
    }
    let r = cfg.payload_radius as isize;
    for ix in 0..nx {
        for iy in 0..ny {
            if (0..NUM_CLASSES).all(|c| out.data[(ix, iy, c)] == 0.0) {
                continue;
            }
            let mut sum = vec![0.0; acc.dim().2];
            for dx in -r..=r {
                for dy in -r..=r {
                    let (jx, jy) = (ix as isize + dx, iy as isize + dy);
                    if jx < 0 || jy < 0 || jx as usize >= nx || jy as usize >= ny {
                        continue;
                    }
                    for (s_, a) in sum.iter_mut().zip(acc.slice(s![jx as usize, jy as usize, ..])) {
                        *s_ += a;
                    }
                }
            }
            let m = sum[0];
            if m <= 0.0 {
                continue;
            }
            let (cx, cy) = g.cell_center(ix, iy);
            out.data[(ix, iy, channels::OFFSET.start)] = sum[1] / m - cx;
            out.data[(ix, iy, channels::OFFSET.start + 1)] = sum[2] / m - cy;
            for (k, ch) in (channels::LOG_SIZE.start..NUM_CHANNELS).enumerate() {
                out.data[(ix, iy, ch)] = sum[3 + k] / m;
            }
        }
    }
    Ok(out)
}

/// Local maxima of each class heatmap over 3x3 windows. Among equal values
/// in a window the lowest `(ix, iy)` wins.
pub fn decode(f_p: &BevFeature, grid: &BevGrid, threshold: f64) -> Result<Vec<Box3D>> {
    if f_p.channels() != NUM_CHANNELS {
        return invalid(format!("decoder expects {NUM_CHANNELS} channels, got {}", f_p.channels()));
    }
    let (nx, ny, _) = f_p.data.dim();
    if (nx, ny) != (grid.n_x, grid.n_y) {
        return invalid(format!("map is {nx}x{ny} but grid is {}x{}", grid.n_x, grid.n_y));
    }
    let d = &f_p.data;
    let mut out = Vec::new();
    for (c, class) in ObjectClass::ALL.iter().enumerate() {
        for ix in 0..nx {
            for iy in 0..ny {
                let v = d[(ix, iy, c)];
                if !(v >= threshold) || v <= 0.0 {
                    continue;
                }
                let mut peak = true;
                'win: for jx in ix.saturating_sub(1)..=(ix + 1).min(nx - 1) {
                    for jy in iy.saturating_sub(1)..=(iy + 1).min(ny - 1) {
                        if (jx, jy) == (ix, iy) {
                            continue;
                        }
                        let w = d[(jx, jy, c)];
                        if w > v || (w == v && (jx, jy) < (ix, iy)) {
                            peak = false;
                            break 'win;
                        }
                    }
                }
                if !peak {
                    continue;
                }
                let (cx, cy) = grid.cell_center(ix, iy);
                let size = [
                    d[(ix, iy, channels::LOG_SIZE.start)].exp(),
                    d[(ix, iy, channels::LOG_SIZE.start + 1)].exp(),
                    d[(ix, iy, channels::LOG_SIZE.start + 2)].exp(),
                ];
                out.push(Box3D {
                    center: [
                        cx + d[(ix, iy, channels::OFFSET.start)],
                        cy + d[(ix, iy, channels::OFFSET.start + 1)],
                        -size[2] / 2.0,
                    ],
                    size,
                    yaw: normalize_yaw(d[(ix, iy, channels::YAW.start)].atan2(d[(ix, iy, channels::YAW.start + 1)])),
                    velocity: [d[(ix, iy, channels::VELOCITY.start)], d[(ix, iy, channels::VELOCITY.start + 1)]],
                    class: *class,
                    score: v.clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(out)
}

/// Versioned per-scene detection document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub version: u32,
    pub scene_id: usize,
    pub seed: u64,
    pub label: String,
    pub boxes: Vec<Box3D>,
}

impl DetectionsFile {
    pub fn new(scene_id: usize, seed: u64, label: impl Into<String>, boxes: Vec<Box3D>) -> Self {
        Self {
            version: DETECTIONS_FILE_VERSION,
            scene_id,
            seed,
            label: label.into(),
            boxes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text)?;
        if f.version != DETECTIONS_FILE_VERSION {
            return invalid(format!("unsupported detections file version {}", f.version));
        }
        Ok(f)
    }
}
