use agcp::depthcrf::{make_depth_bins, DepthDistribution};
use agcp::geometry::{make_camera, unproject_pixel_to_world, BevGrid, CameraModel};
use agcp::scenesim::{AgentFrame, AgentId};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const W: usize = 24;
pub const H: usize = 16;
pub const C: usize = 5;

pub struct Case {
    pub frame: AgentFrame,
    pub dist: DepthDistribution,
    pub cam: CameraModel,
    pub grid: BevGrid,
    pub features: Array3<f64>,
    pub logits: Array3<f64>,
    pub depth: Array2<f64>,
    pub vis: Array2<bool>,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let grid = BevGrid::new(0.0, 40.0, -20.0, 20.0, rng.gen_range(0.4..2.0)).unwrap();
    let k = rng.gen_range(2..12);
    let bins = make_depth_bins(rng.gen_range(1.0..5.0), rng.gen_range(30.0..90.0), k).unwrap();
    let cam = make_camera(
        rng.gen_range(40.0..100.0),
        W,
        H,
        Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), -rng.gen_range(1.0..30.0)),
        -rng.gen_range(0.0..60.0),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-5.0..5.0),
    )
    .unwrap();
    let features = Array3::from_shape_fn((H, W, C), |_| rng.gen_range(0.0..2.0));
    let logits = Array3::from_shape_fn((H, W, k), |_| rng.gen_range(-3.0..3.0));
    let depth = Array2::from_elem((H, W), 10.0);
    let vis = Array2::from_shape_fn((H, W), |_| rng.gen_bool(0.6));
    let frame = AgentFrame::from_dense(AgentId::Vehicle, &features, &depth, &vis, &logits).unwrap();
    let dist = DepthDistribution::from_unary(&frame, &bins).unwrap();
    Case {
        frame,
        dist,
        cam,
        grid,
        features,
        logits,
        depth,
        vis,
    }
}

/// `sum_i sum_{k in grid} q_i(k) * |f_i|_1`, straight from the definitions.
pub fn expected_mass(c: &Case) -> f64 {
    let mut total = 0.0;
    for i in 0..c.frame.n_visible() {
        let (u, v) = c.frame.pixel_uv(i);
        let l1: f64 = c.frame.features.row(i).iter().map(|x| x.abs()).sum();
        for (k, d) in c.dist.bins.centers.iter().enumerate() {
            let p = unproject_pixel_to_world(u as f64 + 0.5, v as f64 + 0.5, *d, &c.cam).unwrap();
            if c.grid.cell_of_xy(p.x, p.y).is_some() {
                total += c.dist.q[(i, k)] * l1;
            }
        }
    }
    total
}

/// Frame restricted to `pixels` (linear indices), with the matching rows
/// of the parent's depth distribution.
pub fn sub_case(c: &Case, pixels: &[usize]) -> (AgentFrame, DepthDistribution) {
    let mut vis = Array2::from_elem((H, W), false);
    for &p in pixels {
        vis[(p / W, p % W)] = true;
    }
    let frame = AgentFrame::from_dense(AgentId::Vehicle, &c.features, &c.depth, &vis, &c.logits).unwrap();
    let k = c.dist.bins.k();
    let mut q = Array2::zeros((frame.n_visible(), k));
    for s in 0..frame.n_visible() {
        let (u, v) = frame.pixel_uv(s);
        let parent = c.frame.slot(u, v).unwrap();
        q.row_mut(s).assign(&c.dist.q.row(parent));
    }
    let dist = DepthDistribution {
        agent: AgentId::Vehicle,
        q,
        bins: c.dist.bins.clone(),
    };
    (frame, dist)
}
