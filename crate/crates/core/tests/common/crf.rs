use agcp::depthcrf::{crf_energy_naive, CrfAgent, CrfMode, CrfParams, DepthBins};
use agcp::scenesim::{AgentFrame, AgentId};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_frame(rng: &mut ChaCha8Rng, agent: AgentId, w: usize, h: usize, k: usize, dense: bool) -> AgentFrame {
    let c = 3;
    let feats = Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-1.0..1.0));
    let logits = Array3::from_shape_fn((h, w, k), |_| rng.gen::<f64>() * 3.0 - 1.5);
    let depth = Array2::from_shape_fn((h, w), |_| rng.gen_range(1.0..7.0));
    let vis = Array2::from_shape_fn((h, w), |_| dense || rng.gen_bool(0.7));
    AgentFrame::from_dense(agent, &feats, &depth, &vis, &logits).unwrap()
}

/// Every labeling of `n` pixels over `k` bins, in lexicographic order.
pub fn all_labelings(n: usize, k: usize) -> Vec<Vec<usize>> {
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let mut lab = vec![0; n];
            for l in lab.iter_mut() {
                *l = code % k;
                code /= k;
            }
            lab
        })
        .collect()
}

pub fn exact_marginals(frame: &AgentFrame, bins: &DepthBins, params: &CrfParams) -> Array2<f64> {
    let n = frame.n_visible();
    let k = bins.k();
    let agents = [CrfAgent { frame, bins }];
    let labelings = all_labelings(n, k);
    let energies: Vec<f64> = labelings
        .iter()
        .map(|lab| crf_energy_naive(std::slice::from_ref(lab), &agents, &[], params).unwrap())
        .collect();
    let e_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut marg = Array2::zeros((n, k));
    let mut z = 0.0;
    for (lab, e) in labelings.iter().zip(&energies) {
        let p = (e_min - e).exp();
        z += p;
        for (i, &l) in lab.iter().enumerate() {
            marg[(i, l)] += p;
        }
    }
    marg / z
}

pub fn max_total_variation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| 0.5 * x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn random_params(rng: &mut ChaCha8Rng) -> CrfParams {
    CrfParams {
        theta: rng.gen_range(0.5..2.0),
        w_intra: rng.gen_range(0.0..0.1),
        w_cross: 0.0,
        neighborhood_radius: 1,
        iterations: 200,
        mode: CrfMode::Exact,
    }
}
