//! Collaborative depth refinement: a CRF over discretized depth labels with
//! semantic Gaussian kernels inside each agent and across agents, solved by
//! mean-field inference.
//!
//! Nodes are the visible pixels of each frame. Background pixels carry no
//! features and a uniform unary, so they are left out of the graph.
//!
//! Cross-agent terms compare depths on a common scale: for a pair linking
//! pixel `i` of agent `a` to pixel `j` of agent `b`, label `l'` of `j`
//! places a point on `b`'s ray whose depth seen from `a` is
//! `alpha + beta * D_b(l')`. The compatibility is then
//! `|D_a(l) - alpha - beta * D_b(l')|`, which reduces to `|D(l) - D(l')|`
//! for identical cameras.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::CameraModel;
use crate::par;
use crate::scenesim::{AgentFrame, AgentId};

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
/// Largest per-agent pixel count accepted in [`CrfMode::Exact`].
pub const EXACT_MODE_MAX_PIXELS: usize = 64;

const ROWS_PER_TASK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub centers: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthBins {
    pub fn new(d_min: f64, d_max: f64, k: usize) -> Result<Self> {
        if !(d_min >= 0.0 && d_min.is_finite() && d_max.is_finite() && d_max > d_min) {
            return invalid(format!("depth range must satisfy 0 <= d_min < d_max, got [{d_min}, {d_max}]"));
        }
        if k < 2 {
            return invalid(format!("need at least 2 depth bins, got {k}"));
        }
        let step = (d_max - d_min) / k as f64;
        let centers = (0..k).map(|i| d_min + (i as f64 + 0.5) * step).collect();
        Ok(Self { centers, d_min, d_max })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn spacing(&self) -> f64 {
        (self.d_max - self.d_min) / self.k() as f64
    }

    /// Bin whose interval `[d_min + i*s, d_min + (i+1)*s)` contains `d`.
    /// `d_max` itself falls in the last bin.
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        if !(d >= self.d_min && d <= self.d_max) {
            return None;
        }
        let i = ((d - self.d_min) / self.spacing()).floor() as usize;
        Some(i.min(self.k() - 1))
    }
}

pub fn make_depth_bins(d_min: f64, d_max: f64, k: usize) -> Result<DepthBins> {
    DepthBins::new(d_min, d_max, k)
}

/// `-log max(softmax(row), floor)` written into `out`.
fn neg_log_prob(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
    let log_z = m + z.ln();
    for (o, x) in out.iter_mut().zip(row) {
        let lp = x - log_z;
        *o = -lp.max(PROB_FLOOR.ln());
    }
}

/// Softmax of a logit row with every probability floored at
/// `PROB_FLOOR` and renormalized; equals the Gibbs distribution of the
/// unary potential.
fn unary_q(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    let (inv, mut z2) = (1.0 / z, 0.0);
    for o in out.iter_mut() {
        *o = (*o * inv).max(PROB_FLOOR);
        z2 += *o;
    }
    let inv2 = 1.0 / z2;
    for o in out.iter_mut() {
        *o *= inv2;
    }
}

fn unary_q_matrix(logits: &Array2<f64>) -> Array2<f64> {
    let logits = logits.as_standard_layout();
    let (n, k) = logits.dim();
    let src = logits.as_slice().expect("standard layout");
    let mut q = vec![0.0; n * k];
    par::for_each_chunk(&mut q, ROWS_PER_TASK * k, |task, chunk| {
        for (r, out) in chunk.chunks_mut(k).enumerate() {
            let i = task * ROWS_PER_TASK + r;
            unary_q(&src[i * k..(i + 1) * k], out);
        }
    });
    Array2::from_shape_vec((n, k), q).expect("shape matches buffer")
}

/// Normalized `exp(-energy)` written into `out`.
fn gibbs(energy: &[f64], out: &mut [f64]) {
    let m = energy.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, e) in out.iter_mut().zip(energy) {
        *o = (m - e).exp();
        z += *o;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Unary potentials `-log P(x_i = D_k)` for an `N x K` logit matrix.
pub fn unary(logits: &Array2<f64>) -> Array2<f64> {
    let logits = logits.as_standard_layout();
    let (n, k) = logits.dim();
    let src = logits.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * k];
    for (row, dst) in src.chunks(k.max(1)).zip(out.chunks_mut(k.max(1))) {
        neg_log_prob(row, dst);
    }
    Array2::from_shape_vec((n, k), out).expect("shape matches buffer")
}

/// Gaussian semantic kernel `exp(-||a - b||^2 / (2 theta^2))`.
#[inline]
pub fn semantic_kernel(a: &[f64], b: &[f64], theta: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * theta * theta)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrfMode {
    /// Pairs within a Chebyshev pixel radius.
    Neighborhood,
    /// All ordered pixel pairs of an agent (small frames only).
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfParams {
    pub theta: f64,
    pub w_intra: f64,
    pub w_cross: f64,
    pub neighborhood_radius: usize,
    pub iterations: usize,
    pub mode: CrfMode,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            w_intra: 0.02,
            w_cross: 0.02,
            neighborhood_radius: 2,
            iterations: 5,
            mode: CrfMode::Neighborhood,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return invalid("theta must be positive");
        }
        if !(self.w_intra >= 0.0 && self.w_cross >= 0.0) {
            return invalid("CRF weights must be non-negative");
        }
        Ok(())
    }

    /// Whether refinement changes anything beyond normalizing the unary.
    fn is_active(&self) -> bool {
        self.iterations > 0 && (self.w_intra > 0.0 || self.w_cross > 0.0)
    }

    fn weight(&self, same_domain: bool) -> f64 {
        if same_domain {
            self.w_intra
        } else {
            self.w_cross
        }
    }
}

/// Pairwise potential between two pixels sharing one set of bins.
pub fn pairwise(
    label_i: usize,
    label_j: usize,
    s_i: &[f64],
    s_j: &[f64],
    same_domain: bool,
    params: &CrfParams,
    bins: &DepthBins,
) -> f64 {
    if label_i == label_j {
        return 0.0;
    }
    let w = params.weight(same_domain);
    w * semantic_kernel(s_i, s_j, params.theta) * (bins.centers[label_i] - bins.centers[label_j]).abs()
}

/// Per-agent marginals `Q_i` over depth bins, one row per visible pixel.
#[derive(Clone, Debug)]
pub struct DepthDistribution {
    pub agent: AgentId,
    pub q: Array2<f64>,
    pub bins: DepthBins,
}

impl DepthDistribution {
    /// Normalized unary distribution of a frame.
    pub fn from_unary(frame: &AgentFrame, bins: &DepthBins) -> Result<Self> {
        if frame.num_bins() != bins.k() {
            return invalid(format!("frame has {} depth logits per pixel, bins have {}", frame.num_bins(), bins.k()));
        }
        Ok(Self {
            agent: frame.agent,
            q: unary_q_matrix(&frame.unary_logits),
            bins: bins.clone(),
        })
    }

    /// Point mass on the given bin of every pixel.
    pub fn delta(agent: AgentId, labels: &[usize], bins: &DepthBins) -> Self {
        let mut q = Array2::zeros((labels.len(), bins.k()));
        for (i, &l) in labels.iter().enumerate() {
            q[(i, l)] = 1.0;
        }
        Self {
            agent,
            q,
            bins: bins.clone(),
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.q.nrows()
    }

    pub fn expected_depth(&self, slot: usize) -> f64 {
        self.q.row(slot).iter().zip(&self.bins.centers).map(|(p, d)| p * d).sum()
    }

    pub fn argmax(&self, slot: usize) -> usize {
        let row = self.q.row(slot);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        best
    }

    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.n_pixels()).map(|i| self.argmax(i)).collect()
    }
}

/// One cross-agent pair: slot `i` of agent `a`, slot `j` of agent `b`, and
/// the affine map from `b`'s depth along pixel `j` to depth seen from `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrEntry {
    pub i: usize,
    pub j: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl CorrEntry {
    #[inline]
    fn depth_in_a(&self, d_b: f64) -> f64 {
        self.alpha + self.beta * d_b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub agent_a: AgentId,
    pub agent_b: AgentId,
    pub entries: Vec<CorrEntry>,
}

impl Correspondence {
    pub fn same_domain(&self) -> bool {
        self.agent_a.domain() == self.agent_b.domain()
    }

    /// `((agent_a, pixel_i), (agent_b, pixel_j))` with linear pixel indices.
    pub fn pixel_pairs(&self, frame_a: &AgentFrame, frame_b: &AgentFrame) -> Vec<((AgentId, usize), (AgentId, usize))> {
        self.entries
            .iter()
            .map(|e| ((self.agent_a, frame_a.pixels[e.i]), (self.agent_b, frame_b.pixels[e.j])))
            .collect()
    }
}

/// Pairs every visible pixel of `a` with the visible pixel of `b` that
/// sees the same point, using `a`'s current expected depth.
pub fn cross_domain_correspondence(
    frame_a: &AgentFrame,
    frame_b: &AgentFrame,
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    dist_a: &DepthDistribution,
) -> Result<Correspondence> {
    if frame_a.agent == frame_b.agent {
        return invalid("correspondence needs two distinct agents");
    }
    if dist_a.n_pixels() != frame_a.n_visible() {
        return invalid("depth distribution does not match frame a");
    }
    let eye_b = cam_b.center();
    let alpha = cam_a.to_camera(&eye_b).z;
    let found = par::map_range(frame_a.n_visible(), |i| {
        let (u, v) = frame_a.pixel_uv(i);
        let d = dist_a.expected_depth(i);
        let x = cam_a.unproject_unchecked(u as f64 + 0.5, v as f64 + 0.5, d);
        let p = cam_b.project(&x)?;
        if !cam_b.in_image(p.u, p.v) {
            return None;
        }
        let (ub, vb) = (p.u.floor() as usize, p.v.floor() as usize);
        let j = frame_b.slot(ub, vb)?;
        let ray = cam_b.pixel_ray(ub as f64 + 0.5, vb as f64 + 0.5);
        let beta = (cam_a.rotation * ray).z;
        Some(CorrEntry { i, j, alpha, beta })
    });
    Ok(Correspondence {
        agent_a: frame_a.agent,
        agent_b: frame_b.agent,
        entries: found.into_iter().flatten().collect(),
    })
}

/// One agent's CRF inputs.
#[derive(Clone, Copy)]
pub struct CrfAgent<'a> {
    pub frame: &'a AgentFrame,
    pub bins: &'a DepthBins,
}

/// Compressed adjacency: neighbours of node `i` are
/// `nbr[off[i]..off[i + 1]]` with kernel values in `kern`.
struct Graph {
    off: Vec<usize>,
    nbr: Vec<u32>,
    kern: Vec<f64>,
}

impl Graph {
    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.off[i]..self.off[i + 1]
    }
}

fn check_exact_cap(frame: &AgentFrame, params: &CrfParams) -> Result<()> {
    if params.mode == CrfMode::Exact && frame.n_visible() > EXACT_MODE_MAX_PIXELS {
        return Err(Error::Capacity(format!(
            "exact CRF mode supports at most {EXACT_MODE_MAX_PIXELS} pixels per agent, {} has {}",
            frame.agent,
            frame.n_visible()
        )));
    }
    Ok(())
}

fn in_neighborhood(frame: &AgentFrame, i: usize, j: usize, params: &CrfParams) -> bool {
    match params.mode {
        CrfMode::Exact => true,
        CrfMode::Neighborhood => {
            let (ui, vi) = frame.pixel_uv(i);
            let (uj, vj) = frame.pixel_uv(j);
            ui.abs_diff(uj).max(vi.abs_diff(vj)) <= params.neighborhood_radius
        }
    }
}

fn intra_graph(frame: &AgentFrame, params: &CrfParams) -> Result<Graph> {
    check_exact_cap(frame, params)?;
    let n = frame.n_visible();
    let theta = params.theta;
    let lists: Vec<Vec<(u32, f64)>> = par::map_range(n, |i| {
        let fi = feature_row(frame, i);
        let mut out = Vec::new();
        let mut push = |j: usize| {
            if j != i {
                out.push((j as u32, semantic_kernel(fi, feature_row(frame, j), theta)));
            }
        };
        match params.mode {
            CrfMode::Exact => (0..n).for_each(&mut push),
            CrfMode::Neighborhood => {
                let r = params.neighborhood_radius;
                let (u, v) = frame.pixel_uv(i);
                for vv in v.saturating_sub(r)..=(v + r).min(frame.height - 1) {
                    for uu in u.saturating_sub(r)..=(u + r).min(frame.width - 1) {
                        if let Some(j) = frame.slot(uu, vv) {
                            push(j);
                        }
                    }
                }
            }
        }
        out
    });
    let mut off = Vec::with_capacity(n + 1);
    off.push(0);
    let mut nbr = Vec::new();
    let mut kern = Vec::new();
    for l in lists {
        for (j, k) in l {
            nbr.push(j);
            kern.push(k);
        }
        off.push(nbr.len());
    }
    Ok(Graph { off, nbr, kern })
}

fn agent_index(agents: &[CrfAgent<'_>], id: AgentId) -> Result<usize> {
    agents
        .iter()
        .position(|a| a.frame.agent == id)
        .ok_or_else(|| Error::NotFound(format!("correspondence refers to agent {id} which is not in the CRF")))
}

fn check_inputs(agents: &[CrfAgent<'_>], corrs: &[Correspondence], params: &CrfParams) -> Result<Vec<(usize, usize)>> {
    params.validate()?;
    for a in agents {
        if a.frame.num_bins() != a.bins.k() {
            return invalid(format!("{}: frame has {} logits per pixel, bins have {}", a.frame.agent, a.frame.num_bins(), a.bins.k()));
        }
        check_exact_cap(a.frame, params)?;
    }
    let mut idx = Vec::with_capacity(corrs.len());
    for c in corrs {
        let ia = agent_index(agents, c.agent_a)?;
        let ib = agent_index(agents, c.agent_b)?;
        let (na, nb) = (agents[ia].frame.n_visible(), agents[ib].frame.n_visible());
        if c.entries.iter().any(|e| e.i >= na || e.j >= nb) {
            return invalid(format!("correspondence {} -> {} has out-of-range slots", c.agent_a, c.agent_b));
        }
        idx.push((ia, ib));
    }
    Ok(idx)
}

fn check_labels(agents: &[CrfAgent<'_>], labels: &[Vec<usize>]) -> Result<()> {
    if labels.len() != agents.len() {
        return invalid("one labeling per agent is required");
    }
    for (a, l) in agents.iter().zip(labels) {
        if l.len() != a.frame.n_visible() || l.iter().any(|&x| x >= a.bins.k()) {
            return invalid(format!("labeling for {} has wrong length or bin index", a.frame.agent));
        }
    }
    Ok(())
}

fn feature_row(frame: &AgentFrame, i: usize) -> &[f64] {
    frame.features.row(i).to_slice().expect("feature rows are contiguous")
}

fn cross_kernel(a: &AgentFrame, i: usize, b: &AgentFrame, j: usize, theta: f64) -> f64 {
    semantic_kernel(feature_row(a, i), feature_row(b, j), theta)
}

/// Total energy of a labeling (one bin index per visible pixel per agent),
/// using neighbour lists.
pub fn crf_energy(
    labels: &[Vec<usize>],
    agents: &[CrfAgent<'_>],
    corrs: &[Correspondence],
    params: &CrfParams,
) -> Result<f64> {
    let idx = check_inputs(agents, corrs, params)?;
    check_labels(agents, labels)?;
    let mut e = 0.0;
    for (a, lab) in agents.iter().zip(labels) {
        let psi = unary(&a.frame.unary_logits);
        e += lab.iter().enumerate().map(|(i, &l)| psi[(i, l)]).sum::<f64>();
        if params.w_intra > 0.0 {
            let g = intra_graph(a.frame, params)?;
            let d = &a.bins.centers;
            let mut s = 0.0;
            for i in 0..lab.len() {
                for t in g.range(i) {
                    s += g.kern[t] * (d[lab[i]] - d[lab[g.nbr[t] as usize]]).abs();
                }
            }
            e += params.w_intra * s;
        }
    }
    for (c, &(ia, ib)) in corrs.iter().zip(&idx) {
        let w = params.weight(c.same_domain());
        if w == 0.0 {
            continue;
        }
        let (fa, fb) = (agents[ia].frame, agents[ib].frame);
        let (da, db) = (&agents[ia].bins.centers, &agents[ib].bins.centers);
        for en in &c.entries {
            let k = cross_kernel(fa, en.i, fb, en.j, params.theta);
            e += w * k * (da[labels[ia][en.i]] - en.depth_in_a(db[labels[ib][en.j]])).abs();
        }
    }
    Ok(e)
}

/// Reference energy by direct double loop over all pixel pairs.
pub fn crf_energy_naive(
    labels: &[Vec<usize>],
    agents: &[CrfAgent<'_>],
    corrs: &[Correspondence],
    params: &CrfParams,
) -> Result<f64> {
    let idx = check_inputs(agents, corrs, params)?;
    check_labels(agents, labels)?;
    let mut e = 0.0;
    for (a, lab) in agents.iter().zip(labels) {
        let psi = unary(&a.frame.unary_logits);
        let n = lab.len();
        for i in 0..n {
            e += psi[(i, lab[i])];
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && in_neighborhood(a.frame, i, j, params) {
                    e += pairwise(
                        lab[i],
                        lab[j],
                        &a.frame.features.row(i).to_vec(),
                        &a.frame.features.row(j).to_vec(),
                        true,
                        params,
                        a.bins,
                    );
                }
            }
        }
    }
    for (c, &(ia, ib)) in corrs.iter().zip(&idx) {
        let w = params.weight(c.same_domain());
        for en in &c.entries {
            let fi = agents[ia].frame.features.row(en.i).to_vec();
            let fj = agents[ib].frame.features.row(en.j).to_vec();
            let d_a = agents[ia].bins.centers[labels[ia][en.i]];
            let d_b = agents[ib].bins.centers[labels[ib][en.j]];
            e += w * semantic_kernel(&fi, &fj, params.theta) * (d_a - en.alpha - en.beta * d_b).abs();
        }
    }
    Ok(e)
}

/// Adds `sum_s w_s |q - x_s|` to `out` for every query `q`. Both `support`
/// and `queries` must be ascending.
pub fn add_expected_abs_dev(support: &[f64], weights: &[f64], queries: &[f64], out: &mut [f64]) {
    let w_tot: f64 = weights.iter().sum();
    let s_tot: f64 = support.iter().zip(weights).map(|(x, w)| x * w).sum();
    let (mut p, mut w_le, mut s_le) = (0, 0.0, 0.0);
    for (o, &q) in out.iter_mut().zip(queries) {
        while p < support.len() && support[p] <= q {
            w_le += weights[p];
            s_le += weights[p] * support[p];
            p += 1;
        }
        *o += q * w_le - s_le + (s_tot - s_le) - q * (w_tot - w_le);
    }
}

/// [`add_expected_abs_dev`] with the queries equal to the (strictly
/// ascending) support.
fn add_expected_abs_dev_at_support(support: &[f64], weights: &[f64], out: &mut [f64]) {
    let w_tot: f64 = weights.iter().sum();
    let s_tot: f64 = support.iter().zip(weights).map(|(x, w)| x * w).sum();
    let (mut w_le, mut s_le) = (0.0, 0.0);
    for ((o, &q), &w) in out.iter_mut().zip(support).zip(weights) {
        w_le += w;
        s_le += w * q;
        *o += q * w_le - s_le + (s_tot - s_le) - q * (w_tot - w_le);
    }
}

/// CSR index from node to the cross entries touching it.
struct Incidence {
    off: Vec<usize>,
    items: Vec<(u32, u32)>,
}

impl Incidence {
    fn build(n: usize, pairs: impl Iterator<Item = (usize, (u32, u32))>) -> Self {
        let mut buckets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n];
        for (node, it) in pairs {
            buckets[node].push(it);
        }
        let mut off = Vec::with_capacity(n + 1);
        off.push(0);
        let mut items = Vec::new();
        for b in buckets {
            items.extend(b);
            off.push(items.len());
        }
        Self { off, items }
    }

    fn get(&self, i: usize) -> &[(u32, u32)] {
        &self.items[self.off[i]..self.off[i + 1]]
    }
}

/// Mean-field refinement of all agents' depth distributions jointly.
///
/// Each iteration is a parallel (Jacobi) update of every pixel from the
/// previous iterate: `Q_i(l) ∝ exp(-psi_u(l) - m_i(l))`, where `m_i` is
/// the expected pairwise energy of label `l` under the neighbours' current
/// marginals. Every pair term feeds both of its endpoints, so an intra-agent
/// pair (present in the energy as both `(i, j)` and `(j, i)`) contributes
/// twice. With `iterations = 0`, or all weights zero, the result is the
/// normalized unary.
pub fn mean_field_refine(
    agents: &[CrfAgent<'_>],
    corrs: &[Correspondence],
    params: &CrfParams,
) -> Result<Vec<DepthDistribution>> {
    let terms = agents.iter().map(|a| AgentTerms::new(*a, params)).collect::<Result<Vec<_>>>()?;
    mean_field_refine_with(agents, &terms.iter().collect::<Vec<_>>(), corrs, params)
}

/// Parts of one agent's mean-field update that depend only on its own
/// frame: unary potentials, the initial distribution and the intra-agent
/// graph. Build once and share across every agent set the agent joins.
pub struct AgentTerms {
    agent: AgentId,
    params: CrfParams,
    q0: Array2<f64>,
    psi: Option<Array2<f64>>,
    graph: Option<Graph>,
}

impl AgentTerms {
    pub fn new(a: CrfAgent<'_>, params: &CrfParams) -> Result<Self> {
        params.validate()?;
        if a.frame.num_bins() != a.bins.k() {
            return invalid(format!("{}: frame has {} logits per pixel, bins have {}", a.frame.agent, a.frame.num_bins(), a.bins.k()));
        }
        check_exact_cap(a.frame, params)?;
        let active = params.is_active();
        Ok(Self {
            agent: a.frame.agent,
            params: params.clone(),
            q0: unary_q_matrix(&a.frame.unary_logits),
            psi: active.then(|| unary(&a.frame.unary_logits)),
            graph: if active && params.w_intra > 0.0 { Some(intra_graph(a.frame, params)?) } else { None },
        })
    }
}

/// [`mean_field_refine`] with precomputed per-agent terms, one per agent
/// in the same order, built with the same `params`.
pub fn mean_field_refine_with(
    agents: &[CrfAgent<'_>],
    terms: &[&AgentTerms],
    corrs: &[Correspondence],
    params: &CrfParams,
) -> Result<Vec<DepthDistribution>> {
    let idx = check_inputs(agents, corrs, params)?;
    if terms.len() != agents.len()
        || agents.iter().zip(terms).any(|(a, t)| t.agent != a.frame.agent || t.q0.nrows() != a.frame.n_visible() || t.params != *params)
    {
        return invalid("precomputed CRF terms do not match the agents or parameters");
    }
    let mut qs: Vec<Array2<f64>> = terms.iter().map(|t| t.q0.clone()).collect();

    if params.is_active() {
        let psis: Vec<&Array2<f64>> = terms.iter().map(|t| t.psi.as_ref().expect("built for active params")).collect();
        let graphs: Vec<Option<&Graph>> = terms.iter().map(|t| t.graph.as_ref()).collect();
        // per-entry coupling weight w * kernel
        let coupling: Vec<Vec<f64>> = corrs
            .iter()
            .zip(&idx)
            .map(|(c, &(ia, ib))| {
                let w = params.weight(c.same_domain());
                c.entries
                    .iter()
                    .map(|e| w * cross_kernel(agents[ia].frame, e.i, agents[ib].frame, e.j, params.theta))
                    .collect()
            })
            .collect();
        let outgoing: Vec<Incidence> = (0..agents.len())
            .map(|a| {
                let it = corrs.iter().enumerate().filter(|(c, _)| idx[*c].0 == a).flat_map(|(c, corr)| {
                    corr.entries.iter().enumerate().map(move |(e, en)| (en.i, (c as u32, e as u32)))
                });
                Incidence::build(agents[a].frame.n_visible(), it)
            })
            .collect();
        let incoming: Vec<Incidence> = (0..agents.len())
            .map(|b| {
                let it = corrs.iter().enumerate().filter(|(c, _)| idx[*c].1 == b).flat_map(|(c, corr)| {
                    corr.entries.iter().enumerate().map(move |(e, en)| (en.j, (c as u32, e as u32)))
                });
                Incidence::build(agents[b].frame.n_visible(), it)
            })
            .collect();

        let mut spare = qs.clone();
        for _ in 0..params.iterations {
            let prev = &qs;
            for (a, next) in spare.iter_mut().enumerate() {
                {
                    let bins_a = &agents[a].bins.centers;
                    let k = bins_a.len();
                    let flat = next.as_slice_mut().expect("iterates are contiguous");
                    par::for_each_chunk(flat, ROWS_PER_TASK * k, |task, chunk| {
                        let mut msg = vec![0.0; k];
                        let mut mix = vec![0.0; k];
                        let mut sup: Vec<f64> = Vec::new();
                        let mut wts: Vec<f64> = Vec::new();
                        let mut energy = vec![0.0; k];
                        for (r, out) in chunk.chunks_mut(k).enumerate() {
                            let i = task * ROWS_PER_TASK + r;
                            msg.iter_mut().for_each(|m| *m = 0.0);
                            if let Some(g) = &graphs[a] {
                                let rg = g.range(i);
                                if !rg.is_empty() {
                                    mix.iter_mut().for_each(|m| *m = 0.0);
                                    let prev_a = prev[a].as_slice().expect("iterates are contiguous");
                                    for t in rg {
                                        let c = 2.0 * params.w_intra * g.kern[t];
                                        let j = g.nbr[t] as usize;
                                        for (m, q) in mix.iter_mut().zip(&prev_a[j * k..(j + 1) * k]) {
                                            *m += c * q;
                                        }
                                    }
                                    add_expected_abs_dev_at_support(bins_a, &mix, &mut msg);
                                }
                            }
                            for &(c, e) in outgoing[a].get(i) {
                                let (c, e) = (c as usize, e as usize);
                                let en = &corrs[c].entries[e];
                                let w = coupling[c][e];
                                if w == 0.0 {
                                    continue;
                                }
                                let ib = idx[c].1;
                                let qj = prev[ib].row(en.j);
                                sup.clear();
                                wts.clear();
                                for (d, q) in agents[ib].bins.centers.iter().zip(qj.iter()) {
                                    sup.push(en.depth_in_a(*d));
                                    wts.push(w * q);
                                }
                                if en.beta < 0.0 {
                                    sup.reverse();
                                    wts.reverse();
                                }
                                add_expected_abs_dev(&sup, &wts, bins_a, &mut msg);
                            }
                            for &(c, e) in incoming[a].get(i) {
                                let (c, e) = (c as usize, e as usize);
                                let en = &corrs[c].entries[e];
                                let w = coupling[c][e];
                                if w == 0.0 {
                                    continue;
                                }
                                let ia = idx[c].0;
                                let qi = prev[ia].row(en.i);
                                if en.beta == 0.0 {
                                    // compatibility does not depend on this pixel's label
                                    continue;
                                }
                                sup.clear();
                                wts.clear();
                                for (d, q) in agents[ia].bins.centers.iter().zip(qi.iter()) {
                                    sup.push((d - en.alpha) / en.beta);
                                    wts.push(w * en.beta.abs() * q);
                                }
                                if en.beta < 0.0 {
                                    sup.reverse();
                                    wts.reverse();
                                }
                                add_expected_abs_dev(&sup, &wts, bins_a, &mut msg);
                            }
                            let psi = psis[a].row(i);
                            for ((en, p), m) in energy.iter_mut().zip(psi.iter()).zip(&msg) {
                                *en = p + m;
                            }
                            gibbs(&energy, out);
                        }
                    });
                }
            }
            std::mem::swap(&mut qs, &mut spare);
        }
    }

    Ok(agents
        .iter()
        .zip(qs)
        .map(|(a, q)| DepthDistribution {
            agent: a.frame.agent,
            q,
            bins: a.bins.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_frame(agent: AgentId, w: usize, h: usize, logits: &[Vec<f64>], feats: &[Vec<f64>]) -> AgentFrame {
        let k = logits[0].len();
        let c = feats[0].len();
        let mut f = Array3::zeros((h, w, c));
        let mut l = Array3::zeros((h, w, k));
        for p in 0..w * h {
            for ch in 0..c {
                f[(p / w, p % w, ch)] = feats[p][ch];
            }
            for b in 0..k {
                l[(p / w, p % w, b)] = logits[p][b];
            }
        }
        AgentFrame::from_dense(agent, &f, &Array2::from_elem((h, w), 5.0), &Array2::from_elem((h, w), true), &l).unwrap()
    }

    #[test]
    fn bins_midpoints_and_spacing() {
        let b = make_depth_bins(0.0, 10.0, 2).unwrap();
        assert_eq!(b.centers, vec![2.5, 7.5]);
        let b = make_depth_bins(1.0, 121.0, 120).unwrap();
        assert_eq!(b.spacing(), 1.0);
        for w in b.centers.windows(2) {
            assert_relative_eq!(w[1] - w[0], 1.0, epsilon = 1e-12);
        }
        let g = make_depth_bins(1.0, 101.0, 100).unwrap();
        assert_eq!((g.k(), g.centers[0], g.centers[99]), (100, 1.5, 100.5));
        assert!(make_depth_bins(5.0, 5.0, 3).is_err());
        assert!(make_depth_bins(1.0, 5.0, 1).is_err());
        assert_eq!(g.bin_of(101.0), Some(99));
        assert_eq!(g.bin_of(0.5), None);
    }

    #[test]
    fn unary_examples() {
        let u = unary(&Array2::zeros((1, 4)));
        for x in u.iter() {
            assert_relative_eq!(*x, 4f64.ln(), epsilon = 1e-12);
        }
        let hot = Array2::from_shape_vec((1, 3), vec![0.0, 50.0, 0.0]).unwrap();
        let u = unary(&hot);
        assert!(u[(0, 1)] < 1e-20);
        assert!(u[(0, 0)] <= -PROB_FLOOR.ln() + 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        let u = unary(&Array2::from_shape_vec((1, 7), row.clone()).unwrap());
        for (k, x) in row.iter().enumerate() {
            assert_relative_eq!(u[(0, k)], -(x.exp() / z).ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn pairwise_examples() {
        let bins = make_depth_bins(0.0, 10.0, 2).unwrap();
        let p = CrfParams {
            theta: 0.7,
            w_intra: 1.0,
            w_cross: 3.0,
            ..Default::default()
        };
        let s = [0.3, -1.0];
        assert_eq!(pairwise(1, 1, &s, &[9.0, 9.0], true, &p, &bins), 0.0);
        assert_relative_eq!(pairwise(0, 1, &s, &s, true, &p, &bins), 5.0, epsilon = 1e-12);
        // ||s_i - s_j||^2 = 2 theta^2
        let t = [0.3 + 0.7, -1.0 + 0.7];
        assert_relative_eq!(pairwise(0, 1, &s, &t, true, &p, &bins), 5.0 * (-1f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(pairwise(0, 1, &s, &t, false, &p, &bins), 15.0 * (-1f64).exp(), epsilon = 1e-12);
        assert_eq!(pairwise(0, 1, &s, &t, true, &p, &bins), pairwise(1, 0, &t, &s, true, &p, &bins));
    }

    #[test]
    fn energy_single_pixel_is_unary() {
        let f = tiny_frame(AgentId::Vehicle, 1, 1, &[vec![0.2, 1.0, -0.5]], &[vec![1.0]]);
        let bins = make_depth_bins(0.0, 3.0, 3).unwrap();
        let a = [CrfAgent { frame: &f, bins: &bins }];
        let psi = unary(&f.unary_logits);
        let p = CrfParams { w_intra: 1.0, ..Default::default() };
        for l in 0..3 {
            assert_relative_eq!(crf_energy(&[vec![l]], &a, &[], &p).unwrap(), psi[(0, l)], epsilon = 1e-12);
        }
    }

    #[test]
    fn energy_two_by_one_by_hand() {
        // logits give probabilities (0.5, 0.5) and (0.2, 0.8)
        let l0 = vec![0.0, 0.0];
        let l1 = vec![0.2f64.ln(), 0.8f64.ln()];
        let f = tiny_frame(AgentId::Vehicle, 2, 1, &[l0, l1], &[vec![0.0], vec![1.0]]);
        let bins = make_depth_bins(0.0, 4.0, 2).unwrap(); // centers 1, 3
        let p = CrfParams {
            theta: 1.0,
            w_intra: 0.5,
            mode: CrfMode::Exact,
            ..Default::default()
        };
        let a = [CrfAgent { frame: &f, bins: &bins }];
        let k = (-0.5f64).exp();
        let pair = 2.0 * 0.5 * k * 2.0; // both orderings, |1 - 3| = 2
        let cases = [
            ([0, 0], -(0.5f64.ln()) - 0.2f64.ln()),
            ([0, 1], -(0.5f64.ln()) - 0.8f64.ln() + pair),
            ([1, 0], -(0.5f64.ln()) - 0.2f64.ln() + pair),
            ([1, 1], -(0.5f64.ln()) - 0.8f64.ln()),
        ];
        for (lab, want) in cases {
            let got = crf_energy(&[lab.to_vec()], &a, &[], &p).unwrap();
            assert_relative_eq!(got, want, epsilon = 1e-12);
            assert_relative_eq!(crf_energy_naive(&[lab.to_vec()], &a, &[], &p).unwrap(), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_mode_capacity() {
        let n = 9;
        let logits: Vec<Vec<f64>> = (0..n * n).map(|_| vec![0.0, 0.0]).collect();
        let feats: Vec<Vec<f64>> = (0..n * n).map(|_| vec![0.0]).collect();
        let f = tiny_frame(AgentId::Vehicle, n, n, &logits, &feats);
        let bins = make_depth_bins(0.0, 2.0, 2).unwrap();
        let p = CrfParams { mode: CrfMode::Exact, ..Default::default() };
        let err = crf_energy(&[vec![0; n * n]], &[CrfAgent { frame: &f, bins: &bins }], &[], &p).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn abs_dev_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(1..12);
            let mut sup: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            sup.sort_by(f64::total_cmp);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mut q: Vec<f64> = (0..8).map(|_| rng.gen_range(-6.0..6.0)).collect();
            q.sort_by(f64::total_cmp);
            let mut out = vec![0.0; q.len()];
            add_expected_abs_dev(&sup, &w, &q, &mut out);
            for (o, qq) in out.iter().zip(&q) {
                let want: f64 = sup.iter().zip(&w).map(|(x, ww)| ww * (qq - x).abs()).sum();
                assert_relative_eq!(*o, want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn shared_terms_give_the_same_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let feats: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.gen::<f64>()]).collect();
        let f = tiny_frame(AgentId::Vehicle, 4, 3, &logits, &feats);
        let bins = make_depth_bins(1.0, 6.0, 5).unwrap();
        let a = [CrfAgent { frame: &f, bins: &bins }];
        let p = CrfParams { w_intra: 2.0, iterations: 4, ..Default::default() };
        let t = AgentTerms::new(a[0], &p).unwrap();
        let want = mean_field_refine(&a, &[], &p).unwrap();
        assert_eq!(mean_field_refine_with(&a, &[&t], &[], &p).unwrap()[0].q, want[0].q);
        let other = CrfParams { theta: 0.3, ..p.clone() };
        assert!(mean_field_refine_with(&a, &[&t], &[], &other).is_err());
        assert!(mean_field_refine_with(&a, &[], &[], &p).is_err());
    }

    #[test]
    fn zero_weights_return_normalized_unary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<Vec<f64>> = (0..12).map(|_| (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let feats: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.gen::<f64>()]).collect();
        let f = tiny_frame(AgentId::Vehicle, 4, 3, &logits, &feats);
        let bins = make_depth_bins(1.0, 6.0, 5).unwrap();
        let base = DepthDistribution::from_unary(&f, &bins).unwrap();
        for iterations in [0, 1, 7] {
            let p = CrfParams {
                w_intra: 0.0,
                w_cross: 0.0,
                iterations,
                ..Default::default()
            };
            let out = mean_field_refine(&[CrfAgent { frame: &f, bins: &bins }], &[], &p).unwrap();
            assert_eq!(out[0].q, base.q);
        }
        for row in base.q.axis_iter(Axis(0)) {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rows_stay_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let feats: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        let f = tiny_frame(AgentId::Vehicle, 6, 5, &logits, &feats);
        let bins = make_depth_bins(1.0, 7.0, 6).unwrap();
        let p = CrfParams { w_intra: 0.8, iterations: 4, ..Default::default() };
        let out = mean_field_refine(&[CrfAgent { frame: &f, bins: &bins }], &[], &p).unwrap();
        for row in out[0].q.axis_iter(Axis(0)) {
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn identity_rig_pairs_pixel_with_itself() {
        let cam = crate::geometry::make_camera(60.0, 8, 6, nalgebra::Vector3::new(0.0, 0.0, -1.0), 0.0, 0.0, 0.0).unwrap();
        let logits: Vec<Vec<f64>> = (0..48).map(|i| vec![(i % 3) as f64, 0.0, 1.0]).collect();
        let feats: Vec<Vec<f64>> = (0..48).map(|_| vec![0.0]).collect();
        let fa = tiny_frame(AgentId::UavR, 8, 6, &logits, &feats);
        let fb = tiny_frame(AgentId::UavL, 8, 6, &logits, &feats);
        let bins = make_depth_bins(2.0, 20.0, 3).unwrap();
        let d = DepthDistribution::from_unary(&fa, &bins).unwrap();
        let c = cross_domain_correspondence(&fa, &fb, &cam, &cam, &d).unwrap();
        assert_eq!(c.entries.len(), 48);
        for e in &c.entries {
            assert_eq!(e.i, e.j);
            assert_relative_eq!(e.alpha, 0.0, epsilon = 1e-12);
            assert_relative_eq!(e.beta, 1.0, epsilon = 1e-12);
        }
        assert!(c.same_domain());
    }

    #[test]
    fn reprojection_outside_image_is_skipped() {
        let cam_a = crate::geometry::make_camera(60.0, 8, 6, nalgebra::Vector3::zeros(), 0.0, 0.0, 0.0).unwrap();
        // b looks the other way
        let cam_b = crate::geometry::make_camera(60.0, 8, 6, nalgebra::Vector3::zeros(), 0.0, 180.0, 0.0).unwrap();
        let logits: Vec<Vec<f64>> = (0..48).map(|_| vec![0.0, 0.0]).collect();
        let feats: Vec<Vec<f64>> = (0..48).map(|_| vec![0.0]).collect();
        let fa = tiny_frame(AgentId::Vehicle, 8, 6, &logits, &feats);
        let fb = tiny_frame(AgentId::UavR, 8, 6, &logits, &feats);
        let bins = make_depth_bins(2.0, 20.0, 2).unwrap();
        let d = DepthDistribution::from_unary(&fa, &bins).unwrap();
        let c = cross_domain_correspondence(&fa, &fb, &cam_a, &cam_b, &d).unwrap();
        assert!(c.entries.is_empty());
    }

    #[test]
    fn noiseless_unary_keeps_truth() {
        // sharp unary, identical features: argmax stays at the truth
        let truth = [0usize, 1, 2, 1, 0, 2];
        let logits: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| (0..3).map(|k| if k == t { 0.0 } else { -200.0 }).collect())
            .collect();
        let feats: Vec<Vec<f64>> = (0..6).map(|_| vec![0.0]).collect();
        let f = tiny_frame(AgentId::Vehicle, 3, 2, &logits, &feats);
        let bins = make_depth_bins(0.0, 3.0, 3).unwrap();
        let p = CrfParams { w_intra: 0.5, iterations: 10, ..Default::default() };
        let out = mean_field_refine(&[CrfAgent { frame: &f, bins: &bins }], &[], &p).unwrap();
        assert_eq!(out[0].argmax_labels(), truth.to_vec());
    }
}
