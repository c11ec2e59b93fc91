//! Cross-domain fusion of two BEV feature grids.
//!
//! Each domain's grid is average-pooled into a four-level pyramid and every
//! level is resampled back to full size. Per level, the two domains are
//! concatenated along channels and compared with each domain's own grid;
//! the resulting similarities weight the levels into one enhanced grid per
//! domain. Attention between the two enhanced grids then lets each domain
//! borrow the other's features, and a convex blend gives the fused grid.

use ndarray::{s, Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::bevlift::BevFeature;
use crate::error::{invalid, Result};

pub const LEVELS: usize = 4;

/// Four pooled levels (factors 1, 2, 4, 8) and their full-size resamples.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Array3<f64>>,
    pub rescaled: Vec<Array3<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub beta: [f64; LEVELS],
    pub omega: [f64; LEVELS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Cosine similarity against the mean of the two cascade halves.
    Cosine,
    /// `<f, f_veh^m> / ||f||^2`, clamped to `[-1, 1]`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOutput {
    /// Domain grid plus the attention update `att - f_sum`.
    Residual,
    /// Attention output alone.
    Replace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Key dimension used for score scaling; `None` means the channel count.
    pub d_k: Option<usize>,
    pub token_pool: usize,
    pub lambda: f64,
    /// Token neighbourhood (Chebyshev, in tokens) each query attends to in
    /// both domains; `None` attends to every token.
    pub window: Option<usize>,
    pub output: AttentionOutput,
    pub correlation: CorrelationMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_k: None,
            token_pool: 4,
            lambda: 0.5,
            window: Some(0),
            output: AttentionOutput::Residual,
            correlation: CorrelationMode::Cosine,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == Some(0) {
            return invalid("d_k must be at least 1");
        }
        if self.token_pool == 0 {
            return invalid("token_pool must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return invalid(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

fn dims2(a: &Array3<f64>) -> (usize, usize) {
    let (x, y, _) = a.dim();
    (x, y)
}

/// Mean over non-overlapping `s x s` blocks.
pub fn avg_pool(f: &Array3<f64>, s: usize) -> Result<Array3<f64>> {
    let (nx, ny, c) = f.dim();
    if s == 0 || nx % s != 0 || ny % s != 0 {
        return invalid(format!("cannot pool {nx}x{ny} by {s}"));
    }
    if s == 1 {
        return Ok(f.clone());
    }
    let src = f.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let (ox, oy) = (nx / s, ny / s);
    let mut out = vec![0.0; ox * oy * c];
    let inv = 1.0 / (s * s) as f64;
    for ix in 0..nx {
        for iy in 0..ny {
            let o = ((ix / s) * oy + iy / s) * c;
            let i = (ix * ny + iy) * c;
            for (d, x) in out[o..o + c].iter_mut().zip(&src[i..i + c]) {
                *d += x * inv;
            }
        }
    }
    Ok(Array3::from_shape_vec((ox, oy, c), out).expect("shape matches buffer"))
}

fn bilinear_taps(i: usize, s: usize, n_src: usize) -> (usize, usize, f64) {
    let x = ((i as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
    let x0 = x.floor() as usize;
    let x1 = (x0 + 1).min(n_src - 1);
    (x0, x1, x - x0 as f64)
}

/// Bilinear upsampling by integer factor `s`, sampling at cell centres
/// with edge clamping.
pub fn upsample_bilinear(f: &Array3<f64>, s: usize) -> Array3<f64> {
    if s == 1 {
        return f.clone();
    }
    let (nx, ny, c) = f.dim();
    let src = f.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let tx: Vec<_> = (0..nx * s).map(|i| bilinear_taps(i, s, nx)).collect();
    let ty: Vec<_> = (0..ny * s).map(|i| bilinear_taps(i, s, ny)).collect();
    let (ox, oy) = (nx * s, ny * s);
    let mut out = vec![0.0; ox * oy * c];
    for (ix, &(x0, x1, ax)) in tx.iter().enumerate() {
        for (iy, &(y0, y1, ay)) in ty.iter().enumerate() {
            let w = [(1.0 - ax) * (1.0 - ay), (1.0 - ax) * ay, ax * (1.0 - ay), ax * ay];
            let taps = [(x0, y0), (x0, y1), (x1, y0), (x1, y1)];
            let o = (ix * oy + iy) * c;
            let dst = &mut out[o..o + c];
            for (wt, (sx, sy)) in w.iter().zip(taps) {
                let i = (sx * ny + sy) * c;
                for (d, x) in dst.iter_mut().zip(&src[i..i + c]) {
                    *d += wt * x;
                }
            }
        }
    }
    Array3::from_shape_vec((ox, oy, c), out).expect("shape matches buffer")
}

/// Nearest-neighbour (block replication) upsampling by `s`.
pub fn upsample_nearest(f: &Array3<f64>, s: usize) -> Array3<f64> {
    if s == 1 {
        return f.clone();
    }
    let (nx, ny, c) = f.dim();
    let src = f.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let (ox, oy) = (nx * s, ny * s);
    let mut out = Vec::with_capacity(ox * oy * c);
    for ix in 0..ox {
        for iy in 0..oy {
            let i = ((ix / s) * ny + iy / s) * c;
            out.extend_from_slice(&src[i..i + c]);
        }
    }
    Array3::from_shape_vec((ox, oy, c), out).expect("shape matches buffer")
}

pub fn build_pyramid(f: &Array3<f64>) -> Result<Pyramid> {
    let (nx, ny) = dims2(f);
    let m = 1 << (LEVELS - 1);
    if nx % m != 0 || ny % m != 0 {
        return invalid(format!(
            "pyramid needs spatial dims divisible by {m}; pad {nx}x{ny} by ({}, {}) cells",
            (m - nx % m) % m,
            (m - ny % m) % m
        ));
    }
    let mut levels = Vec::with_capacity(LEVELS);
    let mut rescaled = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let s = 1 << l;
        let lv = avg_pool(f, s)?;
        rescaled.push(upsample_bilinear(&lv, s));
        levels.push(lv);
    }
    Ok(Pyramid { levels, rescaled })
}

/// Channel concatenation: vehicle channels first, then UAV channels.
pub fn cascade(f_veh: &Array3<f64>, f_uav: &Array3<f64>) -> Result<Array3<f64>> {
    if dims2(f_veh) != dims2(f_uav) {
        return invalid(format!("cascade of {:?} and {:?}", f_veh.dim(), f_uav.dim()));
    }
    ndarray::concatenate(Axis(2), &[f_veh.view(), f_uav.view()]).map_err(|e| crate::Error::InvalidArgument(e.to_string()))
}

fn dot(a: ArrayView3<'_, f64>, b: ArrayView3<'_, f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
        _ => Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + x * y),
    }
}

fn halves(f: &Array3<f64>) -> (ndarray::ArrayView3<'_, f64>, ndarray::ArrayView3<'_, f64>) {
    let c = f.dim().2 / 2;
    (f.slice(s![.., .., ..c]), f.slice(s![.., .., c..]))
}

pub fn correlation_weights(f_i: &Array3<f64>, cascades: &[Array3<f64>], mode: CorrelationMode) -> Result<FusionWeights> {
    if cascades.len() != LEVELS {
        return invalid(format!("expected {LEVELS} cascades, got {}", cascades.len()));
    }
    let c = f_i.dim().2;
    for m in cascades {
        if dims2(m) != dims2(f_i) || m.dim().2 != 2 * c {
            return invalid(format!("cascade {:?} does not match feature {:?}", m.dim(), f_i.dim()));
        }
    }
    let dots: Vec<LevelDots> = cascades
        .iter()
        .map(|m| {
            let (veh, uav) = halves(m);
            LevelDots::new(f_i.view(), veh, uav)
        })
        .collect();
    Ok(weights_from_dots(dot(f_i.view(), f_i.view()), &dots, mode))
}

/// Inner products of one pyramid level needed by both correlation modes.
struct LevelDots {
    f_veh: f64,
    f_uav: f64,
    veh_veh: f64,
    uav_uav: f64,
    veh_uav: f64,
}

impl LevelDots {
    fn new(f: ArrayView3<'_, f64>, veh: ArrayView3<'_, f64>, uav: ArrayView3<'_, f64>) -> Self {
        Self {
            f_veh: dot(f, veh),
            f_uav: dot(f, uav),
            veh_veh: dot(veh, veh),
            uav_uav: dot(uav, uav),
            veh_uav: dot(veh, uav),
        }
    }
}

fn weights_from_dots(nf2: f64, dots: &[LevelDots], mode: CorrelationMode) -> FusionWeights {
    let uniform = FusionWeights {
        beta: [0.0; LEVELS],
        omega: [1.0 / LEVELS as f64; LEVELS],
    };
    if nf2 == 0.0 {
        return uniform;
    }
    let mut beta = [0.0; LEVELS];
    for (b, d) in beta.iter_mut().zip(dots) {
        *b = match mode {
            CorrelationMode::Cosine => {
                // against r = (veh + uav) / 2
                let nr2 = 0.25 * (d.veh_veh + 2.0 * d.veh_uav + d.uav_uav);
                if nr2 <= 0.0 {
                    0.0
                } else {
                    (0.5 * (d.f_veh + d.f_uav) / (nf2.sqrt() * nr2.sqrt())).clamp(-1.0, 1.0)
                }
            }
            CorrelationMode::Literal => (d.f_veh / nf2).clamp(-1.0, 1.0),
        };
    }
    let shifted: Vec<f64> = beta.iter().map(|b| b + 1.0).collect();
    let total: f64 = shifted.iter().sum();
    if total <= 0.0 {
        return FusionWeights { beta, ..uniform };
    }
    let mut omega = [0.0; LEVELS];
    for (o, s) in omega.iter_mut().zip(&shifted) {
        *o = s / total;
    }
    FusionWeights { beta, omega }
}

pub fn enhance(rescaled: &[Array3<f64>], w: &FusionWeights) -> Result<Array3<f64>> {
    if rescaled.len() != LEVELS {
        return invalid(format!("expected {LEVELS} levels, got {}", rescaled.len()));
    }
    let mut out = Array3::zeros(rescaled[0].dim());
    for (m, o) in rescaled.iter().zip(w.omega) {
        if m.dim() != out.dim() {
            return invalid("pyramid levels differ in size");
        }
        out.scaled_add(o, m);
    }
    Ok(out)
}

/// Token-level attention weights of query `q` over `keys`, numerically
/// stable softmax of `q . k / sqrt(d_k)`.
pub fn attention_weights(q: &[f64], keys: &[&[f64]], d_k: usize) -> Vec<f64> {
    let scale = 1.0 / (d_k as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k.iter()).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

/// Pooled token grids of both domains and the per-domain attention output
/// at token resolution.
struct TokenAttention {
    pooled: [Array3<f64>; 2],
    attended: [Array3<f64>; 2],
}

fn attend_tokens(f_veh: &Array3<f64>, f_uav: &Array3<f64>, cfg: &AttentionConfig) -> Result<TokenAttention> {
    cfg.validate()?;
    if f_veh.dim() != f_uav.dim() {
        return invalid(format!("attention inputs differ: {:?} vs {:?}", f_veh.dim(), f_uav.dim()));
    }
    let p = cfg.token_pool;
    let (nx, ny, c) = f_veh.dim();
    if nx % p != 0 || ny % p != 0 {
        return invalid(format!("token_pool {p} does not divide {nx}x{ny}"));
    }
    let d_k = cfg.d_k.unwrap_or(c);
    let pooled = [avg_pool(f_veh, p)?, avg_pool(f_uav, p)?];
    let (tx, ty) = (nx / p, ny / p);
    let token = |d: usize, ix: usize, iy: usize| pooled[d].slice(s![ix, iy, ..]).to_slice().expect("contiguous");
    let n_tok = tx * ty;
    let rows = crate::par::map_range(2 * n_tok, |r| {
        let (dom, t) = (r / n_tok, r % n_tok);
        let (ix, iy) = (t / ty, t % ty);
        let q = token(dom, ix, iy);
        let (x0, x1, y0, y1) = match cfg.window {
            Some(w) => (ix.saturating_sub(w), (ix + w).min(tx - 1), iy.saturating_sub(w), (iy + w).min(ty - 1)),
            None => (0, tx - 1, 0, ty - 1),
        };
        let mut keys: Vec<&[f64]> = Vec::new();
        for d in 0..2 {
            for kx in x0..=x1 {
                for ky in y0..=y1 {
                    keys.push(token(d, kx, ky));
                }
            }
        }
        let w = attention_weights(q, &keys, d_k);
        let mut out = vec![0.0; c];
        for (wi, k) in w.iter().zip(&keys) {
            for (o, v) in out.iter_mut().zip(k.iter()) {
                *o += wi * v;
            }
        }
        out
    });
    let mut attended = [Array3::zeros((tx, ty, c)), Array3::zeros((tx, ty, c))];
    for (r, row) in rows.into_iter().enumerate() {
        let (dom, t) = (r / n_tok, r % n_tok);
        attended[dom].slice_mut(s![t / ty, t % ty, ..]).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(TokenAttention { pooled, attended })
}

/// Cross-domain attention with identity projections: every pooled token of
/// each domain attends over the tokens of both domains (within the
/// configured window) and the output is replicated back to full size.
pub fn cross_domain_attention(
    f_veh_sum: &Array3<f64>,
    f_uav_sum: &Array3<f64>,
    cfg: &AttentionConfig,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let t = attend_tokens(f_veh_sum, f_uav_sum, cfg)?;
    let [a, b] = t.attended;
    Ok((upsample_nearest(&a, cfg.token_pool), upsample_nearest(&b, cfg.token_pool)))
}

/// `lambda * a + (1 - lambda) * b`.
pub fn blend(a: &Array3<f64>, b: &Array3<f64>, lambda: f64) -> Result<Array3<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return invalid(format!("lambda must lie in [0, 1], got {lambda}"));
    }
    if a.dim() != b.dim() {
        return invalid("blend inputs differ in shape");
    }
    if lambda == 1.0 {
        return Ok(a.clone());
    }
    if lambda == 0.0 {
        return Ok(b.clone());
    }
    Ok(Zip::from(a).and(b).map_collect(|x, y| lambda * x + (1.0 - lambda) * y))
}

fn pad_to(f: &Array3<f64>, nx: usize, ny: usize) -> Array3<f64> {
    let (ox, oy, c) = f.dim();
    if (ox, oy) == (nx, ny) {
        return f.clone();
    }
    let mut out = Array3::zeros((nx, ny, c));
    out.slice_mut(s![..ox, ..oy, ..]).assign(f);
    out
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Per-domain intermediate results of one fusion, at padded size.
#[derive(Clone, Debug)]
pub struct FusionTrace {
    pub weights_veh: FusionWeights,
    pub weights_uav: FusionWeights,
    pub veh_attended: Array3<f64>,
    pub uav_attended: Array3<f64>,
}

/// Full fusion chain on two grids over the same extent. Grids whose size
/// is not a multiple of the pyramid and token strides are zero-padded and
/// the result cropped back.
pub fn fuse(bev_veh: &BevFeature, bev_uav: &BevFeature, cfg: &AttentionConfig) -> Result<BevFeature> {
    fuse_traced(bev_veh, bev_uav, cfg).map(|(f, _)| f)
}

pub fn fuse_traced(bev_veh: &BevFeature, bev_uav: &BevFeature, cfg: &AttentionConfig) -> Result<(BevFeature, FusionTrace)> {
    cfg.validate()?;
    if bev_veh.grid != bev_uav.grid {
        return invalid("fusion inputs are on different grids");
    }
    if bev_veh.data.dim() != bev_uav.data.dim() {
        return invalid("fusion inputs differ in shape");
    }
    let (nx, ny, _) = bev_veh.data.dim();
    let stride = num_integer_lcm(1 << (LEVELS - 1), cfg.token_pool);
    let (px, py) = (round_up(nx, stride), round_up(ny, stride));
    let fv = pad_to(&bev_veh.data, px, py);
    let fu = pad_to(&bev_uav.data, px, py);

    let pv = build_pyramid(&fv)?;
    let pu = build_pyramid(&fu)?;
    // same weights as correlation_weights over the cascades, without
    // materializing the concatenated grids
    let level_dots = |f: &Array3<f64>| -> Vec<LevelDots> {
        pv.rescaled
            .iter()
            .zip(&pu.rescaled)
            .map(|(a, b)| LevelDots::new(f.view(), a.view(), b.view()))
            .collect()
    };
    let wv = weights_from_dots(dot(fv.view(), fv.view()), &level_dots(&fv), cfg.correlation);
    let wu = weights_from_dots(dot(fu.view(), fu.view()), &level_dots(&fu), cfg.correlation);
    let sum_v = enhance(&pv.rescaled, &wv)?;
    let sum_u = enhance(&pu.rescaled, &wu)?;

    let att = attend_tokens(&sum_v, &sum_u, cfg)?;
    let p = cfg.token_pool;
    let (veh_out, uav_out) = match cfg.output {
        AttentionOutput::Replace => (upsample_nearest(&att.attended[0], p), upsample_nearest(&att.attended[1], p)),
        AttentionOutput::Residual => {
            let dv = &att.attended[0] - &att.pooled[0];
            let du = &att.attended[1] - &att.pooled[1];
            (&fv + &upsample_nearest(&dv, p), &fu + &upsample_nearest(&du, p))
        }
    };
    let fused = blend(&veh_out, &uav_out, cfg.lambda)?;
    let mut agents = bev_veh.agents.clone();
    agents.extend(bev_uav.agents.iter().copied());
    let out = BevFeature {
        grid: bev_veh.grid.clone(),
        data: fused.slice(s![..nx, ..ny, ..]).to_owned(),
        agents,
    };
    Ok((
        out,
        FusionTrace {
            weights_veh: wv,
            weights_uav: wu,
            veh_attended: veh_out,
            uav_attended: uav_out,
        },
    ))
}

fn num_integer_lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Elementwise mean of several grids on the same extent.
pub fn mean_fuse(bevs: &[&BevFeature]) -> Result<BevFeature> {
    let Some(first) = bevs.first() else {
        return invalid("nothing to fuse");
    };
    let mut data = Array3::zeros(first.data.dim());
    let mut agents = Vec::new();
    for b in bevs {
        if b.grid != first.grid || b.data.dim() != first.data.dim() {
            return invalid("mean fusion inputs differ in grid or shape");
        }
        data += &b.data;
        agents.extend(b.agents.iter().copied());
    }
    data /= bevs.len() as f64;
    Ok(BevFeature {
        grid: first.grid.clone(),
        data,
        agents,
    })
}
