//! End-to-end runs and ablation sweeps over a generated scene set.
//!
//! Every scene is rendered once; depth distributions and lifted grids are
//! shared by all variants of a sweep that need them. Scenes run in
//! parallel, each from its own derived seed, and results are reduced in
//! scene order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bevlift::{area_weighted_features, lift_splat_cell_offsets, BevFeature};
use crate::cdca::{fuse, mean_fuse};
use crate::config::RunConfig;
use crate::depthcrf::{
    cross_domain_correspondence, mean_field_refine_with, AgentTerms, Correspondence, CrfAgent, DepthBins,
    DepthDistribution,
};
use crate::detector::{center_head, decode, Box3D, DetectionsFile};
use crate::error::{invalid, Error, Result};
use crate::geometry::BevGrid;
use crate::metrics::{evaluate, MetricsReport, Sample};
use crate::par;
use crate::scenesim::{generate_scene, render_agent_frame, AgentFrame, AgentId, Domain, Scene};

/// Seed of scene `i` of a set generated from `base` (SplitMix64 step).
pub fn scene_seed(base: u64, i: usize) -> u64 {
    let mut z = base.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One pipeline configuration evaluated on the shared scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub agents: Vec<AgentId>,
    pub use_cdo: bool,
    pub use_cdca: bool,
    pub lambda: f64,
}

impl Variant {
    pub fn from_config(cfg: &RunConfig, label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            agents: cfg.toggles.agents.clone(),
            use_cdo: cfg.toggles.use_cdo,
            use_cdca: cfg.toggles.use_cdca,
            lambda: cfg.fusion.lambda,
        }
    }

    fn sorted_agents(&self) -> Vec<AgentId> {
        let mut a = self.agents.clone();
        a.sort();
        a.dedup();
        a
    }
}

/// Detections of every variant for one scene.
#[derive(Clone, Debug)]
pub struct SceneOutcome {
    pub scene_id: usize,
    pub seed: u64,
    pub gts: Vec<Box3D>,
    pub detections: Vec<Vec<Box3D>>,
}

fn bins_for(cfg: &RunConfig, agent: AgentId) -> Result<DepthBins> {
    cfg.depth.for_domain(agent.domain()).bins()
}

struct SceneCache<'a> {
    cfg: &'a RunConfig,
    grid: &'a BevGrid,
    scene: Scene,
    frames: BTreeMap<AgentId, AgentFrame>,
    bins: BTreeMap<AgentId, DepthBins>,
    unary: BTreeMap<AgentId, DepthDistribution>,
    terms: BTreeMap<AgentId, AgentTerms>,
    corrs: BTreeMap<(AgentId, AgentId), Correspondence>,
    /// Lifted grid per `(CRF agent set or empty for unary, agent)`.
    lifted: BTreeMap<(Vec<AgentId>, AgentId), BevFeature>,
}

impl SceneCache<'_> {
    fn frame(&mut self, a: AgentId) -> Result<&AgentFrame> {
        if !self.frames.contains_key(&a) {
            let bins = bins_for(self.cfg, a)?;
            let f = render_agent_frame(&self.scene, a, &self.cfg.noise, &bins, self.scene.seed)?;
            self.unary.insert(a, DepthDistribution::from_unary(&f, &bins)?);
            self.bins.insert(a, bins);
            self.frames.insert(a, f);
        }
        Ok(&self.frames[&a])
    }

    fn lift(&mut self, a: AgentId, dist: &DepthDistribution) -> Result<BevFeature> {
        let cam = self.scene.camera(a)?;
        let frame = &self.frames[&a];
        if self.cfg.toggles.area_weighting {
            let f = area_weighted_features(frame, dist, cam);
            lift_splat_cell_offsets(frame, f.view(), dist, cam, self.grid)
        } else {
            lift_splat_cell_offsets(frame, frame.features.view(), dist, cam, self.grid)
        }
    }

    /// Lifted grids of `agents`, with depth from the unary alone or from
    /// joint refinement over exactly these agents.
    fn lifted(&mut self, agents: &[AgentId], use_cdo: bool) -> Result<Vec<BevFeature>> {
        let key_set: Vec<AgentId> = if use_cdo && self.cfg.crf.iterations > 0 { agents.to_vec() } else { Vec::new() };
        if agents.iter().all(|a| self.lifted.contains_key(&(key_set.clone(), *a))) {
            return Ok(agents.iter().map(|a| self.lifted[&(key_set.clone(), *a)].clone()).collect());
        }
        for &a in agents {
            self.frame(a)?;
        }
        let unary: Vec<DepthDistribution> = agents.iter().map(|a| self.unary[a].clone()).collect();
        let dists = if key_set.is_empty() {
            unary
        } else {
            let mut corrs = Vec::new();
            if self.cfg.crf.w_cross > 0.0 || self.cfg.crf.w_intra > 0.0 {
                for (ia, &a) in agents.iter().enumerate() {
                    for &b in agents {
                        if a == b {
                            continue;
                        }
                        if !self.corrs.contains_key(&(a, b)) {
                            let c = cross_domain_correspondence(
                                &self.frames[&a],
                                &self.frames[&b],
                                self.scene.camera(a)?,
                                self.scene.camera(b)?,
                                &unary[ia],
                            )?;
                            self.corrs.insert((a, b), c);
                        }
                        corrs.push(self.corrs[&(a, b)].clone());
                    }
                }
            }
            let crf_agent = |a: &AgentId| CrfAgent {
                frame: &self.frames[a],
                bins: &self.bins[a],
            };
            for a in agents {
                if !self.terms.contains_key(a) {
                    self.terms.insert(*a, AgentTerms::new(crf_agent(a), &self.cfg.crf)?);
                }
            }
            let crf_agents: Vec<CrfAgent<'_>> = agents.iter().map(crf_agent).collect();
            let terms: Vec<&AgentTerms> = agents.iter().map(|a| &self.terms[a]).collect();
            mean_field_refine_with(&crf_agents, &terms, &corrs, &self.cfg.crf)?
        };
        let mut out = Vec::with_capacity(agents.len());
        for (a, d) in agents.iter().zip(&dists) {
            let b = self.lift(*a, d)?;
            self.lifted.insert((key_set.clone(), *a), b.clone());
            out.push(b);
        }
        Ok(out)
    }
}

/// Folds agent grids into one: CDCA between the ground grid and the
/// (pairwise-fused) aerial grids, or the elementwise mean when disabled.
pub fn fuse_agents(bevs: &[BevFeature], use_cdca: bool, cfg: &crate::cdca::AttentionConfig) -> Result<BevFeature> {
    match bevs {
        [] => invalid("no agent grids to fuse"),
        [one] => Ok(one.clone()),
        _ if !use_cdca => mean_fuse(&bevs.iter().collect::<Vec<_>>()),
        _ => {
            let ground: Vec<&BevFeature> = bevs.iter().filter(|b| b.domain() == Some(Domain::Ground)).collect();
            let aerial: Vec<&BevFeature> = bevs.iter().filter(|b| b.domain() != Some(Domain::Ground)).collect();
            let fold = |xs: &[&BevFeature]| -> Result<Option<BevFeature>> {
                let mut it = xs.iter();
                let Some(first) = it.next() else {
                    return Ok(None);
                };
                let mut acc = (*first).clone();
                for x in it {
                    acc = fuse(&acc, x, cfg)?;
                }
                Ok(Some(acc))
            };
            match (fold(&ground)?, fold(&aerial)?) {
                (Some(g), Some(a)) => fuse(&g, &a, cfg),
                (Some(x), None) | (None, Some(x)) => Ok(x),
                (None, None) => invalid("no agent grids to fuse"),
            }
        }
    }
}

fn run_variant(cache: &mut SceneCache<'_>, v: &Variant) -> Result<Vec<Box3D>> {
    let agents = v.sorted_agents();
    if agents.is_empty() {
        return invalid(format!("variant {} selects no agents", v.label));
    }
    let bevs = cache.lifted(&agents, v.use_cdo)?;
    let mut fcfg = cache.cfg.fusion.clone();
    fcfg.lambda = v.lambda;
    let fused = fuse_agents(&bevs, v.use_cdca, &fcfg)?;
    let head = center_head(&fused, &cache.cfg.detector.head)?;
    decode(&head, cache.grid, cache.cfg.detector.threshold)
}

/// Boxes of the objects covered by at least `min_pixels` pixels over all
/// `frames` together.
pub fn visible_ground_truth<'a>(
    scene: &Scene,
    frames: impl IntoIterator<Item = &'a AgentFrame>,
    min_pixels: usize,
) -> Vec<Box3D> {
    let mut count = vec![0usize; scene.objects.len()];
    for f in frames {
        for &id in &f.object_ids {
            if let Some(c) = count.get_mut(id as usize) {
                *c += 1;
            }
        }
    }
    scene
        .objects
        .iter()
        .zip(&count)
        .filter(|(_, &c)| c >= min_pixels)
        .map(|(o, _)| Box3D::from_object(o))
        .collect()
}

/// Ground truth of a scene as the pipeline scores it: objects visible to
/// the full rig.
pub fn scene_ground_truth(cfg: &RunConfig, scene: &Scene) -> Result<Vec<Box3D>> {
    let frames = AgentId::ALL
        .iter()
        .map(|&a| render_agent_frame(scene, a, &cfg.noise, &bins_for(cfg, a)?, scene.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(visible_ground_truth(scene, &frames, cfg.gt_min_pixels))
}

/// Generates scene `scene_id` and evaluates every variant on it.
pub fn process_scene(cfg: &RunConfig, scene_id: usize, variants: &[Variant]) -> Result<SceneOutcome> {
    let grid = cfg.grid.grid()?;
    let seed = scene_seed(cfg.seed, scene_id);
    let scene = generate_scene(&cfg.scene, &cfg.rig, &grid, seed)?;
    let mut cache = SceneCache {
        cfg,
        grid: &grid,
        scene,
        frames: BTreeMap::new(),
        bins: BTreeMap::new(),
        unary: BTreeMap::new(),
        terms: BTreeMap::new(),
        corrs: BTreeMap::new(),
        lifted: BTreeMap::new(),
    };
    for a in AgentId::ALL {
        cache.frame(a)?;
    }
    let gts = visible_ground_truth(&cache.scene, cache.frames.values(), cfg.gt_min_pixels);
    let detections = variants.iter().map(|v| run_variant(&mut cache, v)).collect::<Result<_>>()?;
    Ok(SceneOutcome {
        scene_id,
        seed,
        gts,
        detections,
    })
}

/// Runs all scenes of the set for the given variants, in parallel.
pub fn run_scenes(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<SceneOutcome>> {
    let out = par::map_range(cfg.scenes, |i| {
        process_scene(cfg, i, variants).map_err(|e| Error::Scene {
            scene_id: i,
            source: Box::new(e),
        })
    });
    out.into_iter().collect()
}

/// Metrics of one variant over all scenes, plus each scene's own mAP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: MetricsReport,
    pub per_scene_map: Vec<f64>,
}

pub fn evaluate_variant(cfg: &RunConfig, outcomes: &[SceneOutcome], vi: usize, variant: &Variant) -> Result<VariantResult> {
    let samples: Vec<Sample> = outcomes
        .iter()
        .map(|o| Sample {
            preds: o.detections[vi].clone(),
            gts: o.gts.clone(),
        })
        .collect();
    let report = evaluate(&samples, &cfg.metrics)?;
    let per_scene_map = samples
        .iter()
        .map(|s| evaluate(std::slice::from_ref(s), &cfg.metrics).map(|r| r.map))
        .collect::<Result<_>>()?;
    Ok(VariantResult {
        variant: variant.clone(),
        report,
        per_scene_map,
    })
}

/// Result of [`run`]: the aggregate report and per-scene detection files.
pub struct RunOutput {
    pub report: MetricsReport,
    pub per_scene_map: Vec<f64>,
    pub detections: Vec<DetectionsFile>,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let v = Variant::from_config(cfg, "run");
    let outcomes = run_scenes(cfg, std::slice::from_ref(&v))?;
    let r = evaluate_variant(cfg, &outcomes, 0, &v)?;
    let detections = outcomes
        .iter()
        .map(|o| DetectionsFile::new(o.scene_id, o.seed, &v.label, o.detections[0].clone()))
        .collect();
    Ok(RunOutput {
        report: r.report,
        per_scene_map: r.per_scene_map,
        detections,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Agents,
    UseCdo,
    UseCdca,
    Lambda,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "agents" => Ok(Self::Agents),
            "use_cdo" => Ok(Self::UseCdo),
            "use_cdca" => Ok(Self::UseCdca),
            "lambda" => Ok(Self::Lambda),
            other => invalid(format!("unknown ablation axis `{other}` (expected agents, use_cdo, use_cdca, lambda)")),
        }
    }
}

/// Cartesian product of the requested axes over the base configuration.
pub fn ablation_variants(cfg: &RunConfig, axes: &[Axis]) -> Result<Vec<Variant>> {
    if axes.is_empty() {
        return invalid("ablation needs at least one axis");
    }
    let mut axes = axes.to_vec();
    axes.sort();
    axes.dedup();
    let mut rows = vec![(Vec::<String>::new(), Variant::from_config(cfg, ""))];
    for ax in axes {
        let mut next = Vec::new();
        for (labels, base) in &rows {
            let options: Vec<(String, Variant)> = match ax {
                Axis::Agents => [
                    ("vehicle", vec![AgentId::Vehicle]),
                    ("uav", vec![AgentId::UavR, AgentId::UavL]),
                    ("all", AgentId::ALL.to_vec()),
                ]
                .into_iter()
                .map(|(l, a)| (l.to_string(), Variant { agents: a, ..base.clone() }))
                .collect(),
                Axis::UseCdo => [false, true]
                    .into_iter()
                    .map(|b| (if b { "cdo+" } else { "cdo-" }.to_string(), Variant { use_cdo: b, ..base.clone() }))
                    .collect(),
                Axis::UseCdca => [false, true]
                    .into_iter()
                    .map(|b| (if b { "cdca+" } else { "cdca-" }.to_string(), Variant { use_cdca: b, ..base.clone() }))
                    .collect(),
                Axis::Lambda => [0.0, 0.5, 1.0]
                    .into_iter()
                    .map(|l| (format!("lambda={l}"), Variant { lambda: l, ..base.clone() }))
                    .collect(),
            };
            for (l, v) in options {
                let mut ls = labels.clone();
                ls.push(l);
                next.push((ls, v));
            }
        }
        rows = next;
    }
    Ok(rows
        .into_iter()
        .map(|(ls, mut v)| {
            v.label = ls.join("/");
            v
        })
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricsReport,
    pub delta_map: f64,
    pub per_scene_map: Vec<f64>,
    pub variant: Variant,
    /// Boxes per scene, in scene order.
    #[serde(skip)]
    pub detections: Vec<Vec<Box3D>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
    pub scene_seeds: Vec<u64>,
}

pub const ABLATION_CSV_HEADER: &str = "label,mAP,mATE,mASE,mAOE,mAVE,mAAE,NDS,delta_mAP";

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let m = &r.report;
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:+.6}\n",
                r.label, m.map, m.m_ate, m.m_ase, m.m_aoe, m.m_ave, m.m_aae, m.nds, r.delta_map
            ));
        }
        s
    }
}

/// Sweeps the axes on one shared scene set. `baseline` names the row that
/// deltas are taken against (default: the first row).
pub fn ablate(cfg: &RunConfig, axes: &[Axis], baseline: Option<&str>) -> Result<AblationReport> {
    let variants = ablation_variants(cfg, axes)?;
    let base_idx = match baseline {
        None => 0,
        Some(b) => variants.iter().position(|v| v.label == b).ok_or_else(|| {
            let labels: Vec<&str> = variants.iter().map(|v| v.label.as_str()).collect();
            Error::NotFound(format!("baseline `{b}` is not one of {labels:?}"))
        })?,
    };
    let outcomes = run_scenes(cfg, &variants)?;
    let results: Vec<VariantResult> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| evaluate_variant(cfg, &outcomes, i, v))
        .collect::<Result<_>>()?;
    let base_map = results[base_idx].report.map;
    Ok(AblationReport {
        baseline: variants[base_idx].label.clone(),
        rows: results
            .into_iter()
            .enumerate()
            .map(|(vi, r)| AblationRow {
                detections: outcomes.iter().map(|o| o.detections[vi].clone()).collect(),
                label: r.variant.label.clone(),
                delta_map: r.report.map - base_map,
                report: r.report,
                per_scene_map: r.per_scene_map,
                variant: r.variant,
            })
            .collect(),
        scene_seeds: outcomes.iter().map(|o| o.seed).collect(),
    })
}
