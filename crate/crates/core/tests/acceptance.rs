//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if the outcome differs from the recorded expectation.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use agcp::bevlift::{lift_splat, BevFeature};
use agcp::cdca::{attention_weights, blend, cascade, correlation_weights, fuse, AttentionConfig, CorrelationMode, LEVELS};
use agcp::config::{GridConfig, RunConfig};
use agcp::depthcrf::{
    crf_energy, crf_energy_naive, make_depth_bins, mean_field_refine, CorrEntry, Correspondence, CrfAgent, CrfMode,
    CrfParams, DepthDistribution,
};
use agcp::geometry::{project_world_to_pixel, unproject_pixel_to_world, BevGrid};
use agcp::metrics::{average_precision, nds, MetricsConfig};
use agcp::pipeline::{ablate, evaluate_variant, run, run_scenes, Axis, Variant};
use agcp::scenesim::{AgentId, NoiseConfig, RigConfig};
use common::crf::{exact_marginals, max_total_variation, random_frame, random_params};
use common::lift::{expected_mass, random_case, sub_case, H, W};
use common::metrics::{random_fixture, reference_ap, reference_tp_flags, CLASSES, THRESHOLDS};
use nalgebra::Vector3;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria this build is known not to meet; see the README.
const EXPECTED_UNMET: [u8; 3] = [2, 3, 10];

const SCENES: usize = 100;
const RUNTIME_BUDGET_S: f64 = 300.0;
/// The budget is for a desktop machine. Smaller pools print the time but
/// do not judge it.
const BUDGET_MIN_THREADS: usize = 4;

struct Verdict {
    id: u8,
    pass: bool,
    detail: String,
}

fn report(id: u8, name: &str, pass: bool, detail: String) -> Verdict {
    println!("criterion {id:>2} {name:<26} {}  {detail}", if pass { "PASS" } else { "FAIL" });
    Verdict { id, pass, detail }
}

fn collaboration_and_fusion() -> Vec<Verdict> {
    let mut cfg = RunConfig::default();
    cfg.scenes = SCENES;
    cfg.scene.occlusion_rate = 0.5;
    let variant = |label: &str, agents: &[AgentId], use_cdca: bool| Variant {
        label: label.into(),
        agents: agents.to_vec(),
        use_cdca,
        ..Variant::from_config(&cfg, label)
    };
    // the mean-fusion row reuses the cached grids, so it adds only a decode per scene
    let variants = [
        variant("vehicle", &[AgentId::Vehicle], true),
        variant("uav", &[AgentId::UavR, AgentId::UavL], true),
        variant("all", &AgentId::ALL, true),
        variant("mean", &AgentId::ALL, false),
    ];
    let t0 = Instant::now();
    let outcomes = run_scenes(&cfg, &variants).expect("scenes run");
    let secs = t0.elapsed().as_secs_f64();
    let [veh, uav, all, mean] = [0, 1, 2, 3].map(|i| evaluate_variant(&cfg, &outcomes, i, &variants[i]).expect("evaluates"));

    let wins = |other: &[f64], margin: f64| {
        all.per_scene_map.iter().zip(other).filter(|(f, o)| **f >= **o + margin).count()
    };
    let (w_veh, w_uav) = (wins(&veh.per_scene_map, 0.05), wins(&uav.per_scene_map, 0.02));
    let (f, v, u) = (all.report.map, veh.report.map, uav.report.map);
    let threads = agcp::par::current_threads();
    let judged = threads >= BUDGET_MIN_THREADS;
    let c1 = f >= v + 0.05 && f >= u + 0.02 && w_veh >= 90 && w_uav >= 90 && (!judged || secs < RUNTIME_BUDGET_S);
    let c3 = f >= mean.report.map + 0.02;
    vec![
        report(
            1,
            "collaboration gain",
            c1,
            format!(
                "fused {f:.4}, vehicle {v:.4}, uav {u:.4}; per-scene {w_veh}/{SCENES} and {w_uav}/{SCENES}; \
                 {secs:.0} s on {threads} threads{}",
                if judged { "" } else { " (runtime not judged below 4 threads)" }
            ),
        ),
        report(
            3,
            "cdca over mean fusion",
            c3,
            format!("cdca {f:.4} vs mean {:.4} (gain {:+.4}, need +0.02)", mean.report.map, f - mean.report.map),
        ),
    ]
}

fn depth_refinement() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.scenes = SCENES;
    cfg.noise.logit_sigma = 2.0;
    let rep = ablate(&cfg, &[Axis::UseCdo], Some("cdo-")).expect("ablation runs");
    let (off, on) = (rep.row("cdo-").unwrap().report.map, rep.row("cdo+").unwrap().report.map);
    report(
        2,
        "cdo gain",
        on >= off + 0.02,
        format!("cdo+ {on:.4} vs cdo- {off:.4} (gain {:+.4}, need +0.02)", on - off),
    )
}

fn nds_row() -> Verdict {
    let v = nds(0.607, &[0.355, 0.145, 0.544, 1.082_f64.min(1.0), 0.315]);
    report(4, "nds of published row", (v - 0.568).abs() <= 1e-3, format!("{v:.5} vs 0.568"))
}

fn crf_oracle() -> Verdict {
    let bins = make_depth_bins(1.0, 7.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut energy_ok) = (0.0f64, 0);
    for _ in 0..100 {
        let frame = random_frame(&mut rng, AgentId::Vehicle, 2, 2, 3, true);
        let params = random_params(&mut rng);
        let agents = [CrfAgent { frame: &frame, bins: &bins }];
        let q = mean_field_refine(&agents, &[], &params).unwrap().remove(0);
        worst = worst.max(max_total_variation(&q.q, &exact_marginals(&frame, &bins, &params)));
        let unary = DepthDistribution::from_unary(&frame, &bins).unwrap();
        let e_ref = crf_energy(&[q.argmax_labels()], &agents, &[], &params).unwrap();
        let e_un = crf_energy(&[unary.argmax_labels()], &agents, &[], &params).unwrap();
        energy_ok += (e_ref <= e_un + 1e-12) as usize;
    }

    let bins2 = [make_depth_bins(1.0, 9.0, 4).unwrap(), make_depth_bins(20.0, 60.0, 5).unwrap()];
    let mut energy_gap = 0.0f64;
    for trial in 0..50 {
        let frames = [
            random_frame(&mut rng, AgentId::Vehicle, 6, 5, 4, false),
            random_frame(&mut rng, AgentId::UavR, 5, 4, 5, false),
            random_frame(&mut rng, AgentId::UavL, 5, 4, 5, false),
        ];
        let agents = [
            CrfAgent { frame: &frames[0], bins: &bins2[0] },
            CrfAgent { frame: &frames[1], bins: &bins2[1] },
            CrfAgent { frame: &frames[2], bins: &bins2[1] },
        ];
        let mut corrs = Vec::new();
        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
            let mut entries = Vec::new();
            for i in 0..frames[a].n_visible() {
                if rng.gen_bool(0.6) {
                    entries.push(CorrEntry {
                        i,
                        j: rng.gen_range(0..frames[b].n_visible()),
                        alpha: rng.gen_range(-5.0..5.0),
                        beta: rng.gen_range(-1.5..1.5),
                    });
                }
            }
            corrs.push(Correspondence {
                agent_a: AgentId::ALL[a],
                agent_b: AgentId::ALL[b],
                entries,
            });
        }
        let params = CrfParams {
            theta: rng.gen_range(0.3..2.0),
            w_intra: rng.gen_range(0.0..1.0),
            w_cross: rng.gen_range(0.0..1.0),
            neighborhood_radius: 1 + trial % 3,
            iterations: 1,
            mode: CrfMode::Neighborhood,
        };
        let labels: Vec<Vec<usize>> = agents
            .iter()
            .map(|a| (0..a.frame.n_visible()).map(|_| rng.gen_range(0..a.bins.k())).collect())
            .collect();
        let fast = crf_energy(&labels, &agents, &corrs, &params).unwrap();
        let naive = crf_energy_naive(&labels, &agents, &corrs, &params).unwrap();
        energy_gap = energy_gap.max((fast - naive).abs());
    }
    report(
        5,
        "crf oracle",
        worst < 0.05 && energy_ok >= 95 && energy_gap < 1e-9,
        format!("max TV {worst:.4}, refined energy no worse in {energy_ok}/100, fast vs naive {energy_gap:.1e}"),
    )
}

fn geometry_round_trip() -> Verdict {
    let grid = GridConfig::default().grid().unwrap();
    let cams = RigConfig::default().cameras(&grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for n in 0..10_000 {
        let cam = &cams[&AgentId::ALL[n % 3]];
        let (p, proj) = loop {
            let p = Vector3::new(
                rng.gen_range(grid.x_min..grid.x_max),
                rng.gen_range(grid.y_min..grid.y_max),
                rng.gen_range(-12.0..0.5),
            );
            if let Some(proj) = project_world_to_pixel(&p, cam).filter(|q| q.depth > 0.5) {
                break (p, proj);
            }
        };
        let back = unproject_pixel_to_world(proj.u, proj.v, proj.depth, cam).unwrap();
        worst = worst.max((back - p).norm());
    }
    report(6, "geometry round trip", worst < 1e-6, format!("worst {worst:.2e} m over 10000 points, 3 cameras"))
}

fn lift_conservation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut worst_mass, mut worst_order) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let c = random_case(&mut rng);
        let whole = lift_splat(&c.frame, &c.dist, &c.cam, &c.grid).unwrap();
        let got: f64 = whole.data.iter().map(|x| x.abs()).sum();
        let want = expected_mass(&c);
        worst_mass = worst_mass.max((got - want).abs() / want.max(f64::MIN_POSITIVE));

        let mut pixels: Vec<usize> = (0..H * W).filter(|&p| c.vis[(p / W, p % W)]).collect();
        pixels.shuffle(&mut rng);
        let mut groups: Vec<&[usize]> = pixels.chunks(1 + pixels.len() / 7).collect();
        groups.shuffle(&mut rng);
        let mut sum = Array3::<f64>::zeros(whole.data.dim());
        for g in groups {
            let (f, d) = sub_case(&c, g);
            sum += &lift_splat(&f, &d, &c.cam, &c.grid).unwrap().data;
        }
        let scale = whole.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let diff = whole.data.iter().zip(sum.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst_order = worst_order.max(diff / scale);
    }
    report(
        7,
        "lift-splat conservation",
        worst_mass < 1e-6 && worst_order < 1e-6,
        format!("mass rel err {worst_mass:.1e}, order err {worst_order:.1e} over 100 frames"),
    )
}

fn metrics_oracle() -> Verdict {
    let cfg = MetricsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst, mut mismatched, mut compared) = (0.0f64, 0, 0);
    for _ in 0..200 {
        let s = random_fixture(&mut rng);
        for class in CLASSES {
            let n_gt = s.gts.iter().filter(|g| g.class == class).count();
            for d in THRESHOLDS {
                let want = reference_ap(&reference_tp_flags(&s, class, d), n_gt);
                let got = average_precision(std::slice::from_ref(&s), class, d, &cfg);
                match (got, want) {
                    (Some(g), Some(w)) => {
                        worst = worst.max((g - w).abs());
                        compared += 1;
                    }
                    (None, None) => {}
                    _ => mismatched += 1,
                }
            }
        }
    }
    report(
        8,
        "metrics oracle",
        worst < 1e-9 && mismatched == 0,
        format!("{compared} AP values, max diff {worst:.1e}, {mismatched} definedness mismatches"),
    )
}

fn fusion_algebra() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut omega_err = 0.0f64;
    let mut row_err = 0.0f64;
    for _ in 0..200 {
        let (nx, ny, c) = (8 * rng.gen_range(1..4), 8 * rng.gen_range(1..4), rng.gen_range(1..6));
        let map = |rng: &mut ChaCha8Rng| Array3::from_shape_fn((nx, ny, c), |_| rng.gen_range(-2.0..2.0));
        let f = map(&mut rng);
        let cascades: Vec<_> = (0..LEVELS).map(|_| cascade(&map(&mut rng), &map(&mut rng)).unwrap()).collect();
        for mode in [CorrelationMode::Cosine, CorrelationMode::Literal] {
            let w = correlation_weights(&f, &cascades, mode).unwrap();
            omega_err = omega_err.max((w.omega.iter().sum::<f64>() - 1.0).abs());
            if w.omega.iter().any(|o| *o < 0.0) {
                omega_err = f64::INFINITY;
            }
        }
        let d = rng.gen_range(1..12);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let keys: Vec<Vec<f64>> = (0..rng.gen_range(1..30))
            .map(|_| (0..d).map(|_| rng.gen_range(-50.0..50.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = keys.iter().map(|k| k.as_slice()).collect();
        row_err = row_err.max((attention_weights(&q, &refs, d).iter().sum::<f64>() - 1.0).abs());
    }

    let mut fixed_err = 0.0f64;
    let mut endpoints = true;
    for t in 0..40 {
        let (nx, ny, c) = (rng.gen_range(2..40), rng.gen_range(2..40), rng.gen_range(1..6));
        let x = Array3::from_shape_fn((nx, ny, c), |_| rng.gen_range(-3.0..3.0));
        let y = Array3::from_shape_fn((nx, ny, c), |_| rng.gen_range(-3.0..3.0));
        let grid = BevGrid::new(0.0, nx as f64, 0.0, ny as f64, 1.0).unwrap();
        let bev = |data: &Array3<f64>, a| BevFeature {
            grid: grid.clone(),
            data: data.clone(),
            agents: vec![a],
        };
        let cfg = AttentionConfig {
            token_pool: [1, 2, 4, 8][t % 4],
            lambda: 0.5,
            ..AttentionConfig::default()
        };
        let out = fuse(&bev(&x, AgentId::Vehicle), &bev(&x, AgentId::UavR), &cfg).unwrap();
        fixed_err = fixed_err.max(out.data.iter().zip(x.iter()).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())));
        endpoints &= blend(&x, &y, 1.0).unwrap() == x && blend(&x, &y, 0.0).unwrap() == y;
    }
    report(
        9,
        "fusion algebra",
        omega_err < 1e-9 && row_err < 1e-9 && fixed_err < 1e-6 && endpoints,
        format!(
            "omega sum err {omega_err:.1e}, attention row err {row_err:.1e}, fuse(X,X) err {fixed_err:.1e}, \
             blend endpoints {}",
            if endpoints { "exact" } else { "inexact" }
        ),
    )
}

fn ideal_inputs() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.scenes = SCENES;
    cfg.noise = NoiseConfig::zero();
    cfg.scene.occlusion_rate = 0.0;
    let out = run(&cfg).expect("run succeeds");
    let (map, ate) = (out.report.map, out.report.m_ate);
    report(
        10,
        "ideal-input exactness",
        map == 1.0 && ate < cfg.grid.cell_size,
        format!("mAP {map:.6}, mATE {ate:.4} m (cell {} m)", cfg.grid.cell_size),
    )
}

fn main() -> ExitCode {
    let mut verdicts = vec![nds_row(), crf_oracle(), geometry_round_trip(), lift_conservation(), metrics_oracle(), fusion_algebra()];
    verdicts.push(ideal_inputs());
    verdicts.extend(collaboration_and_fusion());
    verdicts.push(depth_refinement());
    verdicts.sort_by_key(|v| v.id);

    println!();
    let mut surprises = Vec::new();
    for v in &verdicts {
        let expected_pass = !EXPECTED_UNMET.contains(&v.id);
        if v.pass != expected_pass {
            surprises.push(format!(
                "criterion {} {} unexpectedly: {}",
                v.id,
                if v.pass { "passed" } else { "failed" },
                v.detail
            ));
        }
    }
    let met = verdicts.iter().filter(|v| v.pass).count();
    println!("{met}/{} criteria met; expected unmet: {EXPECTED_UNMET:?}", verdicts.len());
    if surprises.is_empty() {
        ExitCode::SUCCESS
    } else {
        for s in surprises {
            println!("{s}");
        }
        ExitCode::FAILURE
    }
}
