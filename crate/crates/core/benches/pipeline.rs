//! Stage and end-to-end timings on one thread versus the default pool.
//! Build with `--no-default-features` to time the sequential fallback.

use agcp::bevlift::{area_weighted_features, lift_splat_cell_offsets};
use agcp::cdca::{fuse, AttentionConfig};
use agcp::config::RunConfig;
use agcp::depthcrf::{cross_domain_correspondence, mean_field_refine, CrfAgent, DepthDistribution};
use agcp::par;
use agcp::pipeline::{process_scene, scene_seed, Variant};
use agcp::scenesim::{generate_scene, render_agent_frame, AgentFrame, AgentId, Scene};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

struct Fixture {
    cfg: RunConfig,
    scene: Scene,
    frames: Vec<AgentFrame>,
    unary: Vec<DepthDistribution>,
}

fn fixture() -> Fixture {
    let mut cfg = RunConfig::default();
    cfg.scene.occlusion_rate = 0.5;
    let grid = cfg.grid.grid().unwrap();
    let scene = generate_scene(&cfg.scene, &cfg.rig, &grid, scene_seed(cfg.seed, 0)).unwrap();
    let mut frames = Vec::new();
    let mut unary = Vec::new();
    for a in AgentId::ALL {
        let bins = cfg.depth.for_domain(a.domain()).bins().unwrap();
        let f = render_agent_frame(&scene, a, &cfg.noise, &bins, scene.seed).unwrap();
        unary.push(DepthDistribution::from_unary(&f, &bins).unwrap());
        frames.push(f);
    }
    Fixture { cfg, scene, frames, unary }
}

/// `(label, threads)`: one worker, then whatever the default pool has.
fn pools() -> [(&'static str, usize); 2] {
    [("1-thread", 1), ("default-pool", 0)]
}

fn stages(c: &mut Criterion) {
    let fx = fixture();
    let grid = fx.cfg.grid.grid().unwrap();
    let bins: Vec<_> = AgentId::ALL
        .iter()
        .map(|a| fx.cfg.depth.for_domain(a.domain()).bins().unwrap())
        .collect();

    let mut g = c.benchmark_group("stages");
    g.sample_size(10);
    for (label, threads) in pools() {
        g.bench_with_input(BenchmarkId::new("correspondence", label), &threads, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    cross_domain_correspondence(
                        &fx.frames[0],
                        &fx.frames[1],
                        &fx.scene.cameras[&AgentId::Vehicle],
                        &fx.scene.cameras[&AgentId::UavR],
                        &fx.unary[0],
                    )
                    .unwrap()
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("mean_field", label), &threads, |b, &t| {
            let agents: Vec<CrfAgent<'_>> = fx
                .frames
                .iter()
                .zip(&bins)
                .map(|(frame, bins)| CrfAgent { frame, bins })
                .collect();
            b.iter(|| par::with_threads(t, || mean_field_refine(&agents, &[], &fx.cfg.crf).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("lift_splat", label), &threads, |b, &t| {
            let cam = &fx.scene.cameras[&AgentId::UavR];
            let (frame, dist) = (&fx.frames[1], &fx.unary[1]);
            b.iter(|| {
                par::with_threads(t, || {
                    let f = area_weighted_features(frame, dist, cam);
                    lift_splat_cell_offsets(frame, f.view(), dist, cam, &grid).unwrap()
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("fuse", label), &threads, |b, &t| {
            let lift = |i: usize, a: AgentId| {
                let cam = &fx.scene.cameras[&a];
                lift_splat_cell_offsets(&fx.frames[i], fx.frames[i].features.view(), &fx.unary[i], cam, &grid).unwrap()
            };
            let (veh, uav) = (lift(0, AgentId::Vehicle), lift(1, AgentId::UavR));
            let cfg = AttentionConfig::default();
            b.iter(|| par::with_threads(t, || fuse(&veh, &uav, &cfg).unwrap()))
        });
    }
    g.finish();
}

fn end_to_end(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.scene.occlusion_rate = 0.5;
    let variants = [Variant::from_config(&cfg, "all")];
    let mut g = c.benchmark_group("scene");
    g.sample_size(10);
    for (label, threads) in pools() {
        g.bench_with_input(BenchmarkId::new("process_scene", label), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || process_scene(&cfg, 0, &variants).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, stages, end_to_end);
criterion_main!(benches);
