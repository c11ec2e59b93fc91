use agcp::detector::Box3D;
use agcp::metrics::Sample;
use agcp::scenesim::ObjectClass;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const CLASSES: [ObjectClass; 2] = [ObjectClass::Car, ObjectClass::Pedestrian];

pub fn bx(x: f64, y: f64, class: ObjectClass, score: f64) -> Box3D {
    Box3D {
        center: [x, y, -1.0],
        size: class.size_prior(),
        yaw: 0.0,
        velocity: [0.0, 0.0],
        class,
        score,
    }
}

pub fn random_fixture(rng: &mut ChaCha8Rng) -> Sample {
    let n_pred = rng.gen_range(0..=6);
    let n_gt = rng.gen_range(0..=6);
    let gts: Vec<Box3D> = (0..n_gt)
        .map(|_| bx(rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), *CLASSES.choose(rng).unwrap(), 1.0))
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            let class = *CLASSES.choose(rng).unwrap();
            // scores on a coarse grid so ties happen
            let score = rng.gen_range(1..=5) as f64 / 5.0;
            match gts.choose(rng) {
                Some(g) if rng.gen_bool(0.7) => {
                    let r = rng.gen_range(0.0..4.5);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    bx(g.center[0] + r * a.cos(), g.center[1] + r * a.sin(), class, score)
                }
                _ => bx(rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0), class, score),
            }
        })
        .collect();
    Sample { preds, gts }
}

/// Greedy assignment written out longhand: rank predictions, and for each
/// sort every free same-class GT by (distance, index) and take the first
/// one inside the gate.
pub fn reference_tp_flags(s: &Sample, class: ObjectClass, d: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..s.preds.len()).filter(|&i| s.preds[i].class == class).collect();
    // stable sort keeps index order among equal scores
    order.sort_by(|&a, &b| s.preds[b].score.partial_cmp(&s.preds[a].score).unwrap());
    let mut free: Vec<bool> = s.gts.iter().map(|g| g.class == class).collect();
    let mut flags = Vec::new();
    for i in order {
        let p = &s.preds[i];
        let mut cands: Vec<(f64, usize)> = (0..s.gts.len())
            .filter(|&g| free[g])
            .map(|g| {
                let dx = p.center[0] - s.gts[g].center[0];
                let dy = p.center[1] - s.gts[g].center[1];
                ((dx * dx + dy * dy).sqrt(), g)
            })
            .collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        match cands.first() {
            Some(&(dist, g)) if dist < d => {
                free[g] = false;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// 101-point interpolated AP with the 0.1 recall and precision floors.
pub fn reference_ap(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    if flags.is_empty() {
        return Some(0.0);
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut tp = 0usize;
    for (n, &f) in flags.iter().enumerate() {
        tp += f as usize;
        prec.push(tp as f64 / (n + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    let mut total = 0.0;
    for i in 11..=100 {
        let r = i as f64 / 100.0;
        let p = if r < rec[0] {
            prec[0]
        } else if r > *rec.last().unwrap() {
            0.0
        } else {
            let j = rec.iter().rposition(|&x| x <= r).unwrap();
            if j + 1 == rec.len() {
                prec[j]
            } else {
                prec[j] + (prec[j + 1] - prec[j]) * (r - rec[j]) / (rec[j + 1] - rec[j])
            }
        };
        total += (p - 0.1).max(0.0);
    }
    Some(total / 90.0 / 0.9)
}
