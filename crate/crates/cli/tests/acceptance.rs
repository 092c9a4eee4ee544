//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances and
//! runtime budgets are pinned below.

mod common;

use std::collections::VecDeque;
use std::time::Instant;

use nodekit_core::atlas::{build_distance_prior, build_prob_atlas};
use nodekit_core::filters::{gaussian_smooth, Connectivity};
use nodekit_core::losses::{
    combined_loss, cross_entropy, pa_weight_map, soft_dice_loss, tversky_loss, LossConfig, LossOutput, ProbVolume,
};
use nodekit_core::metrics::{assd, dice, ln_found, precision_recall, LESION_DILATION_VOX};
use nodekit_core::postprocess::{adaptive_binarize, run_postprocess, PostprocessConfig};
use nodekit_core::registration::{
    masks_to_feature, register_rigid_with, register_variational, warp, FieldDirection, LinearConfig,
    RegistrationConfig,
};
use nodekit_core::volume::{read_nifti, write_nifti_as, Interpolation, NiftiDatatype};
use nodekit_core::{LabelVolume, ScalarVolume, VolumeGeometry};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-6;
const TVERSKY_DICE_TOL: f64 = 1e-6;
const REG_CENTRE_TOL_MM: f64 = 0.5;
const REG_ANGLE_TOL_DEG: f64 = 1.0;
const REG_MAX_TRANSLATION_MM: f64 = 8.0;
const REG_MAX_ROTATION_DEG: f64 = 10.0;
const REG_TRIALS: usize = 8;
const DEMONS_OFFSET_MM: f64 = 4.0;
const DEMONS_MIN_DICE: f64 = 0.90;
const METRIC_DIST_TOL: f64 = 1e-9;
const NIFTI_GEOM_TOL: f64 = 1e-6;

type Check = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget_s: Option<f64>,
    run: fn() -> Check,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cube(n: usize, spacing: [f64; 3]) -> VolumeGeometry {
    VolumeGeometry::new([n; 3], spacing).unwrap()
}

fn random_probs(r: &mut ChaCha8Rng, g: &VolumeGeometry, lo: f64, hi: f64) -> ProbVolume {
    ProbVolume::new(ScalarVolume::from_fn(g.clone(), |_, _, _| r.random_range(lo..hi)).unwrap()).unwrap()
}

fn random_labels(r: &mut ChaCha8Rng, g: &VolumeGeometry, frac: f64) -> LabelVolume {
    LabelVolume::from_fn(g.clone(), |_, _, _| u32::from(r.random_bool(frac))).unwrap()
}

/// A few random balls.
fn random_balls(r: &mut ChaCha8Rng, g: &VolumeGeometry, count: usize, rmax: f64) -> LabelVolume {
    let d = g.dims;
    let balls: Vec<([f64; 3], f64)> = (0..count)
        .map(|_| {
            let c = [0, 1, 2].map(|a| r.random_range(0.0..d[a] as f64));
            (c, r.random_range(0.8..rmax))
        })
        .collect();
    LabelVolume::from_fn(g.clone(), |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        u32::from(balls.iter().any(|(c, rad)| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= rad * rad))
    })
    .unwrap()
}

// ---------------------------------------------------------------- losses

fn weight_map_exhaustive() -> Check {
    let g = cube(9, [1.0; 3]);
    let cfg = LossConfig::default();
    let (mut checked, mut lo, mut hi) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
    for gflag in [false, true] {
        let gt = LabelVolume::from_fn(g.clone(), |i, j, k| u32::from(gflag && (i, j, k) == (4, 4, 4))).unwrap();
        for step in 0..=10 {
            let p = step as f64 / 10.0;
            let pa = ScalarVolume::filled(g.clone(), p).unwrap();
            let w = pa_weight_map(&gt, &pa, &cfg).map_err(|e| e.to_string())?;
            for n in 0..g.len() {
                let [i, j, k] = g.voxel_index(n);
                let d2 = [i, j, k].iter().map(|&x| (x as i64 - 4).pow(2)).sum::<i64>();
                let big_g = gflag && d2 <= 4;
                let expected = if big_g {
                    1.0
                } else if p <= 0.25 {
                    1.0 - p
                } else {
                    0.75
                };
                let got = w.weights()[n];
                if got != expected {
                    return Err(format!("g={gflag} G={big_g} p={p}: w={got}, expected {expected}"));
                }
                lo = lo.min(got);
                hi = hi.max(got);
                checked += 1;
            }
        }
    }
    if lo < 0.75 || hi > 1.0 {
        return Err(format!("range [{lo}, {hi}] escapes [0.75, 1]"));
    }
    Ok(format!("{checked} voxels over 22 (g, p) combinations, range [{lo}, {hi}]"))
}

fn adaptive_threshold_formula() -> Check {
    let mut r = rng(2);
    let g = VolumeGeometry::new([4, 1, 1], [1.0; 3]).unwrap();
    for case in 0..1000 {
        let t = r.random_range(0.01..0.99);
        let p: f64 = r.random();
        let m = t * (1.0 - 0.5 * p);
        let q = [r.random::<f64>(), m, (m - 1e-12).max(0.0), (m + 1e-12).min(1.0)];
        let probs = ProbVolume::new(ScalarVolume::new(g.clone(), q.to_vec()).unwrap()).unwrap();
        let pa = ScalarVolume::filled(g.clone(), p).unwrap();
        let cfg = PostprocessConfig { t, ..PostprocessConfig::default() };
        let bin = adaptive_binarize(&probs, &pa, &cfg).map_err(|e| e.to_string())?;
        for (n, &qv) in q.iter().enumerate() {
            if bin.data()[n] != u32::from(qv >= m) {
                return Err(format!("pair {case}: t={t} p={p} q={qv} threshold {m}"));
            }
        }
    }
    let g = cube(8, [1.0; 3]);
    for case in 0..100 {
        let probs = random_probs(&mut r, &g, 0.0, 1.0);
        let pa = ScalarVolume::from_fn(g.clone(), |_, _, _| r.random()).unwrap();
        let bumps: Vec<f64> = (0..g.len()).map(|_| r.random_range(0.0..0.5)).collect();
        let pa_up = pa.with_data(pa.data().iter().zip(&bumps).map(|(v, b)| (v + b).min(1.0)).collect()).unwrap();
        let (t1, t2) = {
            let (a, b): (f64, f64) = (r.random_range(0.01..0.99), r.random_range(0.01..0.99));
            (a.min(b), a.max(b))
        };
        let bin = |t: f64, pa: &ScalarVolume| {
            adaptive_binarize(&probs, pa, &PostprocessConfig { t, ..PostprocessConfig::default() }).unwrap()
        };
        let (lo_t, hi_t, up) = (bin(t1, &pa), bin(t2, &pa), bin(t2, &pa_up));
        for n in 0..g.len() {
            if hi_t.data()[n] > lo_t.data()[n] {
                return Err(format!("volume {case}: raising t from {t1} to {t2} added voxel {n}"));
            }
            if hi_t.data()[n] > up.data()[n] {
                return Err(format!("volume {case}: raising p removed voxel {n}"));
            }
        }
    }
    Ok("1000 (t, p) pairs incl. ties match t·(1 − 0.5·p); monotone in t and p on 100 volumes".into())
}

fn fd_check(name: &str, pred: &ProbVolume, f: &dyn Fn(&ProbVolume) -> LossOutput) -> Result<f64, String> {
    let grad = f(pred).gradient;
    let mut worst = 0.0f64;
    for n in 0..pred.probs().len() {
        let eval = |delta: f64| {
            let mut d = pred.probs().to_vec();
            d[n] += delta;
            f(&ProbVolume::new(ScalarVolume::new(pred.geometry().clone(), d).unwrap()).unwrap()).value
        };
        let numeric = (eval(GRAD_STEP) - eval(-GRAD_STEP)) / (2.0 * GRAD_STEP);
        let analytic = grad.data()[n];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel > GRAD_REL_TOL {
            return Err(format!("{name} voxel {n}: analytic {analytic:e}, numeric {numeric:e}"));
        }
    }
    Ok(worst)
}

fn loss_gradients() -> Check {
    let mut r = rng(3);
    let g = cube(6, [1.0; 3]);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pred = random_probs(&mut r, &g, 0.05, 0.95);
        let mut gt = random_labels(&mut r, &g, 0.3);
        if gt.count_nonzero() == 0 {
            gt = LabelVolume::from_fn(g.clone(), |i, _, _| u32::from(i == 0)).unwrap();
        }
        let pa = ScalarVolume::from_fn(g.clone(), |_, _, _| r.random()).unwrap();
        let w = pa_weight_map(&gt, &pa, &cfg).unwrap();
        let eps = cfg.smooth_eps;
        let checks: [(&str, Box<dyn Fn(&ProbVolume) -> LossOutput>); 5] = [
            ("cross-entropy", Box::new(|p| cross_entropy(p, &gt).unwrap())),
            ("soft Dice", Box::new(|p| soft_dice_loss(p, &gt, None, eps).unwrap())),
            ("weighted soft Dice", Box::new(|p| soft_dice_loss(p, &gt, Some(&w), eps).unwrap())),
            ("Tversky", Box::new(|p| tversky_loss(p, &gt, cfg.alpha, cfg.beta, eps).unwrap())),
            ("combined", Box::new(|p| combined_loss(p, &gt, Some(&pa), &cfg).unwrap())),
        ];
        for (name, f) in &checks {
            worst = worst.max(fd_check(name, &pred, f.as_ref())?);
        }
    }
    Ok(format!("5 losses × 20 volumes, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:e})"))
}

fn tversky_matches_dice() -> Check {
    let mut r = rng(4);
    let g = cube(8, [1.0; 3]);
    let eps = LossConfig::default().smooth_eps;
    let mut worst = 0.0f64;
    for case in 0..100 {
        let pred = random_probs(&mut r, &g, 0.0, 1.0);
        let frac = r.random_range(0.05..0.6);
        let gt = random_labels(&mut r, &g, frac);
        let t = tversky_loss(&pred, &gt, 0.5, 0.5, eps).unwrap().value;
        let d = soft_dice_loss(&pred, &gt, None, eps).unwrap().value;
        worst = worst.max((t - d).abs());
        if (t - d).abs() > TVERSKY_DICE_TOL {
            return Err(format!("volume {case}: Tversky {t}, Dice {d}"));
        }
    }
    Ok(format!("100 volumes, max |Tversky(0.5,0.5) − Dice| = {worst:.2e}"))
}

// ---------------------------------------------------------- registration

const PHANTOM_N: usize = 48;
const SPHERES: [([f64; 3], f64); 2] = [([17.5, 23.5, 23.5], 5.0), ([30.5, 23.5, 23.5], 6.0)];

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Two-sphere mask sampled through `inv` (phantom point for each voxel).
fn sphere_phantom(inv: impl Fn([f64; 3]) -> [f64; 3]) -> LabelVolume {
    LabelVolume::from_fn(cube(PHANTOM_N, [1.0; 3]), |i, j, k| {
        let p = inv([i as f64, j as f64, k as f64]);
        u32::from(SPHERES.iter().any(|(c, r)| norm(sub(p, *c)) <= *r))
    })
    .unwrap()
}

fn random_unit(r: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| r.random_range(-1.0..1.0));
        let n = norm(v);
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn rigid_recovery() -> Check {
    let mut r = rng(5);
    let centre = [23.5; 3];
    let fixed = masks_to_feature(&[sphere_phantom(|p| p)], &[1]).unwrap();
    let axis0 = sub(SPHERES[1].0, SPHERES[0].0).map(|x| x / norm(sub(SPHERES[1].0, SPHERES[0].0)));
    let (mut worst_c, mut worst_a) = (0.0f64, 0.0f64);
    for trial in 0..REG_TRIALS {
        let rot = rotation(random_unit(&mut r), r.random_range(0.0..REG_MAX_ROTATION_DEG).to_radians());
        let t = random_unit(&mut r).map(|x| x * r.random_range(0.0..REG_MAX_TRANSLATION_MM));
        // true fixed→moving map: x ↦ R(x − c) + c + t
        let map = |x: [f64; 3]| {
            let y = mat_vec(&rot, sub(x, centre));
            [y[0] + centre[0] + t[0], y[1] + centre[1] + t[1], y[2] + centre[2] + t[2]]
        };
        let rt = [0, 1, 2].map(|a| [rot[0][a], rot[1][a], rot[2][a]]);
        let moving_mask = sphere_phantom(|y| {
            let v = mat_vec(&rt, sub(sub(y, centre), t));
            [v[0] + centre[0], v[1] + centre[1], v[2] + centre[2]]
        });
        let moving = masks_to_feature(&[moving_mask], &[1]).unwrap();
        let est = register_rigid_with(&fixed, &moving, &LinearConfig::default()).map_err(|e| e.to_string())?.transform;
        for (c, _) in SPHERES {
            let e = norm(sub(est.apply(c), map(c)));
            worst_c = worst_c.max(e);
        }
        let l = est.linear();
        let a_est = [0, 1, 2].map(|row| (0..3).map(|col| l[(row, col)] * axis0[col]).sum::<f64>());
        let a_true = mat_vec(&rot, axis0);
        let cos = (0..3).map(|i| a_est[i] * a_true[i]).sum::<f64>() / (norm(a_est) * norm(a_true));
        let ang = cos.clamp(-1.0, 1.0).acos().to_degrees();
        worst_a = worst_a.max(ang);
        if worst_c > REG_CENTRE_TOL_MM || ang > REG_ANGLE_TOL_DEG {
            return Err(format!("trial {trial}: centre error {worst_c:.3} mm, axis error {ang:.3}°"));
        }
    }
    Ok(format!(
        "{REG_TRIALS} rigid trials (≤{REG_MAX_TRANSLATION_MM} mm, ≤{REG_MAX_ROTATION_DEG}°): worst centre error {worst_c:.3} mm, worst axis error {worst_a:.3}°"
    ))
}

fn demons_dice() -> Check {
    let fixed_mask = sphere_phantom(|p| p);
    let image = |m: &LabelVolume| m.with_data(gaussian_smooth(&m.to_scalar().into_data(), m.dims(), [1.0; 3])).unwrap();
    let fixed = image(&fixed_mask);
    let mut r = rng(6);
    let dirs = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0 / 3f64.sqrt(); 3], random_unit(&mut r)];
    let mut report = Vec::new();
    let mut worst = f64::INFINITY;
    for d in dirs {
        let off = d.map(|x| x * DEMONS_OFFSET_MM);
        let moving_mask = sphere_phantom(|p| sub(p, off));
        let before = dice(&fixed_mask, &moving_mask).unwrap();
        let u = register_variational(&fixed, &image(&moving_mask), &RegistrationConfig::default(), FieldDirection::SubjectToAtlas)
            .map_err(|e| e.to_string())?;
        let warped = warp(&moving_mask, None, Some(&u), Interpolation::Nearest).unwrap();
        let after = dice(&fixed_mask, &warped).unwrap();
        report.push(format!("{before:.3}→{after:.3}"));
        worst = worst.min(after);
    }
    let msg = format!("4 mm offsets, Dice {} (min {DEMONS_MIN_DICE})", report.join(", "));
    if worst < DEMONS_MIN_DICE {
        Err(msg)
    } else {
        Ok(msg)
    }
}

// --------------------------------------------------------------- metrics

fn brute_surface(m: &LabelVolume) -> Vec<[usize; 3]> {
    let [nx, ny, nz] = m.dims();
    let fg = |i: i64, j: i64, k: i64| {
        i >= 0 && j >= 0 && k >= 0 && (i as usize) < nx && (j as usize) < ny && (k as usize) < nz && m.get(i as usize, j as usize, k as usize) != 0
    };
    let mut out = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c) = (i as i64, j as i64, k as i64);
                if fg(a, b, c)
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|(x, y, z)| !fg(a + x, b + y, c + z))
                {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

fn brute_assd(a: &LabelVolume, b: &LabelVolume) -> Option<f64> {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let sp = a.spacing();
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3).map(|x| ((p[x] as f64 - q[x] as f64) * sp[x]).powi(2)).sum::<f64>().sqrt()
    };
    let side = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        from.iter().map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum()
    };
    Some((side(&sa, &sb) + side(&sb, &sa)) / (sa.len() + sb.len()) as f64)
}

fn brute_dilate(m: &LabelVolume, r: usize) -> Vec<bool> {
    let [nx, ny, nz] = m.dims();
    let r = r as i64;
    (0..m.len())
        .map(|n| {
            let [i, j, k] = m.geometry().voxel_index(n);
            (-r..=r).any(|a| {
                (-r..=r).any(|b| {
                    (-r..=r).any(|c| {
                        let (x, y, z) = (i as i64 + a, j as i64 + b, k as i64 + c);
                        a * a + b * b + c * c <= r * r
                            && x >= 0 && y >= 0 && z >= 0
                            && (x as usize) < nx && (y as usize) < ny && (z as usize) < nz
                            && m.get(x as usize, y as usize, z as usize) != 0
                    })
                })
            })
        })
        .collect()
}

/// Breadth-first 26-connected labelling.
fn brute_components(mask: &[bool], dims: [usize; 3]) -> (Vec<usize>, usize) {
    let [nx, ny, nz] = dims;
    let mut label = vec![0usize; mask.len()];
    let mut count = 0;
    for seed in 0..mask.len() {
        if !mask[seed] || label[seed] != 0 {
            continue;
        }
        count += 1;
        label[seed] = count;
        let mut queue = VecDeque::from([seed]);
        while let Some(n) = queue.pop_front() {
            let (i, j, k) = ((n % nx) as i64, ((n / nx) % ny) as i64, (n / (nx * ny)) as i64);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (x, y, z) = (i + dx, j + dy, k + dz);
                        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                            continue;
                        }
                        let m = x as usize + nx * (y as usize + ny * z as usize);
                        if mask[m] && label[m] == 0 {
                            label[m] = count;
                            queue.push_back(m);
                        }
                    }
                }
            }
        }
    }
    (label, count)
}

/// (tp, fp, fn, ln_found)
fn brute_lesions(pred: &LabelVolume, gt: &LabelVolume, r: usize) -> (usize, usize, usize, f64) {
    let dims = pred.dims();
    let (dp, dg) = (brute_dilate(pred, r), brute_dilate(gt, r));
    let (lp, np) = brute_components(&dp, dims);
    let (lg, ng) = brute_components(&dg, dims);
    let tp = (1..=ng).filter(|&c| (0..lg.len()).any(|n| lg[n] == c && dp[n])).count();
    let fp = (1..=np).filter(|&c| !(0..lp.len()).any(|n| lp[n] == c && dg[n])).count();
    let found = if ng == 0 { 1.0 } else { tp as f64 / ng as f64 };
    (tp, fp, ng - tp, found)
}

fn metrics_oracle() -> Check {
    let mut r = rng(7);
    let mut assd_checked = 0;
    let mut worst = 0.0f64;
    for case in 0..50 {
        let spacing = [0; 3].map(|_| r.random_range(0.5..2.0));
        let g = cube(16, spacing);
        let count = r.random_range(1..5);
        let gt = random_balls(&mut r, &g, count, 3.5);
        let pred = if case % 10 == 0 {
            LabelVolume::zeros(g.clone()).unwrap()
        } else {
            let count = r.random_range(1..5);
            let blobs = random_balls(&mut r, &g, count, 3.5);
            let noise = random_labels(&mut r, &g, 0.01);
            let keep = r.random_bool(0.5);
            LabelVolume::from_fn(g.clone(), |i, j, k| {
                let n = g.linear_index(i, j, k);
                u32::from(blobs.data()[n] != 0 || noise.data()[n] != 0 || (keep && gt.data()[n] != 0 && (i + j) % 3 != 0))
            })
            .unwrap()
        };
        let a: Vec<bool> = pred.data().iter().map(|&v| v != 0).collect();
        let b: Vec<bool> = gt.data().iter().map(|&v| v != 0).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let (na, nb) = (a.iter().filter(|&&x| x).count(), b.iter().filter(|&&x| x).count());
        let d_exp = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let d = dice(&pred, &gt).unwrap();
        if d != d_exp {
            return Err(format!("case {case}: Dice {d} vs oracle {d_exp}"));
        }
        let pr = precision_recall(&pred, &gt).unwrap();
        let ratio = |den: usize| if den == 0 { 1.0 } else { inter as f64 / den as f64 };
        if pr.precision != ratio(na) || pr.recall != ratio(nb) || pr.precision_undefined != (na == 0) {
            return Err(format!("case {case}: precision/recall {pr:?}"));
        }
        match (assd(&pred, &gt), brute_assd(&pred, &gt)) {
            (Ok(v), Some(o)) => {
                worst = worst.max((v - o).abs());
                if (v - o).abs() > METRIC_DIST_TOL {
                    return Err(format!("case {case}: ASSD {v} vs oracle {o}"));
                }
                assd_checked += 1;
            }
            (Err(_), None) => {}
            (v, o) => return Err(format!("case {case}: ASSD {v:?} vs oracle {o:?}")),
        }
        let ln = ln_found(&pred, &gt, LESION_DILATION_VOX, Connectivity::TwentySix).unwrap();
        let (tp, fp, fn_, found) = brute_lesions(&pred, &gt, LESION_DILATION_VOX);
        if (ln.tp, ln.fp, ln.fn_) != (tp, fp, fn_) || ln.ln_found != found {
            return Err(format!("case {case}: lesions {ln:?} vs oracle tp={tp} fp={fp} fn={fn_}"));
        }
    }
    Ok(format!("50 fixtures; counts exact, {assd_checked} ASSD values within {worst:.1e} mm"))
}

fn ln_found_fixture() -> Check {
    let g = cube(16, [1.0; 3]);
    let ball = |c: [f64; 3], rad: f64| {
        move |i: usize, j: usize, k: usize| norm(sub([i as f64, j as f64, k as f64], c)) <= rad
    };
    let (b1, b2) = (ball([3.0, 3.0, 3.0], 1.5), ball([12.0, 12.0, 12.0], 1.5));
    let gt = LabelVolume::from_fn(g.clone(), |i, j, k| u32::from(b1(i, j, k) || b2(i, j, k))).unwrap();
    let pred = LabelVolume::from_fn(g, |i, j, k| u32::from(ball([3.0, 3.0, 4.0], 1.2)(i, j, k))).unwrap();
    let ln = ln_found(&pred, &gt, LESION_DILATION_VOX, Connectivity::TwentySix).unwrap();
    if ln.ln_found == 0.5 && ln.tp == 1 && ln.fn_ == 1 && ln.fp == 0 {
        Ok(format!("ln_found = {} (tp 1, fn 1, fp 0)", ln.ln_found))
    } else {
        Err(format!("{ln:?}"))
    }
}

// ----------------------------------------------------------------- atlas

fn atlas_properties() -> Check {
    let mut r = rng(8);
    let g = cube(16, [1.0; 3]);
    let masks: Vec<LabelVolume> = (0..6).map(|_| random_balls(&mut r, &g, 3, 4.0)).collect();
    let base = build_prob_atlas(&masks, 2.0).map_err(|e| e.to_string())?;
    for _ in 0..5 {
        let mut shuffled = masks.clone();
        shuffled.shuffle(&mut r);
        if build_prob_atlas(&shuffled, 2.0).unwrap().vol.data() != base.vol.data() {
            return Err("atlas changes under permutation of subjects".into());
        }
    }
    let (lo, hi) = base.vol.min_max();
    if (lo, hi) != (0.0, 1.0) {
        return Err(format!("atlas range [{lo}, {hi}]"));
    }
    let geom = VolumeGeometry::new([20, 18, 16], [1.2, 0.9, 2.0]).unwrap().with_origin([-10.0, 5.0, 30.0]);
    let region = LabelVolume::from_fn(geom.clone(), |i, j, k| u32::from((4..16).contains(&i) && (3..15).contains(&j) && (2..14).contains(&k))).unwrap();
    for n in 0..10 {
        let idx = [0, 1, 2].map(|a| r.random_range(0.0..(geom.dims[a] - 1) as f64));
        let reference = geom.index_to_physical(idx);
        let dm = build_distance_prior(&geom, reference, &region).map_err(|e| e.to_string())?;
        let mut pairs: Vec<(f64, f64)> = (0..geom.len())
            .map(|v| {
                let [i, j, k] = geom.voxel_index(v);
                (norm(sub(geom.voxel_center(i, j, k), reference)), dm.vol.data()[v])
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = pairs.windows(2).find(|w| w[1].1 < w[0].1) {
            return Err(format!("reference {n}: prior decreases from {} to {} with distance", w[0].1, w[1].1));
        }
    }
    Ok("permutation invariant (5 shuffles), range exactly [0, 1], distance prior monotone for 10 references".into())
}

// ----------------------------------------------------------- postprocess

fn postprocess_monotone() -> Check {
    let mut r = rng(9);
    let g = cube(16, [1.0, 1.0, 1.5]);
    let mut grew = 0;
    for case in 0..50 {
        let smooth = |r: &mut ChaCha8Rng, sigma: f64| {
            let noise: Vec<f64> = (0..g.len()).map(|_| r.random()).collect();
            let s = gaussian_smooth(&noise, g.dims, [sigma; 3]);
            let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            ScalarVolume::new(g.clone(), s.iter().map(|v| (v - lo) / (hi - lo).max(1e-12)).collect()).unwrap()
        };
        let probs = vec![ProbVolume::new(smooth(&mut r, 1.5)).unwrap(), ProbVolume::new(smooth(&mut r, 1.0)).unwrap()];
        let pa = smooth(&mut r, 2.5);
        let lungs = random_balls(&mut r, &g, 2, 6.0);
        if lungs.count_nonzero() == 0 {
            continue;
        }
        let run = |t: f64| {
            run_postprocess(&probs, &pa, &lungs, None, &PostprocessConfig { t, ..PostprocessConfig::default() }).unwrap()
        };
        let (hi_t, lo_t) = (run(0.5), run(0.2));
        if hi_t.data().iter().zip(lo_t.data()).any(|(a, b)| *a != 0 && *b == 0) {
            return Err(format!("case {case}: lowering t removed voxels"));
        }
        grew += usize::from(lo_t.count_nonzero() > hi_t.count_nonzero());
    }
    Ok(format!("50 cases, t 0.5 → 0.2 never shrinks the mask ({grew} strictly grew)"))
}

// ------------------------------------------------------------------- cli

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let files = write_phantom(dir);
    let cfg = write_config(dir, &files);
    let fixture = dir.join("fixture");
    std::fs::create_dir_all(&fixture).unwrap();
    let (probs, pa, lungs) = probs_fixture(&fixture);
    let out = dir.join("out");
    let (pred_dir, gt_dir) = (dir.join("pred"), dir.join("gt"));
    let c = s(&cfg);
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("build-atlas", vec!["--config", c, "build-atlas", "--out-dir", s(&out)].into_iter().map(String::from).collect()),
        ("prepare", vec!["--config", c, "prepare", "--out-dir", s(&out)].into_iter().map(String::from).collect()),
        ("augment", vec!["--config", c, "--seed", "11", "augment", "--epoch", "300", s(&files["ct"]), &format!("{}/aug.nii.gz", s(&out))].into_iter().map(String::from).collect()),
        ("loss", vec!["loss", "--pred", s(&probs), "--gt", s(&lungs), "--pa", s(&pa), "--out", &format!("{}/loss.json", s(&out))].into_iter().map(String::from).collect()),
        ("postprocess", vec!["postprocess", "--t", "0.3", "--min-diam", "3", "--pa", s(&pa), "--lungs", s(&lungs), s(&probs), &format!("{}/case01.nii.gz", s(&pred_dir))].into_iter().map(String::from).collect()),
        ("postprocess --grid", vec!["postprocess", "--pa", s(&pa), "--lungs", s(&lungs), "--grid", "t=0.5,0.3,0.2", "diam=none,3,5,7", s(&probs), &format!("{}/grid", s(&out))].into_iter().map(String::from).collect()),
        ("evaluate", vec!["evaluate", "--pred", s(&pred_dir), "--gt", s(&gt_dir), "--out", &format!("{}/report.json", s(&out))].into_iter().map(String::from).collect()),
    ];
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&gt_dir).unwrap();
    std::fs::copy(&lungs, gt_dir.join("case01.nii.gz")).unwrap();
    let watched = [out.clone(), out.join("grid"), pred_dir.clone()];
    let snap = || watched.iter().filter(|d| d.is_dir()).flat_map(|d| snapshot(d)).collect::<Vec<_>>();
    for (name, args) in &commands {
        let a: Vec<&str> = args.iter().map(String::as_str).collect();
        let first = nodekit(&a);
        if !first.status.success() {
            return Err(format!("{name} failed: {}", String::from_utf8_lossy(&first.stderr)));
        }
        let before = snap();
        nodekit(&a);
        if before != snap() {
            return Err(format!("{name} output differs on re-run"));
        }
    }
    let total = snap().len();
    Ok(format!("{} commands re-run byte-identically ({total} output files)", commands.len()))
}

// ----------------------------------------------------------------- nifti

fn nifti_round_trip() -> Check {
    let mut r = rng(10);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for n in 0..100 {
        let dt = NiftiDatatype::ALL[n % NiftiDatatype::ALL.len()];
        let dims = [0; 3].map(|_| r.random_range(1..12));
        let spacing = [0; 3].map(|_| r.random_range(0.3..4.0));
        let origin = [0; 3].map(|_| r.random_range(-300.0..300.0));
        let mut dir = rotation(random_unit(&mut r), r.random_range(0.0..std::f64::consts::PI));
        if n % 3 == 0 {
            for row in &mut dir {
                row[2] = -row[2];
            }
        }
        let geom = VolumeGeometry::new(dims, spacing).unwrap().with_origin(origin).with_direction(dir).unwrap();
        let sample = |r: &mut ChaCha8Rng| -> f64 {
            match dt.int_range() {
                Some((lo, hi)) => r.random_range(lo as i64..=hi as i64) as f64,
                None => {
                    let v = r.random_range(-1.0..1.0) * 10f64.powi(r.random_range(-30..30));
                    match r.random_range(0..20) {
                        0 => -0.0,
                        1 => 0.0,
                        _ if dt == NiftiDatatype::Float32 => v as f32 as f64,
                        _ => v,
                    }
                }
            }
        };
        let vol = ScalarVolume::from_fn(geom.clone(), |_, _, _| sample(&mut r)).unwrap();
        let path = tmp.path().join(format!("v{n}.{}", if n % 2 == 0 { "nii" } else { "nii.gz" }));
        write_nifti_as(&vol, &path, dt).map_err(|e| format!("volume {n} ({dt:?}): {e}"))?;
        let back = read_nifti(&path).map_err(|e| format!("volume {n} ({dt:?}): {e}"))?;
        if back.datatype != dt {
            return Err(format!("volume {n}: datatype {:?} read back as {:?}", dt, back.datatype));
        }
        let got = back.volume;
        if got.dims() != dims || got.data().iter().zip(vol.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("volume {n} ({dt:?}): data not bitwise equal"));
        }
        let gg = got.geometry();
        let pairs = (0..3)
            .flat_map(|a| [(gg.spacing[a], spacing[a]), (gg.origin[a], origin[a])])
            .chain((0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| (gg.direction[a][b], dir[a][b])));
        for (x, y) in pairs {
            let rel = (x - y).abs() / y.abs().max(1.0);
            worst = worst.max(rel);
            if rel > NIFTI_GEOM_TOL {
                return Err(format!("volume {n}: geometry value {x} vs {y}"));
            }
        }
    }
    Ok(format!("100 volumes over {} datatypes bitwise; worst geometry error {worst:.1e} (relative)", NiftiDatatype::ALL.len()))
}

fn main() {
    let criteria = [
        Criterion { name: "weight map exhaustive (g, p) grid", budget_s: Some(1.0), run: weight_map_exhaustive },
        Criterion { name: "adaptive threshold formula and monotonicity", budget_s: Some(10.0), run: adaptive_threshold_formula },
        Criterion { name: "loss gradients vs central differences", budget_s: Some(30.0), run: loss_gradients },
        Criterion { name: "Tversky(0.5, 0.5) equals soft Dice", budget_s: None, run: tversky_matches_dice },
        Criterion { name: "rigid recovery on two-sphere phantoms", budget_s: None, run: rigid_recovery },
        Criterion { name: "variational stage Dice from 4 mm offset", budget_s: None, run: demons_dice },
        Criterion { name: "metrics vs brute-force oracle", budget_s: Some(60.0), run: metrics_oracle },
        Criterion { name: "LN found fixture", budget_s: None, run: ln_found_fixture },
        Criterion { name: "atlas properties", budget_s: None, run: atlas_properties },
        Criterion { name: "post-processing monotone in t", budget_s: None, run: postprocess_monotone },
        Criterion { name: "CLI determinism", budget_s: None, run: cli_determinism },
        Criterion { name: "NIfTI round-trip", budget_s: None, run: nifti_round_trip },
    ];
    const REGISTRATION_BUDGET_S: f64 = 300.0;
    let mut failed = 0;
    let mut registration_s = 0.0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        if c.name.contains("rigid") || c.name.contains("variational") {
            registration_s += secs;
        }
        let result = match (result, c.budget_s) {
            (Ok(msg), Some(b)) if secs > b => Err(format!("{msg}; took {secs:.2} s, budget {b} s")),
            (r, _) => r,
        };
        match result {
            Ok(msg) => println!("PASS  {:<46} {msg} [{secs:.2} s]", c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {:<46} {msg} [{secs:.2} s]", c.name);
            }
        }
    }
    if registration_s > REGISTRATION_BUDGET_S {
        failed += 1;
        println!("FAIL  {:<46} {registration_s:.1} s exceeds {REGISTRATION_BUDGET_S} s", "registration runtime");
    } else {
        println!("PASS  {:<46} {registration_s:.1} s of {REGISTRATION_BUDGET_S} s", "registration runtime");
    }
    println!("{} criteria, {failed} failed", criteria.len() + 1);
    if failed > 0 {
        std::process::exit(1);
    }
}
