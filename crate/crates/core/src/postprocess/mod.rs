//! From probability maps to final lymph node masks: prior-adaptive
//! thresholding, small-component removal, lung-hull masking, un-cropping and
//! model ensembling.

mod hull;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::filters::{label_components, Connectivity};
use crate::losses::ProbVolume;
use crate::volume::{pad_to_original, CropRecord, LabelVolume, ScalarVolume, Volume};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    /// Base threshold `t` in (0, 1).
    pub t: f64,
    /// Components whose minimum diameter is below this are removed.
    pub min_diameter_mm: Option<f64>,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { t: 0.5, min_diameter_mm: None, connectivity: Connectivity::TwentySix }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::Argument(format!("threshold t = {} must lie in (0, 1)", self.t)));
        }
        if let Some(d) = self.min_diameter_mm {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Argument(format!("min diameter {d} must be positive")));
            }
        }
        Ok(())
    }
}

/// Per-voxel threshold `t·(1 − 0.5·p)`.
pub fn adaptive_threshold(t: f64, p: f64) -> f64 {
    t * (1.0 - 0.5 * p)
}

/// Foreground where `prob ≥ t·(1 − 0.5·pa)`.
pub fn adaptive_binarize(probs: &ProbVolume, pa: &ScalarVolume, cfg: &PostprocessConfig) -> Result<LabelVolume> {
    cfg.validate()?;
    probs.geometry().ensure_aligned(pa.geometry(), "probabilities and prior")?;
    pa.ensure_unit_range("prior")?;
    let data = probs
        .probs()
        .iter()
        .zip(pa.data())
        .map(|(&q, &p)| u32::from(q >= adaptive_threshold(cfg.t, p)))
        .collect();
    Ok(Volume::from_parts(probs.geometry().clone(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub id: u32,
    pub voxel_count: usize,
    pub centroid_mm: [f64; 3],
    pub covariance_mm2: [[f64; 3]; 3],
    /// `2·sqrt(5·λ_min)` of the position covariance (solid-ellipsoid moments).
    pub min_diameter_mm: f64,
}

#[derive(Clone, Debug)]
pub struct ComponentSet {
    pub labels: LabelVolume,
    pub stats: Vec<ComponentStats>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

/// Label components (ids in first-voxel raster order) with physical moments.
pub fn connected_components(mask: &LabelVolume, connectivity: Connectivity) -> Result<ComponentSet> {
    if !mask.is_binary() {
        return Err(Error::Argument("component analysis needs a binary mask".into()));
    }
    let geom = mask.geometry();
    let fg: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    let (labels, n) = label_components(&fg, geom.dims, connectivity);

    let mut count = vec![0usize; n];
    let mut sum = vec![[0.0f64; 3]; n];
    for (lin, &l) in labels.iter().enumerate() {
        if l != 0 {
            let [i, j, k] = geom.voxel_index(lin);
            let p = geom.voxel_center(i, j, k);
            let c = (l - 1) as usize;
            count[c] += 1;
            for a in 0..3 {
                sum[c][a] += p[a];
            }
        }
    }
    let centroid: Vec<[f64; 3]> = (0..n).map(|c| sum[c].map(|s| s / count[c] as f64)).collect();
    let mut cov = vec![[[0.0f64; 3]; 3]; n];
    for (lin, &l) in labels.iter().enumerate() {
        if l != 0 {
            let [i, j, k] = geom.voxel_index(lin);
            let p = geom.voxel_center(i, j, k);
            let c = (l - 1) as usize;
            let d = [0, 1, 2].map(|a| p[a] - centroid[c][a]);
            for a in 0..3 {
                for b in 0..3 {
                    cov[c][a][b] += d[a] * d[b];
                }
            }
        }
    }
    let stats = (0..n)
        .map(|c| {
            let m = cov[c].map(|row| row.map(|v| v / count[c] as f64));
            let eig = SymmetricEigen::new(Matrix3::from_fn(|a, b| m[a][b]));
            let lmin = eig.eigenvalues.min().max(0.0);
            ComponentStats {
                id: c as u32 + 1,
                voxel_count: count[c],
                centroid_mm: centroid[c],
                covariance_mm2: m,
                min_diameter_mm: 2.0 * (5.0 * lmin).sqrt(),
            }
        })
        .collect();
    Ok(ComponentSet { labels: Volume::from_parts(geom.clone(), labels), stats })
}

/// Binary mask of the components whose minimum diameter reaches the threshold.
pub fn filter_small_components(cs: &ComponentSet, min_diameter_mm: Option<f64>) -> LabelVolume {
    let keep: Vec<bool> = std::iter::once(false)
        .chain(cs.stats.iter().map(|s| min_diameter_mm.is_none_or(|t| s.min_diameter_mm >= t)))
        .collect();
    cs.labels.map(|l| u32::from(keep[l as usize])).expect("binary labels are valid")
}

/// Convex hull of the lung voxel centres (both lungs together), voxelized.
pub fn lung_hull(lungs: &LabelVolume) -> Result<LabelVolume> {
    let fg: Vec<bool> = lungs.data().iter().map(|&v| v != 0).collect();
    if !fg.iter().any(|&v| v) {
        return Err(Error::EmptyMask("lung mask is empty".into()));
    }
    let dims = lungs.dims();
    let h = hull::Hull::build(hull::candidate_points(&fg, dims));
    Ok(Volume::from_parts(
        lungs.geometry().clone(),
        h.voxelize(dims).into_iter().map(u32::from).collect(),
    ))
}

/// Zero every prediction voxel outside the lungs' convex hull.
pub fn lung_hull_mask(pred: &LabelVolume, lungs: &LabelVolume) -> Result<LabelVolume> {
    pred.geometry().ensure_aligned(lungs.geometry(), "prediction and lung mask")?;
    let hull = lung_hull(lungs)?;
    let data = pred.data().iter().zip(hull.data()).map(|(&p, &h)| u32::from(p != 0 && h != 0)).collect();
    Ok(Volume::from_parts(pred.geometry().clone(), data))
}

/// Voxelwise mean of aligned probability maps.
pub fn ensemble(probs: &[ProbVolume]) -> Result<ProbVolume> {
    let first = probs.first().ok_or_else(|| Error::Argument("nothing to ensemble".into()))?;
    for p in probs {
        first.geometry().ensure_aligned(p.geometry(), "ensemble members")?;
    }
    let n = probs.len() as f64;
    let data = (0..first.probs().len())
        .map(|v| (probs.iter().map(|p| p.probs()[v]).sum::<f64>() / n).clamp(0.0, 1.0))
        .collect();
    ProbVolume::new(Volume::from_parts(first.geometry().clone(), data))
}

/// Ensemble → adaptive threshold → diameter filter → lung hull → un-crop.
pub fn run_postprocess(
    probs: &[ProbVolume],
    pa: &ScalarVolume,
    lungs: &LabelVolume,
    crop: Option<&CropRecord>,
    cfg: &PostprocessConfig,
) -> Result<LabelVolume> {
    cfg.validate()?;
    let mean = ensemble(probs)?;
    mean.geometry().ensure_aligned(lungs.geometry(), "probabilities and lung mask")?;
    if let Some(c) = crop {
        c.cropped_geometry().ensure_aligned(mean.geometry(), "probabilities and crop record")?;
    }
    let bin = adaptive_binarize(&mean, pa, cfg)?;
    let filtered = match cfg.min_diameter_mm {
        Some(_) => filter_small_components(&connected_components(&bin, cfg.connectivity)?, cfg.min_diameter_mm),
        None => bin,
    };
    let masked = lung_hull_mask(&filtered, lungs)?;
    match crop {
        Some(c) => pad_to_original(&masked, c),
        None => Ok(masked),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(d: [usize; 3]) -> VolumeGeometry {
        VolumeGeometry::new(d, [1.0; 3]).unwrap()
    }

    fn prob(g: &VolumeGeometry, data: Vec<f64>) -> ProbVolume {
        ProbVolume::new(ScalarVolume::new(g.clone(), data).unwrap()).unwrap()
    }

    #[test]
    fn threshold_values() {
        assert_eq!(adaptive_threshold(0.5, 0.0), 0.5);
        assert!((adaptive_threshold(0.3, 1.0) - 0.15).abs() < 1e-15);
        assert!((adaptive_threshold(0.2, 0.5) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn ties_binarize_to_foreground() {
        let g = geom([3, 1, 1]);
        let p = prob(&g, vec![0.5, 0.4999, 0.15]);
        let pa = ScalarVolume::new(g, vec![0.0, 0.0, 1.0]).unwrap();
        let cfg = PostprocessConfig { t: 0.3, ..Default::default() };
        let b = adaptive_binarize(&p, &pa, &PostprocessConfig::default()).unwrap();
        assert_eq!(&b.data()[..2], &[1, 0]);
        assert_eq!(adaptive_binarize(&p, &pa, &cfg).unwrap().data()[2], 1);
    }

    #[test]
    fn box_component_diameter() {
        let g = geom([12, 12, 14]);
        let mask = LabelVolume::from_fn(g, |i, j, k| u32::from((2..5).contains(&i) && (3..8).contains(&j) && (1..10).contains(&k))).unwrap();
        let cs = connected_components(&mask, Connectivity::TwentySix).unwrap();
        assert_eq!(cs.len(), 1);
        let s = &cs.stats[0];
        assert_eq!(s.voxel_count, 135);
        assert!((s.covariance_mm2[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.covariance_mm2[1][1] - 2.0).abs() < 1e-12);
        assert!((s.min_diameter_mm - 2.0 * (10.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert!((s.min_diameter_mm - 3.651).abs() < 1e-3);
        assert_eq!(filter_small_components(&cs, Some(5.0)).count_nonzero(), 0);
        assert_eq!(filter_small_components(&cs, Some(3.0)).data(), mask.data());
        assert_eq!(filter_small_components(&cs, None).data(), mask.data());
    }

    #[test]
    fn diagonal_voxels_and_empty() {
        let g = geom([3, 3, 3]);
        let mask = LabelVolume::from_fn(g.clone(), |i, j, k| u32::from((i, j, k) == (0, 0, 0) || (i, j, k) == (1, 1, 0))).unwrap();
        assert_eq!(connected_components(&mask, Connectivity::Six).unwrap().len(), 2);
        assert_eq!(connected_components(&mask, Connectivity::Eighteen).unwrap().len(), 1);
        assert_eq!(connected_components(&mask, Connectivity::TwentySix).unwrap().len(), 1);
        assert!(connected_components(&LabelVolume::zeros(g).unwrap(), Connectivity::TwentySix).unwrap().is_empty());
    }

    fn two_lungs(g: &VolumeGeometry) -> LabelVolume {
        LabelVolume::from_fn(g.clone(), |i, j, k| {
            let lung = |cx: f64| ((i as f64 - cx) / 4.0).powi(2) + ((j as f64 - 10.0) / 6.0).powi(2) + ((k as f64 - 8.0) / 6.0).powi(2) <= 1.0;
            u32::from(lung(6.0) || lung(22.0))
        })
        .unwrap()
    }

    #[test]
    fn hull_keeps_mediastinum() {
        let g = geom([28, 20, 16]);
        let lungs = two_lungs(&g);
        let pred = LabelVolume::from_fn(g.clone(), |i, j, k| u32::from((i, j, k) == (14, 10, 8) || (i, j, k) == (14, 0, 0))).unwrap();
        let out = lung_hull_mask(&pred, &lungs).unwrap();
        assert_eq!(out.get(14, 10, 8), 1);
        assert_eq!(out.get(14, 0, 0), 0);
        let again = lung_hull_mask(&out, &lungs).unwrap();
        assert_eq!(again.data(), out.data());
        assert!(matches!(lung_hull_mask(&pred, &LabelVolume::zeros(g).unwrap()), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn ensemble_examples() {
        let g = geom([1, 1, 1]);
        let maps: Vec<ProbVolume> = [0.8, 0.8, 0.8, 0.3, 0.3].iter().map(|&v| prob(&g, vec![v])).collect();
        assert!((ensemble(&maps).unwrap().probs()[0] - 0.6).abs() < 1e-12);
        let same = vec![maps[0].clone(); 5];
        assert_eq!(ensemble(&same).unwrap().probs(), maps[0].probs());
        assert!(matches!(ensemble(&[]), Err(Error::Argument(_))));
    }

    fn random_probs(rng: &mut ChaCha8Rng, g: &VolumeGeometry) -> ProbVolume {
        prob(g, (0..g.len()).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn degenerate_config_is_plain_threshold() {
        let g = geom([10, 9, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_probs(&mut rng, &g);
        let pa = ScalarVolume::zeros(g.clone()).unwrap();
        let lungs = LabelVolume::filled(g, 1).unwrap();
        let out = run_postprocess(&[p.clone()], &pa, &lungs, None, &PostprocessConfig::default()).unwrap();
        let expect: Vec<u32> = p.probs().iter().map(|&v| u32::from(v >= 0.5)).collect();
        assert_eq!(out.data(), &expect[..]);
        let zeros = prob(out.geometry(), vec![0.0; out.len()]);
        assert_eq!(run_postprocess(&[zeros], &pa, &lungs, None, &PostprocessConfig::default()).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn uncrops_to_original_grid() {
        let full = geom([12, 12, 12]);
        let crop = CropRecord { original: full.clone(), start: [2, 3, 4], dims: [5, 5, 5] };
        let g = crop.cropped_geometry();
        let p = prob(&g, vec![0.9; g.len()]);
        let pa = ScalarVolume::zeros(g.clone()).unwrap();
        let lungs = LabelVolume::filled(g, 1).unwrap();
        let out = run_postprocess(&[p], &pa, &lungs, Some(&crop), &PostprocessConfig::default()).unwrap();
        assert!(out.geometry().is_aligned(&full));
        assert_eq!(out.count_nonzero(), 125);
        assert_eq!(out.get(2, 3, 4), 1);
        assert_eq!(out.get(1, 3, 4), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn binarize_monotone(seed in any::<u64>(), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let g = geom([6, 5, 4]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probs(&mut rng, &g);
            let pa = ScalarVolume::new(g.clone(), (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let pa_hi = pa.map(|v| (v + 0.3).min(1.0)).unwrap();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = adaptive_binarize(&p, &pa, &PostprocessConfig { t: lo, ..Default::default() }).unwrap();
            let b = adaptive_binarize(&p, &pa, &PostprocessConfig { t: hi, ..Default::default() }).unwrap();
            let c = adaptive_binarize(&p, &pa_hi, &PostprocessConfig { t: hi, ..Default::default() }).unwrap();
            for n in 0..g.len() {
                prop_assert!(a.data()[n] >= b.data()[n]);
                prop_assert!(c.data()[n] >= b.data()[n]);
            }
        }

        #[test]
        fn components_partition_foreground(seed in any::<u64>(), conn in prop::sample::select(vec![6u32, 18, 26]), d in 0.0f64..4.0) {
            let g = geom([7, 6, 5]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = LabelVolume::new(g.clone(), (0..g.len()).map(|_| u32::from(rng.random_bool(0.35))).collect()).unwrap();
            let cs = connected_components(&mask, Connectivity::from_count(conn).unwrap()).unwrap();
            prop_assert_eq!(cs.stats.iter().map(|s| s.voxel_count).sum::<usize>(), mask.count_nonzero());
            for (l, m) in cs.labels.data().iter().zip(mask.data()) {
                prop_assert_eq!(*l != 0, *m != 0);
                prop_assert!(*l as usize <= cs.len());
            }
            let kept = filter_small_components(&cs, Some(d));
            for (k, m) in kept.data().iter().zip(mask.data()) {
                prop_assert!(*k <= *m);
            }
        }

        #[test]
        fn ensemble_permutation_invariant(seed in any::<u64>()) {
            let g = geom([4, 4, 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<ProbVolume> = (0..4).map(|_| random_probs(&mut rng, &g)).collect();
            let rev: Vec<ProbVolume> = maps.iter().rev().cloned().collect();
            let (a, b) = (ensemble(&maps).unwrap(), ensemble(&rev).unwrap());
            for n in 0..g.len() {
                prop_assert!((a.probs()[n] - b.probs()[n]).abs() < 1e-12);
                let lo = maps.iter().map(|m| m.probs()[n]).fold(f64::INFINITY, f64::min);
                let hi = maps.iter().map(|m| m.probs()[n]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.probs()[n] >= lo - 1e-12 && a.probs()[n] <= hi + 1e-12);
            }
        }
    }
}
