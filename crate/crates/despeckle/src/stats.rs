//! Local moment maps, mean-to-standard-deviation ratios, and the
//! noise-region mining rule that supplies hard negatives for the
//! pixel-level contrastive loss.
//!
//! Fully developed speckle follows a Rayleigh amplitude distribution whose
//! mean-to-std ratio is sqrt(pi / (4 - pi)) ~ 1.9131; regions whose local
//! ratio falls below `tau_noise` are treated as noise dominated.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Mean/std ratio of the Rayleigh distribution, sqrt(pi/(4-pi)).
pub const RAYLEIGH_SNR: f64 = 1.9130583802711007;
pub const DEFAULT_TAU_NOISE: f64 = 1.92;
pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_ANCHOR_COUNT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Noisy,
    Clean,
}

/// C x H x W activation grid from one decoder branch.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub branch: Branch,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, branch: Branch) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite feature map");
        FeatureMap { data, branch }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

/// Per-channel mean-to-std outcome: var == 0 collapses the ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Finite(f64),
    /// var == 0 with mu > 0: maximally non-noisy, never selected.
    PosInf,
    /// var == 0 with mu <= 0: the ratio has no meaningful sign.
    Undefined,
}

#[derive(Debug, Clone)]
pub struct RegionStats {
    pub center: (usize, usize),
    pub window: usize,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub rho: Vec<Rho>,
}

impl RegionStats {
    /// Channel aggregate: arithmetic mean over finite-rho channels.
    /// Returns None when no channel has a finite ratio.
    pub fn rho_mean(&self) -> Option<f64> {
        let finite: Vec<f64> = self
            .rho
            .iter()
            .filter_map(|r| match r {
                Rho::Finite(v) => Some(*v),
                _ => None,
            })
            .collect();
        if finite.is_empty() {
            None
        } else {
            Some(finite.iter().sum::<f64>() / finite.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct NegativeRegionSet {
    pub regions: Vec<RegionStats>,
    pub tau_noise: f64,
}

impl NegativeRegionSet {
    /// One negative feature per region: the channel-wise window mean.
    pub fn negative_vectors(&self) -> Vec<Vec<f64>> {
        self.regions.iter().map(|r| r.mu.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Distinct anchor positions uniform over the interior margin, deterministic
/// under the seed.
pub fn sample_anchors(
    height: usize,
    width: usize,
    count: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if window % 2 == 0 {
        return Err(Error::Config(format!("window {window} must be odd")));
    }
    if height < window || width < window {
        return Err(Error::Config(format!(
            "map {height}x{width} too small for window {window}"
        )));
    }
    let m = window / 2;
    let rows = height - 2 * m;
    let cols = width - 2 * m;
    let available = rows * cols;
    if count == 0 || count > available {
        return Err(Error::Config(format!(
            "anchor count {count} outside 1..={available} eligible interior positions"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sample without replacement over linearized interior indices.
    let mut chosen = std::collections::HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let k = rng.gen_range(0..available);
        if chosen.insert(k) {
            out.push((m + k / cols, m + k % cols));
        }
    }
    Ok(out)
}

/// Per-channel window mean and population variance (divide by s^2).
pub fn local_moments(
    fm: &FeatureMap,
    center: (usize, usize),
    window: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = fm.data.dim();
    if window % 2 == 0 {
        return Err(Error::Config(format!("window {window} must be odd")));
    }
    let m = window / 2;
    let (i, j) = center;
    if i < m || j < m || i + m >= h || j + m >= w {
        return Err(Error::Shape(format!(
            "window {window} at ({i}, {j}) crosses the border of {h}x{w}"
        )));
    }
    let area = (window * window) as f64;
    let mut mu = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for u in i - m..=i + m {
            for v in j - m..=j + m {
                sum += fm.data[[ch, u, v]];
            }
        }
        let mean = sum / area;
        let mut sq = 0.0;
        for u in i - m..=i + m {
            for v in j - m..=j + m {
                let d = fm.data[[ch, u, v]] - mean;
                sq += d * d;
            }
        }
        mu[ch] = mean;
        var[ch] = sq / area;
    }
    Ok((mu, var))
}

/// Elementwise mu / sqrt(var) with the degenerate cases encoded in `Rho`.
pub fn snr_ratio(mu: &[f64], var: &[f64]) -> Vec<Rho> {
    mu.iter()
        .zip(var.iter())
        .map(|(&m, &v)| {
            if v > 0.0 {
                Rho::Finite(m / v.sqrt())
            } else if m > 0.0 {
                Rho::PosInf
            } else {
                Rho::Undefined
            }
        })
        .collect()
}

pub fn region_stats(fm: &FeatureMap, center: (usize, usize), window: usize) -> Result<RegionStats> {
    let (mu, var) = local_moments(fm, center, window)?;
    let rho = snr_ratio(&mu, &var);
    Ok(RegionStats {
        center,
        window,
        mu,
        var,
        rho,
    })
}

/// Keep exactly the anchor regions whose channel-mean rho falls below
/// `tau_noise`; regions with no finite channel never qualify.
pub fn mine_negative_regions(
    fm_noisy: &FeatureMap,
    anchors: &[(usize, usize)],
    window: usize,
    tau_noise: f64,
) -> Result<NegativeRegionSet> {
    if tau_noise <= 0.0 {
        return Err(Error::Config(format!("tau_noise {tau_noise} must be > 0")));
    }
    let mut regions = Vec::new();
    for &a in anchors {
        let stats = region_stats(fm_noisy, a, window)?;
        if matches!(stats.rho_mean(), Some(r) if r < tau_noise) {
            regions.push(stats);
        }
    }
    Ok(NegativeRegionSet { regions, tau_noise })
}

/// Interior rho map of a single-channel image; border ring (window margin)
/// is NaN.
pub fn rho_map(pixels: &Array2<f64>, window: usize) -> Result<Array2<f64>> {
    let (h, w) = pixels.dim();
    let fm = FeatureMap::new(
        pixels.clone().insert_axis(ndarray::Axis(0)),
        Branch::Noisy,
    );
    let m = window / 2;
    let mut out = Array2::<f64>::from_elem((h, w), f64::NAN);
    for i in m..h - m {
        for j in m..w - m {
            let stats = region_stats(&fm, (i, j), window)?;
            out[[i, j]] = match stats.rho[0] {
                Rho::Finite(v) => v,
                Rho::PosInf => f64::INFINITY,
                Rho::Undefined => f64::NAN,
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand_distr::Distribution;

    // Rayleigh(sigma) via its two-normal construction.
    struct Rayleigh(f64);

    impl Distribution<f64> for Rayleigh {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let n = rand_distr::Normal::new(0.0, self.0).unwrap();
            let (x, y): (f64, f64) = (n.sample(rng), n.sample(rng));
            (x * x + y * y).sqrt()
        }
    }

    fn map_from(vals: Vec<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_vec((c, h, w), vals).unwrap(), Branch::Noisy)
    }

    #[test]
    fn anchors_forced_position() {
        let a = sample_anchors(5, 5, 1, 5, 0).unwrap();
        assert_eq!(a, vec![(2, 2)]);
    }

    #[test]
    fn anchors_distinct_interior_deterministic() {
        let a = sample_anchors(56, 56, 256, 5, 7).unwrap();
        let b = sample_anchors(56, 56, 256, 5, 7).unwrap();
        assert_eq!(a, b);
        let set: std::collections::HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), 256);
        for &(i, j) in &a {
            assert!((2..54).contains(&i) && (2..54).contains(&j));
        }
        assert!(sample_anchors(5, 5, 2, 5, 0).is_err());
    }

    #[test]
    fn moments_constant_map() {
        let fm = map_from(vec![3.5; 2 * 7 * 7], 2, 7, 7);
        let (mu, var) = local_moments(&fm, (3, 3), 5).unwrap();
        assert_eq!(mu, vec![3.5, 3.5]);
        assert_eq!(var, vec![0.0, 0.0]);
    }

    #[test]
    fn moments_enumerated_window() {
        // 3x3 window holding 1..9: mu = 5, population var = 60/9.
        let fm = map_from((1..=9).map(|v| v as f64).collect(), 1, 3, 3);
        let (mu, var) = local_moments(&fm, (1, 1), 3).unwrap();
        assert!((mu[0] - 5.0).abs() < 1e-12);
        assert!((var[0] - 60.0 / 9.0).abs() < 1e-12);
        let rho = snr_ratio(&mu, &var);
        match rho[0] {
            Rho::Finite(v) => assert!((v - 5.0 / (60.0f64 / 9.0).sqrt()).abs() < 1e-12),
            _ => panic!("expected finite rho"),
        }
    }

    #[test]
    fn moments_match_brute_force_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..2 * 9 * 9).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // channel 1 = 2 * channel 0
        let mut data = Array3::from_shape_vec((2, 9, 9), vals).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                data[[1, i, j]] = 2.0 * data[[0, i, j]];
            }
        }
        let fm = FeatureMap::new(data.clone(), Branch::Noisy);
        for &center in &[(2usize, 2usize), (4, 5), (6, 6)] {
            let (mu, var) = local_moments(&fm, center, 5).unwrap();
            // brute-force double loop oracle
            for ch in 0..2 {
                let mut acc = Vec::new();
                for u in center.0 - 2..=center.0 + 2 {
                    for v in center.1 - 2..=center.1 + 2 {
                        acc.push(data[[ch, u, v]]);
                    }
                }
                let bm = acc.iter().sum::<f64>() / 25.0;
                let bv = acc.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / 25.0;
                assert!((mu[ch] - bm).abs() < 1e-10);
                assert!((var[ch] - bv).abs() < 1e-10);
            }
            assert!((mu[1] - 2.0 * mu[0]).abs() < 1e-10);
            assert!((var[1] - 4.0 * var[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn rho_invariant_under_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vals: Vec<f64> = (0..49).map(|_| rng.gen_range(0.5..2.0)).collect();
        let fm = map_from(vals.clone(), 1, 7, 7);
        let scaled = map_from(vals.iter().map(|v| v * 3.7).collect(), 1, 7, 7);
        let r1 = region_stats(&fm, (3, 3), 5).unwrap().rho_mean().unwrap();
        let r2 = region_stats(&scaled, (3, 3), 5).unwrap().rho_mean().unwrap();
        assert!((r1 - r2).abs() < 1e-10);
    }

    #[test]
    fn rho_degenerate_sentinels() {
        assert_eq!(snr_ratio(&[1.0], &[0.0]), vec![Rho::PosInf]);
        assert_eq!(snr_ratio(&[0.0], &[0.0]), vec![Rho::Undefined]);
        assert_eq!(snr_ratio(&[-1.0], &[0.0]), vec![Rho::Undefined]);
    }

    #[test]
    fn shift_equivariance_of_rho_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base: Vec<f64> = (0..10 * 10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Array2::from_shape_vec((10, 10), base).unwrap();
        // shift down-right by one
        let mut shifted = Array2::<f64>::zeros((10, 10));
        for i in 0..9 {
            for j in 0..9 {
                shifted[[i + 1, j + 1]] = img[[i, j]];
            }
        }
        let r1 = rho_map(&img, 3).unwrap();
        let r2 = rho_map(&shifted, 3).unwrap();
        for i in 1..8 {
            for j in 1..8 {
                assert!((r1[[i, j]] - r2[[i + 1, j + 1]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mining_constant_map_selects_nothing() {
        let fm = map_from(vec![0.9; 9 * 9], 1, 9, 9);
        let anchors = sample_anchors(9, 9, 8, 3, 1).unwrap();
        let set = mine_negative_regions(&fm, &anchors, 3, DEFAULT_TAU_NOISE).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn mining_threshold_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let vals: Vec<f64> = (0..20 * 20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fm = map_from(vals, 1, 20, 20);
        let anchors = sample_anchors(20, 20, 64, 5, 2).unwrap();
        let lo = mine_negative_regions(&fm, &anchors, 5, 1.2).unwrap();
        let hi = mine_negative_regions(&fm, &anchors, 5, 2.4).unwrap();
        let centers = |s: &NegativeRegionSet| {
            s.regions
                .iter()
                .map(|r| r.center)
                .collect::<std::collections::HashSet<_>>()
        };
        assert!(centers(&lo).is_subset(&centers(&hi)));
    }

    #[test]
    fn mining_picks_inserted_noise_patch() {
        // smooth ramp with one zero-mean high-variance patch
        let mut data = Array3::<f64>::zeros((1, 21, 21));
        for i in 0..21 {
            for j in 0..21 {
                data[[0, i, j]] = 5.0 + 0.01 * (i as f64 + j as f64);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for i in 8..13 {
            for j in 8..13 {
                data[[0, i, j]] = rng.gen_range(-1.0..1.0);
            }
        }
        let fm = FeatureMap::new(data, Branch::Noisy);
        let selected = mine_negative_regions(&fm, &[(10, 10), (4, 4), (16, 16)], 5, 1.92).unwrap();
        let centers: Vec<_> = selected.regions.iter().map(|r| r.center).collect();
        assert_eq!(centers, vec![(10, 10)]);
    }

    #[test]
    fn rayleigh_snr_monte_carlo() {
        // Windowed moments over ~10^6 i.i.d. Rayleigh draws.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let dist = Rayleigh(1.0);
        let side = 999;
        let vals: Vec<f64> = (0..side * side).map(|_| dist.sample(&mut rng)).collect();
        let fm = map_from(vals, 1, side, side);
        let stats = region_stats(&fm, (side / 2, side / 2), side).unwrap();
        match stats.rho[0] {
            Rho::Finite(v) => assert!((v - RAYLEIGH_SNR).abs() < 0.02, "rho {v}"),
            _ => panic!("expected finite rho"),
        }
    }

    #[test]
    fn mining_rate_matches_monte_carlo_oracle() {
        // Selection rate on i.i.d. Rayleigh vs an independently computed
        // distribution of windowed rho-hat.
        let dist = Rayleigh(1.0);
        let window = 5;
        let trials = 10_000;
        // oracle: windowed rho-hat computed with plain loops
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut below = 0usize;
        for _ in 0..trials {
            let w: Vec<f64> = (0..window * window).map(|_| dist.sample(&mut rng)).collect();
            let m = w.iter().sum::<f64>() / w.len() as f64;
            let v = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w.len() as f64;
            if m / v.sqrt() < DEFAULT_TAU_NOISE {
                below += 1;
            }
        }
        let oracle_rate = below as f64 / trials as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let side = 512;
        let vals: Vec<f64> = (0..side * side).map(|_| dist.sample(&mut rng)).collect();
        let fm = map_from(vals, 1, side, side);
        let anchors = sample_anchors(side, side, 4000, window, 19).unwrap();
        let set = mine_negative_regions(&fm, &anchors, window, DEFAULT_TAU_NOISE).unwrap();
        let rate = set.regions.len() as f64 / anchors.len() as f64;
        assert!(rate > 0.0, "selection rate must be positive");
        assert!(
            (rate - oracle_rate).abs() < 0.05,
            "rate {rate} vs oracle {oracle_rate}"
        );
    }
}
