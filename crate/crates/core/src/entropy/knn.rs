//! Exact brute-force k-nearest-neighbor distance profiles.

use rayon::prelude::*;

use super::EntropyError;

/// Euclidean distance, accumulated in `f64`.
#[inline]
pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// For each point, `D = 2 ×` the distance to its k-th nearest *other* point.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnProfile {
    k: usize,
    diameters: Vec<f64>,
}

impl KnnProfile {
    pub fn from_diameters(k: usize, diameters: Vec<f64>) -> Self {
        Self { k, diameters }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    pub fn len(&self) -> usize {
        self.diameters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diameters.is_empty()
    }
}

/// k-th smallest distance from `points[i]` to every other point.
fn kth_distance<P: AsRef<[f32]>>(points: &[P], i: usize, k: usize, buf: &mut Vec<f64>) -> f64 {
    buf.clear();
    let x = points[i].as_ref();
    buf.extend(
        points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, p)| distance(x, p.as_ref())),
    );
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    *kth
}

/// k-th smallest distance when point `j` stands for `weights[j]` coincident
/// copies. The point's own extra copies sit at distance zero.
fn kth_distance_weighted<P: AsRef<[f32]>>(
    points: &[P],
    weights: &[u32],
    i: usize,
    k: usize,
    buf: &mut Vec<(f64, u32)>,
) -> f64 {
    let own = weights[i] as usize - 1;
    if own >= k {
        return 0.0;
    }
    buf.clear();
    let x = points[i].as_ref();
    buf.extend(
        points
            .iter()
            .zip(weights)
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, (p, &w))| (distance(x, p.as_ref()), w)),
    );
    buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut seen = own;
    for &(d, w) in buf.iter() {
        seen += w as usize;
        if seen >= k {
            return d;
        }
    }
    unreachable!("total weight checked against k")
}

/// Compute the profile over `points` (the joint set of distinct prompts).
/// Requires more than `k` points; O(N²·d).
pub fn knn_distance_profile<P>(points: &[P], k: usize) -> Result<KnnProfile, EntropyError>
where
    P: AsRef<[f32]> + Sync,
{
    if k == 0 {
        return Err(EntropyError::InvalidParameter("k must be >= 1".into()));
    }
    if points.len() <= k {
        return Err(EntropyError::TooFewPoints { n: points.len(), k });
    }
    let diameters = (0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| 2.0 * kth_distance(points, i, k, buf))
        .collect();
    Ok(KnnProfile { k, diameters })
}

/// Profile of the multiset in which distinct point `j` occurs `weights[j]`
/// times. Coincident copies are neighbors at distance zero, so a point
/// occurring more than `k` times gets `D = 0`.
pub fn knn_distance_profile_weighted<P>(
    points: &[P],
    weights: &[u32],
    k: usize,
) -> Result<KnnProfile, EntropyError>
where
    P: AsRef<[f32]> + Sync,
{
    if weights.len() != points.len() || weights.contains(&0) {
        return Err(EntropyError::InvalidParameter(
            "one positive weight per point required".into(),
        ));
    }
    if weights.iter().all(|&w| w == 1) {
        return knn_distance_profile(points, k);
    }
    if k == 0 {
        return Err(EntropyError::InvalidParameter("k must be >= 1".into()));
    }
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    if total <= k as u64 {
        return Err(EntropyError::TooFewPoints { n: total as usize, k });
    }
    let diameters = (0..points.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| 2.0 * kth_distance_weighted(points, weights, i, k, buf))
        .collect();
    Ok(KnnProfile { k, diameters })
}

/// For every point `u`, the points `x` whose ball of radius `D(x)/2`
/// contains `u` (including `x == u`). Selecting `u` increments exactly
/// these counts.
pub fn influence_lists<P>(points: &[P], profile: &KnnProfile) -> Vec<Vec<u32>>
where
    P: AsRef<[f32]> + Sync,
{
    let balls: Vec<Vec<u32>> = (0..points.len())
        .into_par_iter()
        .map(|x| {
            let radius = profile.diameters[x] / 2.0;
            let px = points[x].as_ref();
            (0..points.len())
                .filter(|&u| distance(px, points[u].as_ref()) <= radius)
                .map(|u| u as u32)
                .collect()
        })
        .collect();
    let mut influence = vec![Vec::new(); points.len()];
    for (x, ball) in balls.into_iter().enumerate() {
        for u in ball {
            influence[u as usize].push(x as u32);
        }
    }
    influence
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f32]) -> Vec<Vec<f32>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn unit_gaps_k1() {
        let p = knn_distance_profile(&line(&[0.0, 1.0, 2.0, 3.0]), 1).unwrap();
        assert_eq!(p.diameters(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn unit_gaps_k2() {
        // brute-force enumeration of sorted pairwise distances
        let pts = line(&[0.0, 1.0, 2.0, 3.0]);
        let mut expected = Vec::new();
        for i in 0..4 {
            let mut d: Vec<f64> = (0..4).filter(|&j| j != i).map(|j| (i as f64 - j as f64).abs()).collect();
            d.sort_by(f64::total_cmp);
            expected.push(2.0 * d[1]);
        }
        assert_eq!(expected, vec![4.0, 2.0, 2.0, 4.0]);
        assert_eq!(knn_distance_profile(&pts, 2).unwrap().diameters(), &expected[..]);
    }

    #[test]
    fn duplicated_prompt_has_zero_diameter() {
        let p = knn_distance_profile(&line(&[0.5, 0.5, 3.0]), 1).unwrap();
        assert_eq!(&p.diameters()[..2], &[0.0, 0.0]);
        assert_eq!(p.diameters()[2], 5.0);
    }

    #[test]
    fn weighted_matches_expanded_multiset() {
        let distinct = line(&[0.0, 1.0, 2.5, 4.0, 4.5]);
        let weights = [1, 3, 1, 2, 1];
        let expanded: Vec<Vec<f32>> = distinct
            .iter()
            .zip(weights)
            .flat_map(|(p, w)| std::iter::repeat_n(p.clone(), w as usize))
            .collect();
        for k in 1..5 {
            let full = knn_distance_profile(&expanded, k).unwrap();
            let w = knn_distance_profile_weighted(&distinct, &weights, k).unwrap();
            let mut at = 0;
            for (i, &m) in weights.iter().enumerate() {
                assert_eq!(w.diameters()[i], full.diameters()[at], "k={k} i={i}");
                at += m as usize;
            }
        }
        // two extra copies of 1.0 make its D zero at k <= 2
        assert_eq!(knn_distance_profile_weighted(&distinct, &weights, 2).unwrap().diameters()[1], 0.0);
        assert!(knn_distance_profile_weighted(&distinct, &[1, 1], 1).is_err());
        assert!(knn_distance_profile_weighted(&line(&[0.0]), &[2], 2).is_err());
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            knn_distance_profile(&line(&[0.0, 1.0]), 2),
            Err(EntropyError::TooFewPoints { n: 2, k: 2 })
        ));
        assert!(knn_distance_profile(&line(&[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn influence_lists_match_ball_membership() {
        let pts = line(&[0.0, 1.0, 2.0, 3.0]);
        let prof = knn_distance_profile(&pts, 1).unwrap();
        let inf = influence_lists(&pts, &prof);
        // radius 1 everywhere: selecting 1 touches 0, 1 and 2
        assert_eq!(inf[1], vec![0, 1, 2]);
        assert_eq!(inf[0], vec![0, 1]);
    }
}
