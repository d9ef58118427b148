//! kNN differential entropy estimators (nats).
//!
//! Both estimators work with `D(i)`, twice the k-th neighbor distance, i.e.
//! the diameter of the neighbor ball. The volume of a ball of diameter `D` in
//! `d` dimensions is `c_d · D^d` with `c_d = π^{d/2} / Γ(d/2 + 1) / 2^d`, so
//! that is the constant paired with diameters here.

use super::digamma::digamma;
use super::knn::{distance, knn_distance_profile, KnnProfile};
use super::EntropyError;

/// `ln Γ(d/2 + 1)` for a positive integer dimension `d`, exact product form.
fn ln_gamma_half_dim_plus_one(d: usize) -> f64 {
    if d % 2 == 0 {
        // Γ(m + 1) = m!
        (1..=d / 2).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(m + 1/2) = √π · Π_{i<m} (i + 1/2), with m = (d + 1) / 2
        let m = d.div_ceil(2);
        0.5 * std::f64::consts::PI.ln() + (0..m).map(|i| (i as f64 + 0.5).ln()).sum::<f64>()
    }
}

/// Log-volume of a `d`-dimensional Euclidean ball of unit *diameter*.
pub fn ln_unit_diameter_ball_volume(d: usize) -> f64 {
    0.5 * d as f64 * std::f64::consts::PI.ln()
        - ln_gamma_half_dim_plus_one(d)
        - d as f64 * std::f64::consts::LN_2
}

fn dimension<P: AsRef<[f32]>>(points: &[P]) -> Result<usize, EntropyError> {
    let d = points.first().map(|p| p.as_ref().len()).unwrap_or(0);
    if d == 0 || points.iter().any(|p| p.as_ref().len() != d) {
        return Err(EntropyError::InvalidParameter(
            "points must share one non-zero dimension".into(),
        ));
    }
    Ok(d)
}

/// Kozachenko-Leonenko estimate from the points alone:
/// `(d/N) Σ ln D(i) + ln c_d + ψ(N) − ψ(k)`.
///
/// Exact duplicates make some `D(i) = 0`; the estimate is then −∞.
pub fn kl_entropy<P>(points: &[P], k: usize) -> Result<f64, EntropyError>
where
    P: AsRef<[f32]> + Sync,
{
    let d = dimension(points)?;
    let profile = knn_distance_profile(points, k)?;
    let n = points.len() as f64;
    let zeros = profile.diameters().iter().filter(|&&x| x == 0.0).count();
    if zeros > 0 {
        tracing::warn!(zeros, "kl_entropy: duplicate points give zero kNN distance");
        return Ok(f64::NEG_INFINITY);
    }
    let sum_ln: f64 = profile.diameters().iter().map(|x| x.ln()).sum();
    Ok(d as f64 / n * sum_ln + ln_unit_diameter_ball_volume(d) + digamma(n) - digamma(k as f64))
}

/// KSG-style marginal entropy of the training subset, with neighbor
/// diameters taken in the joint set:
/// `(d/N) Σ_{i∈train} ln D(i) + ln c_d + ψ(N) − (1/N) Σ_{i∈train} ψ(n(i) + 1)`,
/// where `N = |train|` and `n(i)` counts the *other* training entries within
/// `D(i)/2` of `i`. `train` holds indices into `joint`; repeated indices are
/// separate entries at distance zero.
///
/// With `train` equal to the whole joint set every `n(i)` is `k` (absent
/// distance ties), so the result is the KL estimate minus `ψ(k+1) − ψ(k) = 1/k`.
pub fn ksg_entropy<P>(joint: &[P], train: &[usize], k: usize) -> Result<f64, EntropyError>
where
    P: AsRef<[f32]> + Sync,
{
    let profile = knn_distance_profile(joint, k)?;
    ksg_entropy_with_profile(joint, &profile, train)
}

pub fn ksg_entropy_with_profile<P>(
    joint: &[P],
    profile: &KnnProfile,
    train: &[usize],
) -> Result<f64, EntropyError>
where
    P: AsRef<[f32]>,
{
    let d = dimension(joint)?;
    if train.is_empty() {
        return Err(EntropyError::TooFewPoints { n: 0, k: profile.k() });
    }
    if let Some(&bad) = train.iter().find(|&&i| i >= joint.len()) {
        return Err(EntropyError::InvalidParameter(format!("train index {bad} out of range")));
    }
    let n = train.len() as f64;
    let mut sum_ln = 0.0;
    let mut sum_psi = 0.0;
    for (a, &i) in train.iter().enumerate() {
        let diameter = profile.diameters()[i];
        if diameter == 0.0 {
            tracing::warn!(index = i, "ksg_entropy: zero kNN diameter");
            return Ok(f64::NEG_INFINITY);
        }
        let radius = diameter / 2.0;
        let xi = joint[i].as_ref();
        let count = train
            .iter()
            .enumerate()
            .filter(|&(b, &j)| b != a && distance(xi, joint[j].as_ref()) <= radius)
            .count();
        sum_ln += diameter.ln();
        sum_psi += digamma(count as f64 + 1.0);
    }
    Ok(d as f64 / n * sum_ln + ln_unit_diameter_ball_volume(d) + digamma(n) - sum_psi / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_diameter_ball_volumes() {
        // segment of length 1, disc of diameter 1, sphere of diameter 1
        assert!(ln_unit_diameter_ball_volume(1).abs() < 1e-15);
        assert!((ln_unit_diameter_ball_volume(2) - (std::f64::consts::PI / 4.0).ln()).abs() < 1e-14);
        assert!((ln_unit_diameter_ball_volume(3) - (std::f64::consts::PI / 6.0).ln()).abs() < 1e-14);
        // Γ(5/2) = 3√π/4
        let g = (3.0 * std::f64::consts::PI.sqrt() / 4.0).ln();
        assert!((ln_gamma_half_dim_plus_one(3) - g).abs() < 1e-14);
    }

    #[test]
    fn scaling_shifts_kl_by_d_ln_c() {
        let pts: Vec<Vec<f32>> = (0..50)
            .map(|i| vec![((i * 37) % 50) as f32 * 0.13, ((i * 11) % 17) as f32 * 0.7])
            .collect();
        let base = kl_entropy(&pts, 3).unwrap();
        // c = 2 keeps the f32 coordinates exact
        let scaled: Vec<Vec<f32>> = pts.iter().map(|p| p.iter().map(|x| x * 2.0).collect()).collect();
        let shifted = kl_entropy(&scaled, 3).unwrap();
        assert!((shifted - base - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicates_give_negative_infinity() {
        let pts = vec![vec![1.0f32], vec![1.0], vec![2.0], vec![4.0]];
        assert_eq!(kl_entropy(&pts, 1).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn errors() {
        let pts = vec![vec![1.0f32], vec![2.0]];
        assert!(kl_entropy(&pts, 2).is_err());
        let ragged = vec![vec![1.0f32], vec![2.0, 3.0], vec![0.0]];
        assert!(kl_entropy(&ragged, 1).is_err());
        let pts = vec![vec![1.0f32], vec![2.0], vec![5.0]];
        assert!(ksg_entropy(&pts, &[], 1).is_err());
        assert!(ksg_entropy(&pts, &[7], 1).is_err());
    }

    #[test]
    fn ksg_on_full_joint_set_is_kl_minus_one_over_k() {
        let pts: Vec<Vec<f32>> = (0..40)
            .map(|i| vec![(i as f32 * 0.731).sin() * 3.0, (i as f32 * 1.37).cos()])
            .collect();
        let all: Vec<usize> = (0..pts.len()).collect();
        for k in [1, 3, 5] {
            let kl = kl_entropy(&pts, k).unwrap();
            let ksg = ksg_entropy(&pts, &all, k).unwrap();
            assert!((kl - ksg - 1.0 / k as f64).abs() < 1e-12, "k={k}: {kl} {ksg}");
        }
    }
}
