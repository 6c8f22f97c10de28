//! Distances between a real vector and its quantized image.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistanceKind {
    /// `arccos` of the cosine similarity, in radians.
    #[default]
    Angle,
    Euclidean,
}

impl DistanceKind {
    pub fn id(&self) -> &'static str {
        match self {
            DistanceKind::Angle => "angle",
            DistanceKind::Euclidean => "euclid",
        }
    }

    /// Distance between `v` and `theta_v` under this metric; larger is worse.
    pub fn distance(&self, v: &[f64], theta_v: &[f64]) -> Result<f64> {
        match self {
            DistanceKind::Angle => cosine_similarity(v, theta_v).map(angle),
            DistanceKind::Euclidean => euclidean_distance(v, theta_v),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "angle" => Ok(DistanceKind::Angle),
            "euclid" | "euclidean" => Ok(DistanceKind::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// `φ = v·θ(v) / (‖v‖·‖θ(v)‖)`.
pub fn cosine_similarity(v: &[f64], theta_v: &[f64]) -> Result<f64> {
    check_len(v, theta_v)?;
    let (mut dot, mut nv, mut nq) = (0.0, 0.0, 0.0);
    for (a, b) in v.iter().zip(theta_v) {
        dot += a * b;
        nv += a * a;
        nq += b * b;
    }
    if nv == 0.0 || nq == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot / (nv.sqrt() * nq.sqrt()))
}

/// Angle in radians for a cosine similarity, clamped into `[-1, 1]` first.
pub fn angle(phi: f64) -> f64 {
    phi.clamp(-1.0, 1.0).acos()
}

/// Cosine similarity between `v` and `sign(v)` without forming `sign(v)`:
/// `Σ|vᵢ| / (‖v‖·√n)`.
pub fn binary_cosine(v: &[f64]) -> Result<f64> {
    let (mut l1, mut l2) = (0.0, 0.0);
    for x in v {
        l1 += x.abs();
        l2 += x * x;
    }
    if l2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(l1 / (l2.sqrt() * (v.len() as f64).sqrt()))
}

/// `d = √Σ(vᵢ − θ(vᵢ))²`.
pub fn euclidean_distance(v: &[f64], theta_v: &[f64]) -> Result<f64> {
    check_len(v, theta_v)?;
    Ok(v.iter()
        .zip(theta_v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Filters whose distance is strictly below `th`: the set that is kept.
pub fn select_keep_set<I>(distances: I, th: f64) -> BTreeSet<usize>
where
    I: IntoIterator<Item = (usize, f64)>,
{
    distances.into_iter().filter(|&(_, d)| d < th).map(|(k, _)| k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sgn(v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect()
    }

    #[test]
    fn identical_vectors() {
        let v = [1.0, -1.0, 1.0];
        let phi = cosine_similarity(&v, &v).unwrap();
        assert!((phi - 1.0).abs() < 1e-15);
        assert_eq!(angle(phi), 0.0);
        assert_eq!(euclidean_distance(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn three_four_example() {
        let v = [3.0, -4.0];
        let expected = 7.0 / (5.0 * 2f64.sqrt());
        assert!((cosine_similarity(&v, &sgn(&v)).unwrap() - expected).abs() < 1e-12);
        assert!((binary_cosine(&v).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.98995).abs() < 1e-5);
    }

    #[test]
    fn four_value_example() {
        let v = [0.3, -0.4, 1.2, -0.1];
        let phi = cosine_similarity(&v, &sgn(&v)).unwrap();
        let norm = (0.09f64 + 0.16 + 1.44 + 0.01).sqrt();
        assert!((phi - 2.0 / (norm * 2.0)).abs() < 1e-12);
        assert!((phi - 0.76697).abs() < 1e-5);
    }

    #[test]
    fn constant_positive_vector_is_aligned() {
        let v = [0.25; 9];
        assert!((binary_cosine(&v).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_errors() {
        assert!(matches!(binary_cosine(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(cosine_similarity(&[0.0], &[1.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn euclidean_hand_example() {
        let v = [0.5, -0.5, 1.0];
        let d = euclidean_distance(&v, &sgn(&v)).unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            euclidean_distance(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn keep_set_threshold() {
        let d = [(0, 0.1), (1, 0.5), (2, 0.3)];
        assert_eq!(select_keep_set(d, 0.4), BTreeSet::from([0, 2]));
        assert_eq!(select_keep_set(d, f64::INFINITY).len(), 3);
        assert!(select_keep_set(d, 0.0).is_empty());
    }

    #[test]
    fn metric_ids() {
        assert_eq!("angle".parse::<DistanceKind>().unwrap(), DistanceKind::Angle);
        assert_eq!("euclid".parse::<DistanceKind>().unwrap(), DistanceKind::Euclidean);
        assert!("l1".parse::<DistanceKind>().is_err());
    }
}
