//! Distance measures between adjacent-word representations.
//!
//! Vector measures (`cos`, `l1`, `l2`) apply to hidden states; distribution
//! measures (`jsd`, `hel`) apply to attention distributions.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Tolerance on the total mass of a distribution argument.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("invalid distribution entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("unknown measure {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Vector,
    Distribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasureId {
    Cos,
    L1,
    L2,
    Jsd,
    Hel,
}

impl MeasureId {
    pub const ALL: [MeasureId; 5] = [MeasureId::Cos, MeasureId::L1, MeasureId::L2, MeasureId::Jsd, MeasureId::Hel];

    pub fn family(self) -> Family {
        match self {
            MeasureId::Cos | MeasureId::L1 | MeasureId::L2 => Family::Vector,
            MeasureId::Jsd | MeasureId::Hel => Family::Distribution,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasureId::Cos => "cos",
            MeasureId::L1 => "l1",
            MeasureId::L2 => "l2",
            MeasureId::Jsd => "jsd",
            MeasureId::Hel => "hel",
        }
    }
}

impl fmt::Display for MeasureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MeasureId {
    type Err = MeasureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MeasureId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MeasureError::Unknown(s.to_string()))
    }
}

/// How `cos` is reported: the shifted cosine `(cos + 1) / 2` as published, or
/// the dissimilarity `1 - cos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CosMode {
    #[default]
    Paper,
    OneMinus,
}

impl FromStr for CosMode {
    type Err = MeasureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(CosMode::Paper),
            "one_minus" | "one-minus" => Ok(CosMode::OneMinus),
            _ => Err(MeasureError::Unknown(s.to_string())),
        }
    }
}

fn same_len(r: &[f64], s: &[f64]) -> Result<(), MeasureError> {
    if r.len() != s.len() {
        return Err(MeasureError::DimensionMismatch(r.len(), s.len()));
    }
    Ok(())
}

pub fn cos(r: &[f64], s: &[f64], mode: CosMode) -> Result<f64, MeasureError> {
    same_len(r, s)?;
    let dot: f64 = r.iter().zip(s).map(|(a, b)| a * b).sum();
    let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ns = s.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nr == 0.0 || ns == 0.0 {
        return Err(MeasureError::ZeroNorm);
    }
    let cosine = (dot / (nr * ns)).clamp(-1.0, 1.0);
    Ok(match mode {
        CosMode::Paper => (cosine + 1.0) / 2.0,
        CosMode::OneMinus => 1.0 - cosine,
    })
}

pub fn l1(r: &[f64], s: &[f64]) -> Result<f64, MeasureError> {
    same_len(r, s)?;
    Ok(r.iter().zip(s).map(|(a, b)| (a - b).abs()).sum())
}

pub fn l2(r: &[f64], s: &[f64]) -> Result<f64, MeasureError> {
    same_len(r, s)?;
    Ok(r.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

fn check_distribution(p: &[f64]) -> Result<(), MeasureError> {
    if let Some(index) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(MeasureError::NegativeEntry { index, value: p[index] });
    }
    let mass: f64 = p.iter().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(MeasureError::NotNormalized(mass));
    }
    Ok(())
}

/// Jensen-Shannon distance in bits: the square root of the mean KL
/// divergence of `p` and `q` from their midpoint. Lies in `[0, 1]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MeasureError> {
    same_len(p, q)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = (a + b) / 2.0;
        if a > 0.0 {
            kl_p += a * (a / m).log2();
        }
        if b > 0.0 {
            kl_q += b * (b / m).log2();
        }
    }
    Ok(((kl_p + kl_q) / 2.0).max(0.0).sqrt())
}

/// Hellinger distance, `(1/sqrt 2) * ||sqrt p - sqrt q||_2`.
pub fn hel(p: &[f64], q: &[f64]) -> Result<f64, MeasureError> {
    same_len(p, q)?;
    check_distribution(p)?;
    check_distribution(q)?;
    let sq: f64 = p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    Ok(sq.sqrt() / std::f64::consts::SQRT_2)
}

/// Dispatches on `id`.
pub fn measure(id: MeasureId, x: &[f64], y: &[f64], cos_mode: CosMode) -> Result<f64, MeasureError> {
    match id {
        MeasureId::Cos => cos(x, y, cos_mode),
        MeasureId::L1 => l1(x, y),
        MeasureId::L2 => l2(x, y),
        MeasureId::Jsd => jsd(x, y),
        MeasureId::Hel => hel(x, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cos_examples() {
        let p = CosMode::Paper;
        assert!((cos(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], p).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cos(&[1.0, 0.0], &[-1.0, 0.0], p).unwrap(), 0.0);
        assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0], p).unwrap(), 0.5);
        assert_eq!(cos(&[1.0, 0.0], &[-1.0, 0.0], CosMode::OneMinus).unwrap(), 2.0);
        assert_eq!(cos(&[0.0, 0.0], &[1.0, 0.0], p), Err(MeasureError::ZeroNorm));
    }

    #[test]
    fn minkowski_examples() {
        let r = [0.0, 0.0];
        let s = [3.0, 4.0];
        assert_eq!(l1(&r, &s).unwrap(), 7.0);
        assert_eq!(l2(&r, &s).unwrap(), 5.0);
        assert_eq!(l1(&s, &s).unwrap(), 0.0);
        assert_eq!(l2(&s, &s).unwrap(), 0.0);
        assert_eq!(l1(&[1.0], &s), Err(MeasureError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn distribution_extremes() {
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(hel(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(hel(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(matches!(jsd(&[1.2, -0.2], &[0.5, 0.5]), Err(MeasureError::NegativeEntry { index: 1, .. })));
        assert!(matches!(hel(&[0.5, 0.5], &[0.5, 0.4]), Err(MeasureError::NotNormalized(_))));
    }

    /// Expected values from direct high-precision evaluation (mpmath, 30 digits):
    /// JSD((.5,.5),(.9,.1)) = 0.38313587985994212...,
    /// HEL = (1/sqrt2) * sqrt((sqrt.5-sqrt.9)^2 + (sqrt.5-sqrt.1)^2) = 0.32491969623290632...
    #[test]
    fn distribution_reference_values() {
        let p = [0.5, 0.5];
        let q = [0.9, 0.1];
        assert!((jsd(&p, &q).unwrap() - JSD_REF).abs() < 1e-9);
        assert!((hel(&p, &q).unwrap() - HEL_REF).abs() < 1e-9);
    }

    const JSD_REF: f64 = 0.383_135_879_859_942_13;
    const HEL_REF: f64 = 0.324_919_696_232_906_33;

    #[test]
    fn names_round_trip() {
        for m in MeasureId::ALL {
            assert_eq!(m.name().parse::<MeasureId>().unwrap(), m);
        }
        assert!("kl".parse::<MeasureId>().is_err());
        assert_eq!("one_minus".parse::<CosMode>().unwrap(), CosMode::OneMinus);
    }

    proptest! {
        #[test]
        fn l2_matches_extended_precision(
            pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 768)
        ) {
            let r: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            // Kahan-compensated oracle.
            let (mut sum1, mut c1, mut sum2, mut c2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for (a, b) in r.iter().zip(&s) {
                let y = (a - b).abs() - c1;
                let t = sum1 + y;
                c1 = (t - sum1) - y;
                sum1 = t;
                let y = (a - b) * (a - b) - c2;
                let t = sum2 + y;
                c2 = (t - sum2) - y;
                sum2 = t;
            }
            prop_assert!((l1(&r, &s).unwrap() - sum1).abs() <= 1e-6 * sum1);
            prop_assert!((l2(&r, &s).unwrap() - sum2.sqrt()).abs() <= 1e-6 * sum2.sqrt());
        }
    }
}
