use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    /// `1 − cos(u, v)`.
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" => Some(Metric::Euclidean),
            "cosine" => Some(Metric::Cosine),
            _ => None,
        }
    }
}

pub fn distance(u: &[f64], v: &[f64], metric: Metric) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    match metric {
        Metric::Euclidean => Ok(u
            .iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
        Metric::Cosine => {
            let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
            for (a, b) in u.iter().zip(v) {
                uv += a * b;
                uu += a * a;
                vv += b * b;
            }
            if uu == 0.0 || vv == 0.0 {
                return Err(Error::InvalidInput(
                    "cosine distance of a zero vector".into(),
                ));
            }
            Ok(1.0 - uv / (uu.sqrt() * vv.sqrt()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn textbook_values() {
        assert_eq!(
            distance(&[3.0, 0.0], &[0.0, 4.0], Metric::Euclidean).unwrap(),
            5.0
        );
        let d = distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Cosine).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
        let e = distance(&[1.0, 0.0], &[0.0, 1.0], Metric::Euclidean).unwrap();
        assert!((e - 2f64.sqrt()).abs() < 1e-15);
        assert!(distance(&[0.0, 0.0], &[1.0, 0.0], Metric::Cosine).is_err());
    }

    proptest! {
        #[test]
        fn identity_and_scaling(u in proptest::collection::vec(-10.0f64..10.0, 1..20), c in 0.1f64..10.0) {
            prop_assume!(u.iter().any(|&x| x.abs() > 1e-3));
            prop_assert_eq!(distance(&u, &u, Metric::Euclidean).unwrap(), 0.0);
            prop_assert!(distance(&u, &u, Metric::Cosine).unwrap().abs() < 1e-12);
            let v: Vec<f64> = u.iter().rev().map(|x| x + 1.0).collect();
            prop_assume!(v.iter().any(|&x| x.abs() > 1e-3));
            let su: Vec<f64> = u.iter().map(|x| x * c).collect();
            let sv: Vec<f64> = v.iter().map(|x| x * c).collect();
            let e = distance(&u, &v, Metric::Euclidean).unwrap();
            prop_assert!((distance(&su, &sv, Metric::Euclidean).unwrap() - c * e).abs() <= 1e-9 * (1.0 + c * e));
            let cu = distance(&u, &v, Metric::Cosine).unwrap();
            prop_assert!((distance(&su, &sv, Metric::Cosine).unwrap() - cu).abs() <= 1e-9);
        }
    }
}
