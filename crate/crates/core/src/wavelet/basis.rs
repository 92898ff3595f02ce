use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::taps::{HAAR_DEC_LO, SYM19_DEC_LO, SYM4_DEC_LO};
use crate::error::{HimatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisName {
    Haar,
    Sym4,
    #[default]
    Sym19,
}

impl FromStr for BasisName {
    type Err = HimatError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Ok(BasisName::Haar),
            "sym4" => Ok(BasisName::Sym4),
            "sym19" => Ok(BasisName::Sym19),
            _ => Err(HimatError::UnknownBasis(s.to_string())),
        }
    }
}

impl fmt::Display for BasisName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisName::Haar => "haar",
            BasisName::Sym4 => "sym4",
            BasisName::Sym19 => "sym19",
        })
    }
}

/// Orthonormal two-channel filter bank.
///
/// `dec_hi[k] = (-1)^k dec_lo[L-1-k]`; reconstruction filters are the
/// time-reversed decomposition filters.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBasis {
    pub name: BasisName,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

impl WaveletBasis {
    pub fn new(name: BasisName) -> Self {
        let dec_lo: Vec<f64> = match name {
            BasisName::Haar => HAAR_DEC_LO.to_vec(),
            BasisName::Sym4 => SYM4_DEC_LO.to_vec(),
            BasisName::Sym19 => SYM19_DEC_LO.to_vec(),
        };
        let l = dec_lo.len();
        let dec_hi: Vec<f64> = (0..l)
            .map(|k| if k % 2 == 0 { dec_lo[l - 1 - k] } else { -dec_lo[l - 1 - k] })
            .collect();
        let rec_lo = dec_lo.iter().rev().copied().collect();
        let rec_hi = dec_hi.iter().rev().copied().collect();
        WaveletBasis { name, dec_lo, dec_hi, rec_lo, rec_hi }
    }

    pub fn len(&self) -> usize {
        self.dec_lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dec_lo.is_empty()
    }
}

/// Looks up a basis by name: `haar`, `sym4` or `sym19`.
pub fn load_basis(name: &str) -> Result<WaveletBasis> {
    Ok(WaveletBasis::new(name.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_defining_case() {
        let b = load_basis("haar").unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(b.dec_lo, vec![r, r]);
        assert_eq!(b.dec_hi, vec![r, -r]);
    }

    #[test]
    fn unknown_basis() {
        assert!(matches!(load_basis("daub99"), Err(HimatError::UnknownBasis(_))));
    }

    #[test]
    fn all_bases_satisfy_filter_invariants() {
        for name in ["haar", "sym4", "sym19"] {
            let b = load_basis(name).unwrap();
            let l = b.len();
            assert!((b.dec_lo.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-10, "{name}");
            assert!(b.dec_hi.iter().sum::<f64>().abs() < 1e-10, "{name}");
            assert!((b.dec_lo.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-10, "{name}");
            for k in 0..l {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                assert_eq!(b.dec_hi[k], sign * b.dec_lo[l - 1 - k]);
            }
            // orthogonality to even shifts
            for shift in (2..l).step_by(2) {
                let dot: f64 = (0..l - shift).map(|k| b.dec_lo[k] * b.dec_lo[k + shift]).sum();
                assert!(dot.abs() < 1e-10, "{name} shift {shift}: {dot}");
            }
        }
        assert_eq!(load_basis("sym19").unwrap().len(), 38);
        assert_eq!(load_basis("sym4").unwrap().len(), 8);
    }
}
