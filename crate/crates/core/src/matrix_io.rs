//! Serde adapters: matrices as row-major nested arrays (a bare number is a
//! 1×1 matrix), complex entries as `[re, im]` pairs or plain reals.

use num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::{CMat, RMat, RVec};

#[derive(Deserialize)]
#[serde(untagged)]
enum RealRepr {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum Entry {
    Real(f64),
    Pair([f64; 2]),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ComplexRepr {
    Scalar(Entry),
    Rows(Vec<Vec<Entry>>),
}

fn from_rows<T: Copy, E: serde::de::Error>(rows: Vec<Vec<T>>, zero: T) -> Result<(usize, usize, Vec<T>), E> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if let Some(bad) = rows.iter().position(|row| row.len() != c) {
        return Err(E::custom(format!("ragged matrix: row {bad} has {} entries, expected {c}", rows[bad].len())));
    }
    let mut data = vec![zero; r * c];
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            data[j * r + i] = v;
        }
    }
    Ok((r, c, data))
}

/// Real matrix wrapper used for arrays of matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Real(pub RMat);

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match RealRepr::deserialize(d).map_err(|_| D::Error::custom("expected a number or nested array of numbers"))? {
            RealRepr::Scalar(v) => Ok(Real(RMat::from_element(1, 1, v))),
            RealRepr::Rows(rows) => {
                let (r, c, data) = from_rows::<f64, D::Error>(rows, 0.0)?;
                Ok(Real(RMat::from_column_slice(r, c, &data)))
            }
        }
    }
}

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.0.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }
}

/// Complex matrix wrapper.
#[derive(Debug, Clone, PartialEq)]
pub struct Complex(pub CMat);

fn entry_value(e: Entry) -> Complex64 {
    match e {
        Entry::Real(v) => Complex64::new(v, 0.0),
        Entry::Pair([re, im]) => Complex64::new(re, im),
    }
}

impl<'de> Deserialize<'de> for Complex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = ComplexRepr::deserialize(d)
            .map_err(|_| D::Error::custom("expected a number, [re, im] pair, or nested array of those"))?;
        match repr {
            ComplexRepr::Scalar(e) => Ok(Complex(CMat::from_element(1, 1, entry_value(e)))),
            ComplexRepr::Rows(rows) => {
                let rows: Vec<Vec<Complex64>> =
                    rows.into_iter().map(|r| r.into_iter().map(entry_value).collect()).collect();
                let (r, c, data) = from_rows::<Complex64, D::Error>(rows, Complex64::new(0.0, 0.0))?;
                Ok(Complex(CMat::from_column_slice(r, c, &data)))
            }
        }
    }
}

impl Serialize for Complex {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Entry>> = self
            .0
            .row_iter()
            .map(|r| r.iter().map(|z| if z.im == 0.0 { Entry::Real(z.re) } else { Entry::Pair([z.re, z.im]) }).collect())
            .collect();
        rows.serialize(s)
    }
}

pub mod mat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &RMat, s: S) -> Result<S::Ok, S::Error> {
        Real(m.clone()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RMat, D::Error> {
        Real::deserialize(d).map(|r| r.0)
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &RVec, s: S) -> Result<S::Ok, S::Error> {
        v.iter().copied().collect::<Vec<f64>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RVec, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum V {
            Scalar(f64),
            List(Vec<f64>),
        }
        match V::deserialize(d).map_err(|_| D::Error::custom("expected a number or array of numbers"))? {
            V::Scalar(x) => Ok(RVec::from_element(1, x)),
            V::List(v) => Ok(RVec::from_vec(v)),
        }
    }
}

macro_rules! array_adapter {
    ($name:ident, $ty:ty, $wrapped:ty, $wrap:expr, $unwrap:expr) => {
        pub mod $name {
            use super::*;

            pub fn serialize<S: Serializer>(m: &$ty, s: S) -> Result<S::Ok, S::Error> {
                let w: $wrapped = $wrap(m);
                w.serialize(s)
            }

            pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<$ty, D::Error> {
                let w = <$wrapped>::deserialize(d)?;
                Ok($unwrap(w))
            }
        }
    };
}

array_adapter!(mat2, [RMat; 2], [Real; 2], |m: &[RMat; 2]| m.clone().map(Real), |w: [Real; 2]| w.map(|r| r.0));
array_adapter!(mat3, [RMat; 3], [Real; 3], |m: &[RMat; 3]| m.clone().map(Real), |w: [Real; 3]| w.map(|r| r.0));
array_adapter!(
    mat23,
    [[RMat; 3]; 2],
    [[Real; 3]; 2],
    |m: &[[RMat; 3]; 2]| m.clone().map(|row| row.map(Real)),
    |w: [[Real; 3]; 2]| w.map(|row| row.map(|r| r.0))
);
array_adapter!(
    mat32,
    [[RMat; 2]; 3],
    [[Real; 2]; 3],
    |m: &[[RMat; 2]; 3]| m.clone().map(|row| row.map(Real)),
    |w: [[Real; 2]; 3]| w.map(|row| row.map(|r| r.0))
);
array_adapter!(
    cmat23,
    [[CMat; 3]; 2],
    [[Complex; 3]; 2],
    |m: &[[CMat; 3]; 2]| m.clone().map(|row| row.map(Complex)),
    |w: [[Complex; 3]; 2]| w.map(|row| row.map(|r| r.0))
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_rows_are_row_major() {
        let m: Real = serde_json::from_str("[[1, 2, 3], [4, 5, 6]]").unwrap();
        assert_eq!(m.0.shape(), (2, 3));
        assert_eq!(m.0[(1, 0)], 4.0);
        assert_eq!(serde_json::to_string(&m).unwrap(), "[[1.0,2.0,3.0],[4.0,5.0,6.0]]");
    }

    #[test]
    fn bare_number_is_one_by_one() {
        let m: Real = serde_json::from_str("0.25").unwrap();
        assert_eq!(m.0, RMat::from_element(1, 1, 0.25));
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(serde_json::from_str::<Real>("[[1, 2], [3]]").is_err());
    }

    #[test]
    fn complex_pairs_and_reals_mix() {
        let m: Complex = serde_json::from_str("[[1, [0.5, -2]]]").unwrap();
        assert_eq!(m.0[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(m.0[(0, 1)], Complex64::new(0.5, -2.0));
        let back: Complex = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
