//! Serde helpers for numeric data in text documents.
//!
//! Infinite values are written as the string sentinels `"inf"` and `"-inf"`,
//! and matrices as arrays of rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Number {
    Finite(f64),
    Sentinel(String),
}

impl Number {
    fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Number::Sentinel("inf".into())
        } else if v == f64::NEG_INFINITY {
            Number::Sentinel("-inf".into())
        } else {
            Number::Finite(v)
        }
    }

    fn into_f64<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            Number::Finite(v) => Ok(v),
            Number::Sentinel(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("invalid numeric sentinel {other:?}"))),
            },
        }
    }
}

pub mod bounds {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let items: Vec<Number> = v.iter().copied().map(Number::from_f64).collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let items = Vec::<Number>::deserialize(d)?;
        items.into_iter().map(Number::into_f64).collect()
    }
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Matrix as a list of rows. An empty list deserializes to a 0×0 matrix; the
/// owner is responsible for fixing the column count afterwards.
pub mod matrix {
    use super::*;

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, E> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(E::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?)
    }
}
