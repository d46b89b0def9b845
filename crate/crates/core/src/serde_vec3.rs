//! Serde helpers writing vectors and matrices as flat `f64` arrays.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::{Mat3, Real, Vec3};

pub fn serialize<T: Real, S: Serializer>(v: &Vec3<T>, s: S) -> Result<S::Ok, S::Error> {
    [v[0].as_f64(), v[1].as_f64(), v[2].as_f64()].serialize(s)
}

pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<Vec3<T>, D::Error> {
    let a = <[f64; 3]>::deserialize(d)?;
    Ok(Vec3::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2])))
}

/// Row-major 9 numbers.
pub mod mat3 {
    use super::*;

    pub fn serialize<T: Real, S: Serializer>(m: &Mat3<T>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<f64> = m.transpose().iter().map(|x| x.as_f64()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<Mat3<T>, D::Error> {
        let v = <[f64; 9]>::deserialize(d)?;
        Ok(Mat3::from_row_slice(&v).map(T::lit))
    }
}

/// Flat `[x0, y0, z0, x1, ...]` list.
pub mod list {
    use super::*;

    pub fn serialize<T: Real, S: Serializer>(v: &[Vec3<T>], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<f64> = v.iter().flat_map(|d| [d[0].as_f64(), d[1].as_f64(), d[2].as_f64()]).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, T: Real, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec3<T>>, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        if flat.len() % 3 != 0 {
            return Err(serde::de::Error::custom("vector list length not a multiple of 3"));
        }
        Ok(flat
            .chunks_exact(3)
            .map(|c| Vec3::new(T::lit(c[0]), T::lit(c[1]), T::lit(c[2])))
            .collect())
    }
}
