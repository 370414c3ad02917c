//! Serde adapters that write matrices as row-major nested arrays.

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub(crate) fn to_rows<T: Clone + nalgebra::Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

pub(crate) fn from_rows<T: Clone + nalgebra::Scalar>(
    rows: Vec<Vec<T>>,
) -> std::result::Result<DMatrix<T>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    let flat: Vec<T> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}

pub fn serialize<S, T>(m: &DMatrix<T>, s: S) -> std::result::Result<S::Ok, S::Error>
where
    S: Serializer,
    T: Serialize + Clone + nalgebra::Scalar,
{
    to_rows(m).serialize(s)
}

pub fn deserialize<'de, D, T>(d: D) -> std::result::Result<DMatrix<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de> + Clone + nalgebra::Scalar,
{
    let rows = Vec::<Vec<T>>::deserialize(d)?;
    from_rows(rows).map_err(D::Error::custom)
}

pub mod option {
    use super::*;

    pub fn serialize<S, T>(m: &Option<DMatrix<T>>, s: S) -> std::result::Result<S::Ok, S::Error>
    where
        S: Serializer,
        T: Serialize + Clone + nalgebra::Scalar,
    {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D, T>(d: D) -> std::result::Result<Option<DMatrix<T>>, D::Error>
    where
        D: Deserializer<'de>,
        T: Deserialize<'de> + Clone + nalgebra::Scalar,
    {
        match Option::<Vec<Vec<T>>>::deserialize(d)? {
            Some(rows) => from_rows(rows).map(Some).map_err(D::Error::custom),
            None => Ok(None),
        }
    }
}
