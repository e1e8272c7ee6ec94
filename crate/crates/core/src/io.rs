//! Headered CSV tables of floats, written with 17 significant digits so
//! values round-trip bit-exactly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};

pub const COORD_PREFIX: &str = "coord";

pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    match s.trim() {
        "nan" | "NaN" => Ok(f64::NAN),
        "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
        "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
        t => t
            .parse()
            .map_err(|_| invalid(format!("'{t}' is not a number"))),
    }
}

/// `<path>.json`, the metadata sidecar of a CSV file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes named columns of equal length.
pub fn write_table(path: &Path, headers: &[String], columns: &[ArrayView1<f64>]) -> Result<()> {
    assert_eq!(headers.len(), columns.len());
    let n = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch("table columns differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(headers)?;
    let mut row = Vec::with_capacity(columns.len());
    for i in 0..n {
        row.clear();
        row.extend(columns.iter().map(|c| format_f64(c[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headered float table into `(headers, columns)`.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(invalid(format!("{}: ragged row", path.display())));
        }
        for (c, v) in columns.iter_mut().zip(rec.iter()) {
            c.push(parse_f64(v)?);
        }
    }
    Ok((headers, columns))
}

pub fn coord_headers(d: usize) -> Vec<String> {
    (0..d).map(|k| format!("{COORD_PREFIX}{k}")).collect()
}

/// Points as `coord0..coord{d-1}` columns, plus an optional named column.
pub fn write_points_csv(
    path: &Path,
    points: ArrayView2<f64>,
    extra: Option<(&str, ArrayView1<f64>)>,
) -> Result<()> {
    let mut extras = Vec::new();
    if let Some(e) = extra {
        extras.push(e);
    }
    write_points_with(path, points, &extras)
}

/// Points plus any number of named columns.
pub fn write_points_with(
    path: &Path,
    points: ArrayView2<f64>,
    extra: &[(&str, ArrayView1<f64>)],
) -> Result<()> {
    let mut headers = coord_headers(points.ncols());
    let owned: Vec<Array1<f64>> = points.columns().into_iter().map(|c| c.to_owned()).collect();
    let mut cols: Vec<ArrayView1<f64>> = owned.iter().map(|c| c.view()).collect();
    for (name, col) in extra {
        headers.push(name.to_string());
        cols.push(col.view());
    }
    write_table(path, &headers, &cols)
}

/// Coordinates (all `coord*` columns, in order) and the column named
/// `extra`, if requested and present.
pub fn read_points_csv(path: &Path, extra: Option<&str>) -> Result<(Array2<f64>, Option<Array1<f64>>)> {
    let (headers, columns) = read_table(path)?;
    let (points, rest) = split_points(&headers, columns)?;
    let extra = extra.and_then(|name| rest.into_iter().find(|(h, _)| h == name).map(|(_, c)| Array1::from(c)));
    Ok((points, extra))
}

/// Separates `coord*` columns from the others.
pub fn split_points(
    headers: &[String],
    columns: Vec<Vec<f64>>,
) -> Result<(Array2<f64>, Vec<(String, Vec<f64>)>)> {
    let mut coords = Vec::new();
    let mut rest = Vec::new();
    for (h, c) in headers.iter().zip(columns) {
        if h.starts_with(COORD_PREFIX) {
            coords.push(c);
        } else {
            rest.push((h.clone(), c));
        }
    }
    if coords.is_empty() {
        return Err(invalid("table has no coordinate columns"));
    }
    let n = coords[0].len();
    let d = coords.len();
    let points = Array2::from_shape_fn((n, d), |(i, k)| coords[k][i]);
    Ok((points, rest))
}

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"`
/// and `"nan"`, which plain JSON cannot represent.
pub mod json_f64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_f64(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(D::Error::custom(format!("not a float: {other}"))),
            },
        }
    }
}
