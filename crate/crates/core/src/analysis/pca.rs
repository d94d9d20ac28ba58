use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// One row of `dims` coordinates per sample.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance carried by each kept component.
    pub explained: Vec<f64>,
    /// Unit principal directions, each of the input width.
    pub components: Vec<Vec<f64>>,
}

/// Principal-component projection. Each component's first nonzero loading
/// is made positive so the output is deterministic.
pub fn pca(rows: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if dims == 0 || n < dims || d < dims {
        return Err(Error::invalid(
            "pca",
            format!("cannot project {n} samples of width {d} onto {dims} components"),
        ));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("pca", "rows have different widths"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut v: Vec<f64> = vt.row(k).iter().copied().collect();
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        let s = svd.singular_values[k];
        explained.push(if total > 0.0 { s * s / total } else { 0.0 });
        components.push(v);
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|v| x.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        explained,
        components,
    })
}

/// `trajectory,step,pc1..pcK` followed by one row per sample; the explained
/// variance goes to a sibling `*_explained.csv`.
pub fn write_projection_csv(path: &Path, proj: &Projection, labels: &[(usize, usize)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["trajectory".to_string(), "step".to_string()];
    header.extend((1..=proj.explained.len()).map(|k| format!("pc{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, (t, s)) in proj.coords.iter().zip(labels) {
        let mut rec = vec![t.to_string(), s.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    crate::numerics::write_atomic(path, &bytes)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["component", "explained_variance_ratio"]).map_err(csv_err)?;
    for (k, e) in proj.explained.iter().enumerate() {
        w.write_record([format!("pc{}", k + 1), e.to_string()]).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Corrupt(e.to_string()))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("projection");
    crate::numerics::write_atomic(&path.with_file_name(format!("{stem}_explained.csv")), &bytes)
}
