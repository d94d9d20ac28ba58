use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

/// A headered numeric table; the first column is the x axis.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_curve_table(path: &Path) -> Result<CurveTable> {
    let csv_err = |line: u64, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(0, e.to_string()))?;
    let columns: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.len() < 2 {
        return Err(csv_err(1, "need an x column and at least one metric".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        if rec.len() != columns.len() {
            return Err(csv_err(line, format!("expected {} fields, found {}", columns.len(), rec.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| csv_err(line, format!("`{f}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::NoData(format!("{} has no data rows", path.display())));
    }
    Ok(CurveTable { columns, rows })
}

/// Per-x mean and population standard deviation across runs; points where
/// any run is missing or `NaN` are dropped.
pub fn mean_std_series(tables: &[CurveTable], col: usize) -> Vec<(f64, f64, f64)> {
    let len = tables.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    (0..len)
        .filter_map(|i| {
            let ys: Vec<f64> = tables.iter().map(|t| t.rows[i][col]).collect();
            if ys.iter().any(|y| !y.is_finite()) {
                return None;
            }
            let n = ys.len() as f64;
            let m = ys.iter().sum::<f64>() / n;
            let s = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n).sqrt();
            Some((tables[0].rows[i][0], m, s))
        })
        .collect()
}

pub const PLOT_SIZE: (u32, u32) = (640, 400);

/// One PNG per metric column in `out_dir`, named after the column. Every
/// input is treated as one seed; with more than one the mean is drawn with
/// a ±1 std band.
pub fn plot_curves(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if paths.is_empty() {
        return Err(Error::NoData("no curve files given".into()));
    }
    let tables = paths.iter().map(|p| read_curve_table(p)).collect::<Result<Vec<_>>>()?;
    let columns = &tables[0].columns;
    if let Some((p, _)) = paths.iter().zip(&tables).find(|(_, t)| &t.columns != columns) {
        return Err(Error::Csv {
            path: p.clone(),
            line: 1,
            msg: "columns differ from the first file".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (c, name) in columns.iter().enumerate().skip(1) {
        let series = mean_std_series(&tables, c);
        if series.is_empty() {
            continue;
        }
        let out = out_dir.join(format!("{name}.png"));
        draw(&out, &series, tables.len() > 1).map_err(|e| Error::Image(format!("{}: {e}", out.display())))?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(Error::NoData("no metric has finite values".into()));
    }
    Ok(written)
}

fn draw(out: &Path, series: &[(f64, f64, f64)], band: bool) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let (x0, x1) = series.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = series.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        let s = if band { p.2 } else { 0.0 };
        (a.min(p.1 - s), b.max(p.1 + s))
    });
    let pad = |lo: f64, hi: f64| if hi > lo { (hi - lo) * 0.05 } else { lo.abs().max(1.0) * 0.05 };
    let (px, py) = (pad(x0, x1), pad(y0, y1));
    let root = BitMapBackend::new(out, PLOT_SIZE).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d((x0 - px)..(x1 + px), (y0 - py)..(y1 + py))?;
    if band {
        let upper = series.iter().map(|p| (p.0, p.1 + p.2));
        let lower = series.iter().rev().map(|p| (p.0, p.1 - p.2));
        chart.draw_series(std::iter::once(Polygon::new(
            upper.chain(lower).collect::<Vec<_>>(),
            BLUE.mix(0.2).filled(),
        )))?;
    }
    chart.draw_series(LineSeries::new(series.iter().map(|p| (p.0, p.1)), BLUE.stroke_width(2)))?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn band_statistics() {
        let t = |ys: [f64; 2]| CurveTable {
            columns: vec!["x".into(), "y".into()],
            rows: vec![vec![0.0, ys[0]], vec![1.0, ys[1]]],
        };
        let s = mean_std_series(&[t([1.0, f64::NAN]), t([3.0, 2.0]), t([1.0, 2.0]), t([3.0, 2.0])], 1);
        assert_eq!(s, vec![(0.0, 2.0, 1.0)]);
        let s = mean_std_series(&[t([1.0, 5.0])], 1);
        assert_eq!(s, vec![(0.0, 1.0, 0.0), (1.0, 5.0, 0.0)]);
    }

    #[test]
    fn plots_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "step,loss,acc\n0,1.0,NaN\n1,0.5,0.2\n2,0.25,0.4\n");
        let b = write(dir.path(), "b.csv", "step,loss,acc\n0,1.5,NaN\n1,0.7,0.1\n2,0.2,0.5\n");
        let out = plot_curves(&[a.clone(), b], &dir.path().join("plots")).unwrap();
        assert_eq!(out.len(), 2);
        for p in &out {
            let bytes = std::fs::read(p).unwrap();
            assert_eq!(&bytes[1..4], b"PNG");
        }
        let empty = write(dir.path(), "e.csv", "step,loss\n");
        assert!(matches!(plot_curves(&[empty], dir.path()), Err(Error::NoData(_))));
        let bad = write(dir.path(), "m.csv", "step,loss\n0,1\n1,oops\n");
        match plot_curves(&[bad], dir.path()) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
