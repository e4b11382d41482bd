//! Layer x state score matrices as CSV and PPM images.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use super::scores::ActivityScores;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Row `l` holds layer `l`'s scores as recorded.
    pub raw: Array2<f64>,
    /// Each row rescaled to `[0, 1]`; a constant row maps to zeros.
    pub normalized: Array2<f64>,
}

/// Build the heatmap for every layer of `scores`.
pub fn export_heatmap(scores: &ActivityScores) -> Result<Heatmap> {
    let layers = scores.complete()?;
    let n = layers.first().map_or(0, |l| l.scores.len());
    if let Some(l) = layers.iter().find(|l| l.scores.len() != n) {
        return Err(Error::ActivityShape {
            layer: l.layer,
            expected: n,
            got: l.scores.len(),
        });
    }
    let raw = Array2::from_shape_fn((layers.len(), n), |(i, s)| layers[i].scores[s]);
    let normalized = normalize_rows(&raw);
    Ok(Heatmap { raw, normalized })
}

/// Per-row min-max scaling; rows with `min == max` become zero.
pub fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        row.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
    }
    out
}

/// `layer,s0,s1,...` header then one row per layer. Values use the shortest
/// representation that parses back to the same double.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::from("layer");
    for s in 0..m.ncols() {
        write!(out, ",s{s}").unwrap();
    }
    out.push('\n');
    for (l, row) in m.rows().into_iter().enumerate() {
        write!(out, "{l}").unwrap();
        for v in row {
            write!(out, ",{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let width = reader.headers().map_err(|e| Error::format("heatmap csv", e))?.len();
    if width == 0 {
        return Err(Error::format("heatmap csv", "missing header"));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format("heatmap csv", e))?;
        let index: usize = rec[0].parse().map_err(|e| Error::format("heatmap csv", e))?;
        if index != i {
            return Err(Error::format("heatmap csv", format!("row {i} labelled layer {index}")));
        }
        for field in rec.iter().skip(1) {
            data.push(field.parse::<f64>().map_err(|e| Error::format("heatmap csv", e))?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width - 1), data).map_err(|e| Error::format("heatmap csv", e))
}

/// Five-stop approximation of the viridis ramp.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn colour(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| (RAMP[i][c] + f * (RAMP[i + 1][c] - RAMP[i][c])).round() as u8)
}

/// Binary PPM (P6) of values in `[0, 1]`, each cell drawn as `cell x cell` pixels.
pub fn render_ppm(m: &Array2<f64>, cell: usize) -> Vec<u8> {
    let cell = cell.max(1);
    let (h, w) = (m.nrows() * cell, m.ncols() * cell);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&colour(m[[y / cell, x / cell]]));
        }
    }
    out
}

impl Heatmap {
    /// Write `heatmap_raw.csv`, `heatmap_normalized.csv` and `heatmap.ppm`
    /// into `dir`.
    pub fn write_dir(&self, dir: &Path, cell: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files: [(&str, Vec<u8>); 3] = [
            ("heatmap_raw.csv", matrix_to_csv(&self.raw).into_bytes()),
            ("heatmap_normalized.csv", matrix_to_csv(&self.normalized).into_bytes()),
            ("heatmap.ppm", render_ppm(&self.normalized, cell)),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::record::ModeFilter;
    use crate::activity::scores::{ActivityMeta, LayerScores};
    use ndarray::array;

    fn scores(rows: Vec<Vec<f64>>) -> ActivityScores {
        ActivityScores {
            n_layers: rows.len(),
            layers: rows
                .into_iter()
                .enumerate()
                .map(|(layer, scores)| LayerScores {
                    layer,
                    scores,
                    head_scores: None,
                    n_samples: 1,
                })
                .collect(),
            meta: ActivityMeta {
                dataset: "test".into(),
                seed: None,
                modes: ModeFilter::Both,
                n_samples: 1,
            },
        }
    }

    #[test]
    fn single_row_raw_and_normalized() {
        let h = export_heatmap(&scores(vec![vec![0.1, 0.9]])).unwrap();
        assert_eq!(h.raw, array![[0.1, 0.9]]);
        assert_eq!(h.normalized, array![[0.0, 1.0]]);
    }

    #[test]
    fn constant_rows_normalize_to_zero() {
        let h = export_heatmap(&scores(vec![vec![0.4; 3], vec![2.0; 3]])).unwrap();
        assert!(h.normalized.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = array![[0.1, 1.0 / 3.0, 1e-300], [2.5, 0.30000000000000004, 7.0]];
        assert_eq!(parse_matrix_csv(&matrix_to_csv(&m)).unwrap(), m);
        let text = matrix_to_csv(&m);
        assert!(text.starts_with("layer,s0,s1,s2\n0,0.1,"));
    }

    #[test]
    fn missing_layers_are_listed() {
        let mut s = scores(vec![vec![1.0], vec![2.0], vec![3.0]]);
        s.layers.retain(|l| l.layer == 1);
        assert!(matches!(export_heatmap(&s), Err(Error::MissingLayers(v)) if v == vec![0, 2]));
    }

    #[test]
    fn ppm_header_and_size() {
        let img = render_ppm(&array![[0.0, 1.0]], 3);
        let header = b"P6\n6 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 3 * 6 * 3);
        assert_eq!(&img[header.len()..header.len() + 3], &[68, 1, 84]);
        assert_eq!(&img[img.len() - 3..], &[253, 231, 37]);
    }

    #[test]
    fn output_is_deterministic() {
        let s = scores(vec![vec![0.3, 0.1, 0.2], vec![0.5, 0.6, 0.4]]);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        export_heatmap(&s).unwrap().write_dir(&a, 4).unwrap();
        export_heatmap(&s).unwrap().write_dir(&b, 4).unwrap();
        for f in ["heatmap_raw.csv", "heatmap_normalized.csv", "heatmap.ppm"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
    }
}
