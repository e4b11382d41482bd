//! Table and plot-series output for sweep results.

use std::fmt::Write as _;
use std::path::Path;

use super::marginal::marginal_drop;
use super::sweep::{SweepResult, SweepRow};
use crate::error::{Error, Result};

const MISSING: &str = "-";

fn ratio_label(r: f64) -> String {
    format!("{r}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}

fn csv_text(rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).map_err(|e| Error::format("csv", e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e))?;
    String::from_utf8(bytes).map_err(|e| Error::format("csv", e))
}

impl SweepResult {
    /// Sequence lengths and ratios in first-seen order.
    pub fn axes(&self) -> (Vec<usize>, Vec<f64>) {
        let mut seqlens = Vec::new();
        let mut ratios = Vec::new();
        for r in &self.rows {
            if !seqlens.contains(&r.seqlen) {
                seqlens.push(r.seqlen);
            }
            if !ratios.contains(&r.ratio) {
                ratios.push(r.ratio);
            }
        }
        (seqlens, ratios)
    }

    fn grid_cell(&self, seqlen: usize, ratio: f64, f: impl Fn(&SweepRow) -> Option<String>) -> String {
        match self.row(seqlen, ratio) {
            Some(r) if r.error.is_some() => "err".into(),
            Some(r) => f(r).unwrap_or_else(|| MISSING.into()),
            None => MISSING.into(),
        }
    }

    /// Speedup and cost-model memory reduction, two rows per sequence length,
    /// one column per ratio.
    pub fn table2_grid(&self) -> Vec<Vec<String>> {
        let (seqlens, ratios) = self.axes();
        let mut out = vec![["Seqlen", "Metric"].iter().map(|s| s.to_string()).chain(ratios.iter().map(|&r| ratio_label(r))).collect()];
        for &l in &seqlens {
            let mut speed = vec![l.to_string(), "Speedup (x)".into()];
            let mut mem = vec![String::new(), "Mem. Red. (%)".into()];
            for &r in &ratios {
                speed.push(self.grid_cell(l, r, |row| row.speedup.map(|s| format!("{s:.2}x"))));
                mem.push(self.grid_cell(l, r, |row| Some(format!("{:.2}%", row.mem_reduction_pct))));
            }
            out.push(speed);
            out.push(mem);
        }
        out
    }

    pub fn table2_text(&self) -> String {
        let grid = self.table2_grid();
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", cells.join(" | ").trim_end()).unwrap();
            if i == 0 {
                writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")).unwrap();
            }
        }
        out
    }

    /// Grid in machine form: `seqlen,metric,<ratio>...` with plain numbers.
    pub fn table2_csv(&self) -> Result<String> {
        let (seqlens, ratios) = self.axes();
        let mut rows = vec![["seqlen", "metric"].iter().map(|s| s.to_string()).chain(ratios.iter().map(|&r| ratio_label(r))).collect()];
        for &l in &seqlens {
            for (metric, f) in [
                ("speedup", (|r: &SweepRow| r.speedup) as fn(&SweepRow) -> Option<f64>),
                ("mem_reduction_pct", |r: &SweepRow| Some(r.mem_reduction_pct)),
                ("hwm_reduction_pct", |r: &SweepRow| r.hwm_reduction_pct),
            ] {
                let mut row = vec![l.to_string(), metric.to_string()];
                row.extend(ratios.iter().map(|&r| opt(self.row(l, r).filter(|x| x.error.is_none()).and_then(f))));
                rows.push(row);
            }
        }
        csv_text(rows)
    }

    /// Every column of every row.
    pub fn to_csv(&self) -> Result<String> {
        let header = [
            "seqlen",
            "ratio",
            "zone",
            "kept_states",
            "dense_latency_ms",
            "pruned_latency_ms",
            "speedup",
            "mem_dense_bytes",
            "mem_pruned_bytes",
            "mem_reduction_pct",
            "state_space_mem_reduction_pct",
            "hwm_dense_bytes",
            "hwm_pruned_bytes",
            "hwm_reduction_pct",
            "mean_rel_l2",
            "max_rel_l2",
            "accuracy",
            "error",
        ];
        let mut rows = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
        for r in &self.rows {
            let f = r.fidelity.as_ref();
            rows.push(vec![
                r.seqlen.to_string(),
                ratio_label(r.ratio),
                r.zone.as_str().into(),
                r.kept_states.to_string(),
                opt(r.dense_latency_ms),
                opt(r.pruned_latency_ms),
                opt(r.speedup),
                r.mem_dense_bytes.to_string(),
                r.mem_pruned_bytes.to_string(),
                format!("{:?}", r.mem_reduction_pct),
                format!("{:?}", r.state_space_mem_reduction_pct),
                r.hwm_dense_bytes.map_or_else(String::new, |v| v.to_string()),
                r.hwm_pruned_bytes.map_or_else(String::new, |v| v.to_string()),
                opt(r.hwm_reduction_pct),
                opt(f.map(|f| f.mean_rel_l2)),
                opt(f.map(|f| f.max_rel_l2)),
                opt(f.and_then(|f| f.accuracy)),
                r.error.clone().unwrap_or_default(),
            ]);
        }
        csv_text(rows)
    }

    /// Per-ratio fidelity and latency at the longest sequence length.
    pub fn tradeoff_csv(&self) -> Result<String> {
        let (seqlens, ratios) = self.axes();
        let l = seqlens.iter().copied().max().unwrap_or(0);
        let mut rows = vec![["ratio", "zone", "seqlen", "pruned_latency_ms", "speedup", "mean_rel_l2", "accuracy"]
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()];
        for &r in &ratios {
            let Some(row) = self.row(l, r) else { continue };
            let f = row.fidelity.as_ref();
            rows.push(vec![
                ratio_label(r),
                row.zone.as_str().into(),
                l.to_string(),
                opt(row.pruned_latency_ms),
                opt(row.speedup),
                opt(f.map(|f| f.mean_rel_l2)),
                opt(f.and_then(|f| f.accuracy)),
            ]);
        }
        csv_text(rows)
    }

    /// Finite-difference slope of accuracy (or, without labelled items, of
    /// `1 - mean_rel_l2`) over the ratio grid. `None` when the grid is not
    /// uniform or has fewer than two points.
    pub fn marginal_csv(&self) -> Result<Option<String>> {
        let (seqlens, ratios) = self.axes();
        let Some(&l) = seqlens.first() else { return Ok(None) };
        let mut metric = "accuracy";
        let mut curve = Vec::new();
        for &r in &ratios {
            let Some(f) = self.row(l, r).and_then(|row| row.fidelity.as_ref()) else { return Ok(None) };
            match f.accuracy {
                Some(a) => curve.push((r, a)),
                None => {
                    metric = "one_minus_rel_l2";
                    curve.push((r, 1.0 - f.mean_rel_l2));
                }
            }
        }
        if curve.len() < 2 {
            return Ok(None);
        }
        let mut sorted: Vec<f64> = curve.iter().map(|p| p.0).collect();
        sorted.sort_by(f64::total_cmp);
        let delta = sorted[1] - sorted[0];
        let Ok(drops) = marginal_drop(&curve, delta) else { return Ok(None) };
        let mut rows = vec![vec!["ratio".to_string(), "metric".into(), "delta".into(), "marginal_drop".into()]];
        for (r, d) in drops {
            rows.push(vec![ratio_label(r), metric.into(), format!("{delta:?}"), format!("{d:?}")]);
        }
        csv_text(rows).map(Some)
    }

    /// Write `sweep.json`, `sweep.csv`, `table2.csv`, `table2.txt` and the
    /// plot series under `plots/`.
    pub fn write_outputs(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let plots = dir.join("plots");
        std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
        let mut files = vec![
            (dir.join("sweep.json"), self.to_json()?),
            (dir.join("sweep.csv"), self.to_csv()?),
            (dir.join("table2.csv"), self.table2_csv()?),
            (dir.join("table2.txt"), self.table2_text()),
            (plots.join("tradeoff.csv"), self.tradeoff_csv()?),
        ];
        if let Some(m) = self.marginal_csv()? {
            files.push((plots.join("marginal_drop.csv"), m));
        }
        for (path, text) in &files {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
