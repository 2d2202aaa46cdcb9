use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{EvalError, Result, SeatResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoScores {
    pub count: usize,
    pub lms: f64,
    pub ss: f64,
    pub icat: f64,
}

/// Everything one evaluation run produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// Free-form provenance (encoder checksum, checkpoint paths, ...).
    pub meta: BTreeMap<String, String>,
    pub seat: Vec<(String, SeatResult)>,
    pub crows: Option<f64>,
    pub stereoset_domains: BTreeMap<String, StereoScores>,
    pub stereoset_overall: Option<StereoScores>,
}

/// One `benchmark, subset, metric, value` row.
pub type ReportRow = (String, String, String, f64);

impl EvalReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        let mut push = |b: &str, s: &str, m: &str, v: f64| rows.push((b.to_string(), s.to_string(), m.to_string(), v));
        for (id, r) in &self.seat {
            push("seat", id, "effect_size", r.effect_size);
            push("seat", id, "p_value", r.p_value);
        }
        if let Some(c) = self.crows {
            push("crows", "all", "score", c);
        }
        let stereo = self
            .stereoset_domains
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(self.stereoset_overall.as_ref().map(|v| ("overall", v)));
        for (subset, s) in stereo {
            push("stereoset", subset, "count", s.count as f64);
            push("stereoset", subset, "lms", s.lms);
            push("stereoset", subset, "ss", s.ss);
            push("stereoset", subset, "icat", s.icat);
        }
        rows
    }

    /// `benchmark.subset.metric = value` lines after `# key = value`
    /// provenance lines.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        for (b, s, m, v) in self.rows() {
            out.push_str(&format!("{b}.{s}.{m} = {v}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["benchmark", "subset", "metric", "value"])
            .expect("in-memory write");
        for (b, s, m, v) in self.rows() {
            w.write_record([b, s, m, v.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn write(&self, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let kv = dir.join("report.txt");
        let csv_path = dir.join("report.csv");
        fs::write(&kv, self.to_kv_text()).map_err(io(&kv))?;
        fs::write(&csv_path, self.to_csv()).map_err(io(&csv_path))?;
        Ok((kv, csv_path))
    }
}

/// Reads the rows of a `report.csv`.
pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| EvalError::Parse {
        path: path.into(),
        line: 0,
        message: e.to_string(),
    })?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e: csv::Error| EvalError::Parse {
                path: path.into(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}
