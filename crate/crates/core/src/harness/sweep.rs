//! One train + evaluate per value of a single config key.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::ACT_WEIGHT_AXIS;
use super::train::{load_data, train_on};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::par;
use crate::tasks::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub best_iter: usize,
    /// Selection-split accuracy of the best checkpoint.
    pub valid_select: f64,
    pub valid_iid: f64,
    pub test: f64,
}

/// `key=v1,v2,...`. `act_weight` without values expands to the standard
/// search grid.
pub fn parse_axis(s: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = s.split_once('=').unwrap_or((s, ""));
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("bad sweep axis `{s}`")));
    }
    let mut values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if values.is_empty() && key == "act_weight" {
        values = ACT_WEIGHT_AXIS.iter().map(f64::to_string).collect();
    }
    if values.is_empty() {
        return Err(Error::Config(format!("sweep axis `{key}` has no values")));
    }
    Ok((key.to_string(), values))
}

/// Trains one run per value under `out/{key}={value}` and writes
/// `out/sweep.tsv`. Every row uses the same seeds, so rows are independent
/// of execution order.
pub fn sweep(base: &[(String, String)], key: &str, values: &[String], out: &Path) -> Result<Vec<SweepRow>> {
    let configs = values
        .iter()
        .map(|v| {
            let mut pairs: Vec<(&str, &str)> = base.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            pairs.push((key, v.as_str()));
            RunConfig::from_pairs(pairs)
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cached: Option<(RunConfig, Dataset)> = None;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let same_data = |c: &RunConfig| c.task == cfg.task && c.data_seed == cfg.data_seed && c.plan == cfg.plan && c.data_dir == cfg.data_dir;
        if !cached.as_ref().is_some_and(|(c, _)| same_data(c)) {
            cached = Some((cfg.clone(), load_data(cfg)?));
        }
        let ds = &cached.as_ref().unwrap().1;
        let dir = out.join(format!("{key}={value}").replace(['/', ' '], "_"));
        let r = par::with_threads(cfg.threads, || train_on(cfg, ds, &dir))?;
        rows.push(SweepRow {
            value: value.clone(),
            best_iter: r.best_iter,
            valid_select: r.best_accuracy,
            valid_iid: r.valid_iid,
            test: r.test_accuracy,
        });
    }
    let table = format_table(key, &rows);
    let path = out.join("sweep.tsv");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn format_table(key: &str, rows: &[SweepRow]) -> String {
    let mut s = format!("{key}\tbest_iter\tvalid_select\tvalid_iid\ttest\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}\t{:.4}", r.value, r.best_iter, r.valid_select, r.valid_iid, r.test);
    }
    s
}
