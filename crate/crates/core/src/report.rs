//! Summary table and per-round curves regenerated from a run's metrics file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{read_metrics, CONFIG_FILE, METRICS_FILE};

pub const SUMMARY_FILE: &str = "summary.txt";
pub const CURVES_FILE: &str = "curves.csv";

/// Per-round table: `round → site → column → value`.
type Table = BTreeMap<u64, BTreeMap<usize, Vec<f64>>>;

fn parse_rows(path: &Path, header: &str, rows: &[String]) -> Result<(Vec<String>, Table)> {
    let cols: Vec<String> = header.split(',').map(str::to_string).collect();
    if cols.len() < 4 || cols[0] != "round" || cols[1] != "site" {
        return Err(Error::file(path, "unexpected column header"));
    }
    let mut table = Table::new();
    for (i, r) in rows.iter().enumerate() {
        let f: Vec<&str> = r.split(',').collect();
        if f.len() != cols.len() {
            return Err(Error::file(path, format!("row {} has {} fields", i + 1, f.len())));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::file(path, format!("row {}: bad number '{s}'", i + 1)));
        let round: u64 = f[0].parse().map_err(|_| Error::file(path, format!("row {}: bad round", i + 1)))?;
        let site: usize = f[1].parse().map_err(|_| Error::file(path, format!("row {}: bad site", i + 1)))?;
        let vals = f[2..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
        table.entry(round).or_default().insert(site, vals);
    }
    Ok((cols[2..].to_vec(), table))
}

/// Writes `summary.txt` (sites as columns, average last, final round) and
/// `curves.csv` (per-round IoU and ASSD per site and averaged). Output is a
/// pure function of the metrics file.
pub fn emit_report(dir: &Path) -> Result<PathBuf> {
    let mpath = dir.join(METRICS_FILE);
    let (digest, header, rows) = read_metrics(&mpath)?;
    let cpath = dir.join(CONFIG_FILE);
    if cpath.exists() {
        let text = fs::read_to_string(&cpath).map_err(|e| Error::file(&cpath, e.to_string()))?;
        if ExperimentConfig::parse(&text)?.digest() != digest {
            return Err(Error::file(&cpath, "config and metrics come from different runs"));
        }
    }
    let (cols, table) = parse_rows(&mpath, &header, &rows)?;
    let (&last, final_rows) = table.iter().next_back().ok_or_else(|| Error::file(&mpath, "no metric rows"))?;
    let sites: Vec<usize> = final_rows.keys().copied().collect();
    for round in table.values() {
        if round.keys().copied().collect::<Vec<_>>() != sites {
            return Err(Error::file(&mpath, "rounds cover different sites"));
        }
    }

    let mut out = String::new();
    let _ = writeln!(out, "# config {digest}");
    let _ = writeln!(out, "# round {last}");
    let mut head = format!("{:<8}", "metric");
    for s in &sites {
        let _ = write!(head, " {:>10}", format!("site{s}"));
    }
    let _ = write!(head, " {:>10}", "avg");
    let _ = writeln!(out, "{head}");
    let shown: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("iou") || c.starts_with("assd"))
        .map(|(i, _)| i)
        .collect();
    for &ci in &shown {
        let vals: Vec<f64> = sites.iter().map(|s| final_rows[s][ci]).collect();
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        let mut line = format!("{:<8}", cols[ci]);
        for v in vals.iter().chain([&avg]) {
            let _ = write!(line, " {:>10.4}", v);
        }
        let _ = writeln!(out, "{line}");
    }
    let spath = dir.join(SUMMARY_FILE);
    fs::write(&spath, out).map_err(|e| Error::file(&spath, e.to_string()))?;

    let (iou_i, assd_i) = (0, 1);
    let mut curves = format!("# config {digest}\nround");
    for m in ["iou", "assd"] {
        for s in &sites {
            let _ = write!(curves, ",{m}_site{s}");
        }
        let _ = write!(curves, ",{m}_avg");
    }
    curves.push('\n');
    for (round, per_site) in &table {
        let _ = write!(curves, "{round}");
        for ci in [iou_i, assd_i] {
            let vals: Vec<f64> = sites.iter().map(|s| per_site[s][ci]).collect();
            for v in &vals {
                let _ = write!(curves, ",{v}");
            }
            let _ = write!(curves, ",{}", vals.iter().sum::<f64>() / vals.len() as f64);
        }
        curves.push('\n');
    }
    let cvpath = dir.join(CURVES_FILE);
    fs::write(&cvpath, curves).map_err(|e| Error::file(&cvpath, e.to_string()))?;
    Ok(spath)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "# config abc\nround,site,iou,assd,iou_c0,assd_c0,coarse,calib,con,joint\n\
        1,0,0.5,2,0.5,2,0.4,0.3,0,0.7\n1,1,0.7,1,0.7,1,0.4,0.3,0,0.7\n\
        2,0,0.6,1.5,0.6,1.5,0.3,0.2,0,0.5\n2,1,0.8,0.5,0.8,0.5,0.3,0.2,0,0.5\n";

    #[test]
    fn table_layout_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(METRICS_FILE), CSV).unwrap();
        let p = emit_report(dir.path()).unwrap();
        let first = fs::read_to_string(&p).unwrap();
        let iou = first.lines().find(|l| l.starts_with("iou ")).unwrap();
        let cells: Vec<&str> = iou.split_whitespace().collect();
        assert_eq!(cells, vec!["iou", "0.6000", "0.8000", "0.7000"]);
        assert!(first.lines().nth(2).unwrap().ends_with("avg"));
        emit_report(dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), first);
        let curves = fs::read_to_string(dir.path().join(CURVES_FILE)).unwrap();
        assert_eq!(curves.lines().count(), 4);
        assert!(curves.lines().nth(2).unwrap().starts_with("1,0.5,0.7,0.6"));
    }

    #[test]
    fn rejects_mixed_digests_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path()).is_err());
        fs::write(dir.path().join(METRICS_FILE), CSV).unwrap();
        fs::write(dir.path().join(CONFIG_FILE), ExperimentConfig::default().to_text()).unwrap();
        assert!(emit_report(dir.path()).is_err());
    }
}
