//! Experiment runs: data, rounds, per-round metrics, checkpoints and report.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{Dtype, ExperimentConfig};
use crate::data::{self, SiteData};
use crate::error::{Error, Result};
use crate::federation::{self, ClientUpdate, FederationState};
use crate::metrics::SiteReport;
use crate::report;
use crate::tensor::Real;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// What a finished (or stopped) run leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub digest: String,
    pub rounds_done: u64,
    pub reports: Vec<SiteReport>,
    pub state_digest: String,
}

impl RunOutcome {
    /// Mean over sites of the per-site averaged IoU.
    pub fn mean_iou(&self) -> f64 {
        self.reports.iter().map(|r| r.mean_iou).sum::<f64>() / self.reports.len() as f64
    }

    pub fn mean_assd(&self) -> f64 {
        self.reports.iter().map(|r| r.mean_assd).sum::<f64>() / self.reports.len() as f64
    }
}


/// Synthetic benchmark, or the manifest's samples grouped by site.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<SiteData>> {
    let sites = match &cfg.manifest {
        Some(m) => data::by_site(data::load_directory(m, cfg.classes)?, cfg.sites)?,
        None => data::benchmark(&cfg.benchmark())?,
    };
    for (k, s) in sites.iter().enumerate() {
        if s.train.is_empty() {
            return Err(Error::EmptyDataset(format!("site {k} has no training samples")));
        }
        if s.test.is_empty() {
            return Err(Error::EmptyDataset(format!("site {k} has no test samples")));
        }
        if let Some(x) = s.all().next() {
            let (h, w) = x.size();
            cfg.profile().check_input(h, w)?;
        }
    }
    Ok(sites)
}

pub fn metrics_header(classes: usize) -> String {
    let mut cols = vec!["round".to_string(), "site".into(), "iou".into(), "assd".into()];
    for c in 0..classes {
        cols.push(format!("iou_c{c}"));
        cols.push(format!("assd_c{c}"));
    }
    cols.extend(["coarse", "calib", "con", "joint"].map(String::from));
    cols.join(",")
}

fn metrics_row<T>(round: u64, r: &SiteReport, u: &ClientUpdate<T>) -> String {
    let mut cols = vec![round.to_string(), u.site.to_string(), r.mean_iou.to_string(), r.mean_assd.to_string()];
    for (i, a) in r.iou.iter().zip(&r.assd) {
        cols.push(i.to_string());
        cols.push(a.to_string());
    }
    let s = &u.stats;
    cols.extend([s.coarse, s.calib, s.con, s.joint].map(|v| v.to_string()));
    cols.join(",")
}

struct MetricsLog {
    path: PathBuf,
    head: String,
    rows: Vec<String>,
}

impl MetricsLog {
    fn flush(&self) -> Result<()> {
        let mut text = self.head.clone();
        for r in &self.rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&self.path, text).map_err(|e| Error::file(&self.path, e))
    }
}

fn checkpoint_path(dir: &Path, round: u64) -> PathBuf {
    dir.join(format!("checkpoint_r{round:04}.ckpt"))
}

fn prepare_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::file(&cfg_path, e))
}

fn drive<T: Real>(
    cfg: &ExperimentConfig,
    dir: &Path,
    datasets: &[SiteData],
    mut state: FederationState<T>,
    mut log: MetricsLog,
    stop_after: Option<u64>,
) -> Result<RunOutcome> {
    let settings = cfg.train_settings();
    settings.validate()?;
    let last = stop_after.map_or(cfg.rounds, |s| s.min(cfg.rounds));
    let mut reports = Vec::new();
    while state.round < last {
        let updates = federation::run_round(&mut state, datasets, &settings)?;
        reports = federation::evaluate_all(&state, datasets, &settings)?;
        for (r, u) in reports.iter().zip(&updates) {
            log.rows.push(metrics_row(state.round, r, u));
        }
        log.flush()?;
        let due = cfg.checkpoint_every > 0 && state.round.is_multiple_of(cfg.checkpoint_every);
        if due || state.round == last {
            checkpoint::write(&checkpoint_path(dir, state.round), cfg, &state)?;
        }
    }
    if reports.is_empty() {
        reports = federation::evaluate_all(&state, datasets, &settings)?;
    }
    if state.round == cfg.rounds {
        report::emit_report(dir)?;
    }
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        digest: cfg.digest(),
        rounds_done: state.round,
        reports,
        state_digest: state.digest(),
    })
}

fn fresh<T: Real>(cfg: &ExperimentConfig, datasets: &[SiteData], stop_after: Option<u64>) -> Result<RunOutcome> {
    let dir = cfg.output_dir.clone();
    let state = FederationState::<T>::init(&cfg.profile(), &cfg.train_settings())?;
    let log = MetricsLog {
        path: dir.join(METRICS_FILE),
        head: format!("# config {}\n{}\n", cfg.digest(), metrics_header(cfg.classes)),
        rows: Vec::new(),
    };
    drive(cfg, &dir, datasets, state, log, stop_after)
}

/// Runs `cfg` from scratch into its output directory, optionally stopping
/// after `stop_after` rounds (a checkpoint is written at the stop).
pub fn run_experiment_until(cfg: &ExperimentConfig, stop_after: Option<u64>) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    if dir.join(METRICS_FILE).exists() {
        return Err(Error::file(dir, "directory already holds a run"));
    }
    let datasets = load_datasets(cfg)?;
    prepare_dir(cfg, dir)?;
    match cfg.dtype {
        Dtype::F32 => fresh::<f32>(cfg, &datasets, stop_after),
        Dtype::F64 => fresh::<f64>(cfg, &datasets, stop_after),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_experiment_until(cfg, None)
}

/// Reads `# config <digest>` and the data rows of a metrics file.
pub fn read_metrics(path: &Path) -> Result<(String, String, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut lines = text.lines();
    let digest = lines
        .next()
        .and_then(|l| l.strip_prefix("# config "))
        .ok_or_else(|| Error::file(path, "missing config digest line"))?
        .to_string();
    let header = lines.next().ok_or_else(|| Error::file(path, "missing column header"))?.to_string();
    Ok((digest, header, lines.map(str::to_string).collect()))
}

fn resumed<T: Real>(ck: &Checkpoint, dir: &Path, source_dir: Option<&Path>, datasets: &[SiteData], stop_after: Option<u64>) -> Result<RunOutcome> {
    let cfg = &ck.config;
    let state = ck.state::<T>()?;
    let mut rows = Vec::new();
    let source = source_dir.map(|d| d.join(METRICS_FILE)).filter(|p| p.exists());
    if let Some(src) = source {
        let (digest, _, all) = read_metrics(&src)?;
        if digest != ck.digest {
            return Err(Error::file(&src, "metrics belong to a different config"));
        }
        rows = all
            .into_iter()
            .filter(|r| r.split(',').next().and_then(|v| v.parse::<u64>().ok()).is_some_and(|v| v <= ck.round))
            .collect();
    }
    let log = MetricsLog {
        path: dir.join(METRICS_FILE),
        head: format!("# config {}\n{}\n", ck.digest, metrics_header(cfg.classes)),
        rows,
    };
    drive(cfg, dir, datasets, state, log, stop_after)
}

/// Continues the run stored in `ckpt`. Artifacts go to `out_dir`, or to the
/// checkpoint's own directory; earlier metric rows are carried over.
pub fn resume(ckpt: &Path, out_dir: Option<&Path>, stop_after: Option<u64>) -> Result<RunOutcome> {
    let mut ck = Checkpoint::read(ckpt)?;
    let source_dir = ckpt.parent().map(Path::to_path_buf);
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => source_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    ck.config.output_dir = dir.clone();
    let cfg = ck.config.clone();
    let datasets = load_datasets(&cfg)?;
    prepare_dir(&cfg, &dir)?;
    match ck.dtype {
        Dtype::F32 => resumed::<f32>(&ck, &dir, source_dir.as_deref(), &datasets, stop_after),
        Dtype::F64 => resumed::<f64>(&ck, &dir, source_dir.as_deref(), &datasets, stop_after),
    }
}
