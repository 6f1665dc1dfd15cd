//! Artifact writers. Every artifact carries the resolved [`RunConfig`];
//! CSV and JSONL artifacts carry it in a `<path>.meta.json` sidecar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use multivul_core::evaluate::{percent, FnAnalysis, Metrics, PcaProjection};
use multivul_core::trainer::StepLog;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Metrics as percentages with two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl From<&Metrics> for PercentMetrics {
    fn from(m: &Metrics) -> Self {
        Self {
            accuracy: percent(m.accuracy),
            precision: percent(m.precision),
            recall: percent(m.recall),
            f1: percent(m.f1),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            tn: m.tn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    #[serde(flatten)]
    pub metrics: PercentMetrics,
    pub threshold: f64,
    pub run_config: RunConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

/// Writes to `path`, or to standard output when `path` is `None`.
pub fn emit(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(p, content).map_err(|e| Error::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())
                .and_then(|()| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    emit(path, &to_json(value))
}

#[derive(Serialize)]
struct Sidecar<'a, T: Serialize> {
    #[serde(flatten)]
    extra: T,
    run_config: &'a RunConfig,
}

pub fn write_sidecar<T: Serialize>(path: &Path, extra: T, run: &RunConfig) -> Result<()> {
    write_json(
        Some(&sidecar_path(path)),
        &Sidecar {
            extra,
            run_config: run,
        },
    )
}

pub fn loss_csv(steps: &[StepLog]) -> String {
    let mut s = String::from("step,clip_orig,clip_aug,consistency,classification,total,gamma\n");
    for l in steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.step,
            l.loss.clip_orig,
            l.loss.clip_aug,
            l.loss.consistency,
            l.loss.classification,
            l.loss.total,
            l.gamma
        );
    }
    s
}

pub fn pca_csv(ids: &[String], projection: &PcaProjection) -> String {
    let mut s = String::from("id,pc1,pc2,label\n");
    for ((id, c), label) in ids
        .iter()
        .zip(&projection.coordinates)
        .zip(&projection.labels)
    {
        let _ = writeln!(s, "{},{},{},{}", csv_field(id), c[0], c[1], label);
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennRegion {
    pub region: String,
    /// Methods whose FN set contains the region.
    pub methods: Vec<String>,
    pub count: usize,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweRow {
    pub cwe: String,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnReport {
    pub methods: Vec<String>,
    pub totals: BTreeMap<String, usize>,
    pub regions: Vec<VennRegion>,
    pub per_cwe: Vec<CweRow>,
    pub run_config: RunConfig,
}

impl FnReport {
    pub fn new(fa: &FnAnalysis, run_config: RunConfig) -> Self {
        let m = &fa.methods;
        let r = &fa.regions;
        let region = |name: &str, members: &[usize], ids: &Vec<String>| VennRegion {
            region: name.into(),
            methods: members.iter().map(|&k| m[k].clone()).collect(),
            count: ids.len(),
            ids: ids.clone(),
        };
        Self {
            methods: m.to_vec(),
            totals: m.iter().cloned().zip(fa.totals).collect(),
            regions: vec![
                region("a_only", &[0], &r.a_only),
                region("b_only", &[1], &r.b_only),
                region("c_only", &[2], &r.c_only),
                region("ab_not_c", &[0, 1], &r.ab_not_c),
                region("ac_not_b", &[0, 2], &r.ac_not_b),
                region("bc_not_a", &[1, 2], &r.bc_not_a),
                region("abc", &[0, 1, 2], &r.abc),
            ],
            per_cwe: fa
                .per_cwe
                .iter()
                .map(|(cwe, counts)| CweRow {
                    cwe: cwe.clone(),
                    counts: m.iter().cloned().zip(*counts).collect(),
                })
                .collect(),
            run_config,
        }
    }
}
