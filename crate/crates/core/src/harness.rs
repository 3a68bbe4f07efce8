//! Experiment configuration, runs and sweeps, and the files they leave behind.
//!
//! A run is a pure function of its [`ExperimentConfig`]: data files are
//! written to temporary names and renamed into place, and `manifest.json`
//! (with a SHA-256 of every file) is written last. A directory without a
//! manifest belongs to an interrupted or failed run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::clusters::{label_clusters, max_cluster};
use crate::error::{Error, Result};
use crate::extremes::{
    bc_discrepancy, gumbel_compare_sub, gumbel_compare_sup, replica_field, run_extremes, BcMode,
    ExtremeSample, GumbelComparison,
};
use crate::hitting::{
    event_prob, exponential_law_test, lambda_estimate, run_hitting, EventSpec, Rule,
    DEFAULT_SIZE_CAP,
};
use crate::lattice::{site_count, Boundary, BoxGeometry};
use crate::oracles::{enumerate_box, longest_run_law, stat_max_cluster, stat_occupied, ENUMERATION_CAP};
use crate::sampler::{child_seed, Model};
use crate::stats::median_u64;
use crate::tails::{
    box_volume, compute_vn, estimate_eta_delta, estimate_zeta, local_centering,
    sample_origin_clusters,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MAXCLUST_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Sample,
    Extremes,
    Tails,
    Hitting,
    BcCompare,
    Oracle,
    Sweep,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Sample => "sample",
            Kind::Extremes => "extremes",
            Kind::Tails => "tails",
            Kind::Hitting => "hitting",
            Kind::BcCompare => "bc-compare",
            Kind::Oracle => "oracle",
            Kind::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Subcritical,
    Supercritical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtremesParams {
    /// Origin-cluster samples for the Gumbel comparison; 0 skips it.
    pub tail_samples: u64,
    pub tail_cap: u64,
    pub phase: Phase,
    /// Local fit window `[u_n - below, u_n + above]` (subcritical).
    pub fit_below: u64,
    pub fit_above: u64,
}

impl Default for ExtremesParams {
    fn default() -> Self {
        ExtremesParams {
            tail_samples: 0,
            tail_cap: 2000,
            phase: Phase::Subcritical,
            fit_below: 20,
            fit_above: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcParams {
    /// Ambient margin `m` of `B_{n+m}` for the free boundary; `n` when unset.
    pub margin: Option<usize>,
    /// Compare finite-cluster maxima (supercritical reading).
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailsParams {
    pub samples: u64,
    pub cap: u64,
    pub phase: Phase,
    pub window: Option<(u64, u64)>,
    pub fixed_delta: Option<f64>,
}

impl Default for TailsParams {
    fn default() -> Self {
        TailsParams {
            samples: 1_000_000,
            cap: 2000,
            phase: Phase::Subcritical,
            window: None,
            fixed_delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HittingParams {
    pub m: u64,
    pub theta: Option<f64>,
    pub finite_only: bool,
    pub size_cap: u64,
    pub rule: Rule,
    /// Scan radius; by default large enough that about 0.5% of records
    /// are censored.
    pub k_max: Option<u64>,
    pub gamma: f64,
    /// Origin samples for estimating `P(E)`.
    pub prob_samples: u64,
}

impl Default for HittingParams {
    fn default() -> Self {
        HittingParams {
            m: 10,
            theta: None,
            finite_only: false,
            size_cap: DEFAULT_SIZE_CAP,
            rule: Rule::Ambient,
            k_max: None,
            gamma: 0.5,
            prob_samples: 1_000_000,
        }
    }
}

impl HittingParams {
    pub fn event(&self) -> Result<EventSpec> {
        let mut ev = EventSpec::new(self.m)?.with_size_cap(self.size_cap)?;
        if let Some(t) = self.theta {
            ev = ev.localized(t)?;
        }
        if self.finite_only {
            ev = ev.finite();
        }
        Ok(ev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    MaxCluster,
    Occupied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub statistic: Statistic,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            statistic: Statistic::MaxCluster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Radius,
    P,
    M,
    Replicas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepParams {
    /// Experiment run at every grid point.
    pub kind: Kind,
    pub axis: Axis,
    pub values: Vec<f64>,
}

fn default_dim() -> usize {
    2
}
fn default_radius() -> usize {
    32
}
fn default_model() -> Model {
    Model::bernoulli(0.35).expect("valid default")
}
fn default_replicas() -> u64 {
    100
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Box radius `n` of `B_n`.
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_model")]
    pub model: Model,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    #[serde(default)]
    pub master_seed: u64,
    /// Output directory; excluded from the config digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub extremes: ExtremesParams,
    #[serde(default)]
    pub bc: BcParams,
    #[serde(default)]
    pub tails: TailsParams,
    #[serde(default)]
    pub hitting: HittingParams,
    #[serde(default)]
    pub oracle: OracleParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepParams>,
}

impl ExperimentConfig {
    /// Defaults for `kind`.
    pub fn new(kind: Kind) -> Self {
        ExperimentConfig {
            kind,
            dim: default_dim(),
            radius: default_radius(),
            model: default_model(),
            replicas: default_replicas(),
            master_seed: 0,
            out: None,
            extremes: ExtremesParams::default(),
            bc: BcParams::default(),
            tails: TailsParams::default(),
            hitting: HittingParams::default(),
            oracle: OracleParams::default(),
            sweep: None,
        }
    }

    /// Parses TOML. A missing `kind` is taken from `default_kind`. Errors
    /// name the offending key.
    pub fn from_toml(text: &str, default_kind: Option<Kind>) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| Error::config("<document>", e.message().to_string()))?;
        if let (Some(k), Some(t)) = (default_kind, value.as_table_mut()) {
            t.entry("kind")
                .or_insert_with(|| toml::Value::String(k.as_str().into()));
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_kind: Option<Kind>) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, default_kind)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every parameter the chosen kind uses.
    pub fn validate(&self) -> Result<()> {
        let at = |prefix: &str| {
            let prefix = prefix.to_string();
            move |e: Error| match e {
                Error::Parameter { name, reason } => Error::config(format!("{prefix}{name}"), reason),
                Error::Config { .. } => e,
                other => Error::config(prefix.trim_end_matches('.').to_string(), other.to_string()),
            }
        };
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        site_count(self.dim, self.radius).map_err(at("radius"))?;
        if self.replicas == 0 {
            return Err(Error::config("replicas", "must be at least 1"));
        }
        self.model.validate(self.dim).map_err(at("model."))?;
        let needs_p = matches!(self.kind, Kind::Tails | Kind::Hitting | Kind::Oracle)
            || (self.kind == Kind::Extremes && self.extremes.tail_samples > 0);
        if needs_p && !matches!(self.model, Model::Bernoulli(_)) {
            return Err(Error::config("model.model", "this experiment needs a Bernoulli model"));
        }
        match self.kind {
            Kind::Extremes => {
                let e = &self.extremes;
                if e.tail_samples > 0 && e.tail_cap == 0 {
                    return Err(Error::config("extremes.tail_cap", "must be at least 1"));
                }
                if e.phase == Phase::Supercritical && self.dim < 2 {
                    return Err(Error::config("extremes.phase", "supercritical needs dim >= 2"));
                }
            }
            Kind::BcCompare => {
                if self.bc.margin == Some(0) {
                    return Err(Error::config("bc.margin", "must be at least 1"));
                }
                site_count(self.dim, self.radius + self.bc_margin()).map_err(at("bc.margin"))?;
            }
            Kind::Tails => {
                let t = &self.tails;
                if t.samples == 0 {
                    return Err(Error::config("tails.samples", "must be at least 1"));
                }
                if t.cap == 0 {
                    return Err(Error::config("tails.cap", "must be at least 1"));
                }
                if let Some((lo, hi)) = t.window {
                    if lo >= hi {
                        return Err(Error::config("tails.window", "needs lo < hi"));
                    }
                }
                if let Some(d) = t.fixed_delta {
                    if !(d > 0.0 && d <= 1.0) {
                        return Err(Error::config("tails.fixed_delta", "must lie in (0, 1]"));
                    }
                }
            }
            Kind::Hitting => {
                let h = &self.hitting;
                h.event().map_err(at("hitting."))?;
                if !(h.gamma > 0.0 && h.gamma < 1.0) {
                    return Err(Error::config("hitting.gamma", "must lie in (0, 1)"));
                }
                if h.prob_samples == 0 {
                    return Err(Error::config("hitting.prob_samples", "must be at least 1"));
                }
                if let Some(k) = h.k_max {
                    site_count(self.dim, k as usize).map_err(at("hitting.k_max"))?;
                }
            }
            Kind::Oracle => {
                let sites = site_count(self.dim, self.radius).map_err(at("radius"))?;
                if self.dim > 1 && sites > ENUMERATION_CAP {
                    return Err(Error::config(
                        "radius",
                        format!("{sites} sites exceed the enumeration cap {ENUMERATION_CAP}"),
                    ));
                }
            }
            Kind::Sample => {}
            Kind::Sweep => {
                let s = self
                    .sweep
                    .as_ref()
                    .ok_or_else(|| Error::config("sweep", "missing [sweep] table"))?;
                if s.kind == Kind::Sweep {
                    return Err(Error::config("sweep.kind", "sweeps do not nest"));
                }
                if s.values.is_empty() {
                    return Err(Error::config("sweep.values", "empty axis"));
                }
                for (i, &v) in s.values.iter().enumerate() {
                    let ok = match s.axis {
                        Axis::P => (0.0..=1.0).contains(&v),
                        _ => v >= 0.0 && v.fract() == 0.0,
                    };
                    if !ok {
                        return Err(Error::config(format!("sweep.values[{i}]"), format!("{v} is not valid for this axis")));
                    }
                }
                for i in 0..s.values.len() {
                    self.sweep_point(i)?.validate().map_err(|e| match e {
                        Error::Config { key, reason } => {
                            Error::config(format!("sweep.values[{i}] ({key})"), reason)
                        }
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Config of grid point `i` of a sweep.
    pub fn sweep_point(&self, i: usize) -> Result<ExperimentConfig> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::config("sweep", "missing [sweep] table"))?;
        let v = *s
            .values
            .get(i)
            .ok_or_else(|| Error::config("sweep.values", format!("no grid point {i}")))?;
        let mut c = self.clone();
        c.kind = s.kind;
        c.sweep = None;
        c.out = None;
        match s.axis {
            Axis::Radius => c.radius = v as usize,
            Axis::M => c.hitting.m = v as u64,
            Axis::Replicas => c.replicas = v as u64,
            Axis::P => match &mut c.model {
                Model::Bernoulli(b) => b.p = v,
                Model::Markov(_) => {
                    return Err(Error::config("sweep.axis", "p sweeps need a Bernoulli model"))
                }
            },
        }
        Ok(c)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Output directory: the configured one, else `$MAXCLUST_OUT` (or
    /// `runs`) joined with `<kind>-<digest prefix>`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(o) = &self.out {
            return o.clone();
        }
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("{}-{}", self.kind.as_str(), &self.digest()[..12]))
    }

    /// Free-boundary margin in effect.
    pub fn bc_margin(&self) -> usize {
        self.bc.margin.unwrap_or(self.radius.max(1))
    }

    fn p(&self) -> f64 {
        self.model.p().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory.
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: Kind,
    pub config_digest: String,
    pub artifact_version: String,
    pub started: String,
    pub finished: String,
    pub files: Vec<FileEntry>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(FileEntry {
        name: name.to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
        bytes: bytes.len() as u64,
    })
}

/// One-row summary of a run, merged across sweep points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub columns: Vec<(String, String)>,
}

impl Summary {
    fn push(&mut self, key: &str, value: impl ToString) {
        self.columns.push((key.to_string(), value.to_string()));
    }

    fn opt(&mut self, key: &str, value: Option<impl ToString>) {
        self.push(key, value.map_or_else(String::new, |v| v.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.columns
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_csv(&self) -> String {
        let head: Vec<&str> = self.columns.iter().map(|(k, _)| k.as_str()).collect();
        let row: Vec<String> = self.columns.iter().map(|(_, v)| csv_field(v)).collect();
        format!("{}\n{}\n", head.join(","), row.join(","))
    }
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// Output of one run: the manifest and its summary row.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub summary: Summary,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<FileEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.files.push(write_atomic(self.dir, name, bytes)?);
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
        let mut out = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut out, &r)?;
            out.push(b'\n');
        }
        self.put(name, &out)
    }

    fn with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut out = Vec::new();
        f(&mut out)?;
        self.put(name, &out)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Runs `cfg` into `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    match fs::remove_file(dir.join(MANIFEST)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
        _ => {}
    }
    let started = now();
    let mut w = Writer {
        dir,
        files: Vec::new(),
    };
    let mut summary = Summary::default();
    summary.push("kind", cfg.kind.as_str());
    match cfg.kind {
        Kind::Sample => run_sample(cfg, &mut w, &mut summary)?,
        Kind::Extremes => run_extremes_kind(cfg, &mut w, &mut summary)?,
        Kind::BcCompare => run_bc(cfg, &mut w, &mut summary)?,
        Kind::Tails => run_tails(cfg, &mut w, &mut summary)?,
        Kind::Hitting => run_hitting_kind(cfg, &mut w, &mut summary)?,
        Kind::Oracle => run_oracle(cfg, &mut w, &mut summary)?,
        Kind::Sweep => run_sweep(cfg, &mut w, &mut summary)?,
    }
    if cfg.kind != Kind::Sweep {
        w.put("summary.csv", summary.to_csv().as_bytes())?;
    }
    let manifest = RunManifest {
        kind: cfg.kind,
        config_digest: cfg.digest(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: now(),
        files: w.files,
        config: cfg.clone(),
    };
    write_atomic(dir, MANIFEST, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        manifest,
        summary,
    })
}

fn run_sample(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    use rayon::prelude::*;
    let rows = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let f = replica_field(cfg.dim, cfg.radius, &cfg.model, cfg.master_seed, r)?;
            let census = label_clusters(&f);
            Ok((r, f.occupied_count(), max_cluster(&census), census.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    w.jsonl(
        "records.jsonl",
        rows.iter().map(|&(r, occ, m, c)| {
            json!({"seed": cfg.master_seed, "replica": r, "occupied": occ, "clusters": c, "m_zb": m})
        }),
    )?;
    let f0 = replica_field(cfg.dim, cfg.radius, &cfg.model, cfg.master_seed, 0)?;
    w.with("census_0.csv", |out| label_clusters(&f0).write_csv(out))?;
    let mean_occ = rows.iter().map(|r| r.1 as f64).sum::<f64>() / rows.len() as f64;
    s.push("dim", cfg.dim);
    s.push("n", cfg.radius);
    s.opt("p", cfg.model.p());
    s.push("replicas", cfg.replicas);
    s.push("mean_density", mean_occ / box_volume(cfg.dim, cfg.radius));
    Ok(())
}

fn extreme_rows<'a>(
    cfg: &'a ExperimentConfig,
    e: &'a ExtremeSample,
    bc: &'a str,
) -> impl Iterator<Item = serde_json::Value> + 'a {
    e.records.iter().map(move |r| {
        json!({
            "seed": cfg.master_seed,
            "replica": r.replica,
            "n": cfg.radius,
            "p": cfg.model.p(),
            "bc": bc,
            "m_zb": r.m_zb,
            "m_fb": r.m_fb,
            "m_pb": r.m_pb,
            "m_finite": r.m_finite,
        })
    })
}

fn gumbel_csv(c: &GumbelComparison) -> String {
    let mut out = String::from("x,threshold,empirical,predicted\n");
    for r in &c.table {
        let _ = writeln!(out, "{},{},{},{}", r.x, r.threshold, r.empirical, r.predicted);
    }
    out
}

fn run_extremes_kind(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    let e = run_extremes(cfg.dim, cfg.radius, &cfg.model, cfg.replicas, cfg.master_seed, BcMode::ZeroOnly)?;
    w.jsonl("records.jsonl", extreme_rows(cfg, &e, "zero"))?;
    let zb = e.m_zb();
    s.push("dim", cfg.dim);
    s.push("n", cfg.radius);
    s.opt("p", cfg.model.p());
    s.push("replicas", cfg.replicas);
    s.push("mean_m", zb.iter().sum::<u64>() as f64 / zb.len() as f64);
    s.push("median_m", median_u64(&zb));
    let ep = &cfg.extremes;
    let mut cmp = None;
    if ep.tail_samples > 0 {
        let volume = box_volume(cfg.dim, cfg.radius);
        let origin = sample_origin_clusters(
            cfg.dim,
            cfg.p(),
            ep.tail_samples,
            ep.tail_cap,
            child_seed(cfg.master_seed, "tail"),
        )?;
        let c = match ep.phase {
            Phase::Subcritical => {
                let lc = local_centering(&origin.le, volume, ep.fit_below, ep.fit_above)?;
                gumbel_compare_sub(&zb, lc.u, lc.a, lc.zeta, None)?
            }
            Phase::Supercritical => {
                let est = estimate_eta_delta(&origin.cluster, None, None)?;
                let q = compute_vn(&origin.le.empirical().finite(), volume)?;
                gumbel_compare_sup(&e.m_finite(), q.v, est.rate, cfg.dim, None)?
            }
        };
        w.put("gumbel.csv", gumbel_csv(&c).as_bytes())?;
        cmp = Some(c);
    }
    s.opt("u_n", cmp.as_ref().map(|c| c.u_n));
    s.opt("a_n", cmp.as_ref().map(|c| c.a_n));
    s.opt("rate", cmp.as_ref().map(|c| c.rate));
    s.opt("sup_distance", cmp.as_ref().map(|c| c.sup_distance));
    Ok(())
}

fn run_bc(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    let e = run_extremes(
        cfg.dim,
        cfg.radius,
        &cfg.model,
        cfg.replicas,
        cfg.master_seed,
        BcMode::All {
            margin: cfg.bc_margin(),
        },
    )?;
    w.jsonl("records.jsonl", extreme_rows(cfg, &e, "all"))?;
    let d = bc_discrepancy(cfg.radius, &e.results(), cfg.bc.finite);
    s.push("dim", cfg.dim);
    s.push("n", cfg.radius);
    s.opt("p", cfg.model.p());
    s.push("replicas", cfg.replicas);
    s.push("margin", cfg.bc_margin());
    s.push("finite", cfg.bc.finite);
    s.push("zb_vs_fb", d.zb_vs_fb.fraction);
    s.push("zb_vs_fb_lo", d.zb_vs_fb.ci.0);
    s.push("zb_vs_fb_hi", d.zb_vs_fb.ci.1);
    s.push("zb_vs_pb", d.zb_vs_pb.fraction);
    s.push("zb_vs_pb_lo", d.zb_vs_pb.ci.0);
    s.push("zb_vs_pb_hi", d.zb_vs_pb.ci.1);
    Ok(())
}

fn run_tails(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    let t = &cfg.tails;
    let origin = sample_origin_clusters(cfg.dim, cfg.p(), t.samples, t.cap, cfg.master_seed)?;
    w.with("tail_cluster.csv", |out| origin.cluster.write_csv(out))?;
    w.with("tail_le.csv", |out| origin.le.write_csv(out))?;
    let est = match t.phase {
        Phase::Subcritical => estimate_zeta(&origin.cluster, t.window),
        Phase::Supercritical => estimate_eta_delta(&origin.cluster, t.window, t.fixed_delta),
    };
    s.push("dim", cfg.dim);
    s.opt("p", cfg.model.p());
    s.push("samples", t.samples);
    s.push("censored", origin.cluster.censored_count());
    match est {
        Ok(est) => {
            w.put("estimate.json", &serde_json::to_vec_pretty(&est)?)?;
            s.push("mode", &est.mode);
            s.push("rate", est.rate);
            s.push("stderr_rate", est.stderr_rate);
            s.push("delta", est.delta);
            s.push("stderr_delta", est.stderr_delta);
            s.push("window_lo", est.window.0);
            s.push("window_hi", est.window.1);
        }
        Err(e) => {
            w.put("estimate.json", &serde_json::to_vec_pretty(&json!({"error": e.to_string()}))?)?;
            s.push("mode", "failed");
            s.push("error", e);
        }
    }
    Ok(())
}

/// Scan radius at which `exp(-pE V) = 1/200`.
pub fn default_k_max(dim: usize, pe: f64) -> u64 {
    let v = 200f64.ln() / pe;
    ((v.powf(1.0 / dim as f64) - 1.0) / 2.0).ceil().max(1.0) as u64
}

fn run_hitting_kind(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    let h = &cfg.hitting;
    let ev = h.event()?;
    let pe = event_prob(cfg.dim, cfg.p(), &ev, h.prob_samples, child_seed(cfg.master_seed, "event-prob"))?;
    let k_max = match h.k_max {
        Some(k) => k,
        None if pe.estimate > 0.0 => default_k_max(cfg.dim, pe.estimate),
        None => {
            return Err(Error::Degenerate(
                "no event in the probability sample; set hitting.k_max".into(),
            ))
        }
    };
    let recs = run_hitting(cfg.dim, cfg.p(), &ev, h.rule, k_max, cfg.replicas, cfg.master_seed)?;
    w.jsonl(
        "records.jsonl",
        recs.iter().enumerate().map(|(i, r)| {
            json!({
                "seed": cfg.master_seed,
                "replica": i,
                "m": ev.m,
                "tau": r.tau,
                "censored": r.censored,
                "hit_site": r.hit_site,
            })
        }),
    )?;
    s.push("dim", cfg.dim);
    s.opt("p", cfg.model.p());
    s.push("m", ev.m);
    s.push("pE", pe.estimate);
    s.push("pE_lo", pe.ci.0);
    s.push("pE_hi", pe.ci.1);
    s.push("k_max", k_max);
    let lam = lambda_estimate(&recs, cfg.dim, &pe, h.gamma)?;
    let test = exponential_law_test(&recs, cfg.dim, pe.estimate, lam.lambda)?;
    let mut csv = String::from("volume,t,empirical,predicted\n");
    for r in &test.table {
        let _ = writeln!(csv, "{},{},{},{}", r.volume, r.t, r.empirical, r.predicted);
    }
    w.put("exp_law.csv", csv.as_bytes())?;
    s.push("lambda", lam.lambda);
    s.push("lambda_lo", lam.ci.0);
    s.push("lambda_hi", lam.ci.1);
    s.push("ks", test.ks);
    s.push("censored", test.censored);
    s.push("n_replicas", recs.len());
    Ok(())
}

fn run_oracle(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    let p = cfg.p();
    let law = match (cfg.dim, cfg.oracle.statistic) {
        (1, Statistic::MaxCluster) => longest_run_law((2 * cfg.radius + 1) as u64, p),
        (_, stat) => {
            let g = BoxGeometry::new(cfg.dim, cfg.radius, Boundary::Zero)?;
            match stat {
                Statistic::MaxCluster => enumerate_box(&g, p, stat_max_cluster)?,
                Statistic::Occupied => enumerate_box(&g, p, stat_occupied)?,
            }
        }
    };
    w.with("law.csv", |out| law.write_csv(out))?;
    s.push("dim", cfg.dim);
    s.push("n", cfg.radius);
    s.push("p", p);
    s.push("statistic", match cfg.oracle.statistic {
        Statistic::MaxCluster => "max-cluster",
        Statistic::Occupied => "occupied",
    });
    s.push("median", law.median());
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, w: &mut Writer, s: &mut Summary) -> Result<()> {
    let sw = cfg.sweep.as_ref().expect("validated");
    let axis = serde_json::to_value(sw.axis)?
        .as_str()
        .unwrap_or_default()
        .to_string();
    let mut rows: Vec<(f64, std::result::Result<Summary, String>)> = Vec::new();
    for (i, &v) in sw.values.iter().enumerate() {
        let name = format!("point_{i:03}");
        let sub = w.dir.join(&name);
        let res = cfg
            .sweep_point(i)
            .and_then(|pc| run(&pc, &sub))
            .map_err(|e| e.to_string());
        if let Ok(out) = &res {
            w.files.extend(out.manifest.files.iter().map(|f| FileEntry {
                name: format!("{name}/{}", f.name),
                ..f.clone()
            }));
        }
        rows.push((v, res.map(|o| o.summary)));
    }
    let mut header: Vec<String> = vec![axis.clone(), "status".into(), "error".into()];
    for (_, r) in &rows {
        if let Ok(sm) = r {
            for (k, _) in &sm.columns {
                if !header.contains(k) {
                    header.push(k.clone());
                }
            }
        }
    }
    let mut csv = header.join(",") + "\n";
    for (v, r) in &rows {
        let mut cells = vec![v.to_string()];
        match r {
            Ok(sm) => {
                cells.push("ok".into());
                cells.push(String::new());
                for k in &header[3..] {
                    cells.push(csv_field(sm.get(k).unwrap_or("")));
                }
            }
            Err(e) => {
                cells.push("failed".into());
                cells.push(csv_field(e));
                cells.extend(std::iter::repeat_n(String::new(), header.len() - 3));
            }
        }
        csv += &(cells.join(",") + "\n");
    }
    w.put("summary.csv", csv.as_bytes())?;
    s.push("axis", axis);
    s.push("points", rows.len());
    s.push("failed", rows.iter().filter(|(_, r)| r.is_err()).count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_defaults() {
        let c = ExperimentConfig::from_toml("kind = \"extremes\"\nradius = 8\n", None).unwrap();
        assert_eq!(c.radius, 8);
        assert_eq!(c.dim, 2);
        let back = ExperimentConfig::from_toml(&c.to_toml(), None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        let c2 = ExperimentConfig::from_toml("radius = 8\n", Some(Kind::Extremes)).unwrap();
        assert_eq!(c2, c);
    }

    #[test]
    fn config_errors_name_the_key() {
        let key = |text: &str| match ExperimentConfig::from_toml(text, Some(Kind::Hitting)) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key("[hitting]\nm = 0\n"), "hitting.m");
        assert_eq!(key("[hitting]\nm = \"x\"\n"), "hitting.m");
        assert_eq!(key("[model]\nmodel = \"bernoulli\"\np = 2.0\n"), "model.p");
        assert_eq!(key("replicas = 0\n"), "replicas");
        assert_eq!(key("bogus = 1\n"), "bogus");
        assert_eq!(key("[hitting]\ngamma = 1.5\n"), "hitting.gamma");
        assert!(key("kind = \"sweep\"\n").starts_with("sweep"));
        assert_eq!(key("kind = \"sweep\"\n[sweep]\nkind = \"tails\"\naxis = \"p\"\nvalues = []\n"), "sweep.values");
    }

    #[test]
    fn oracle_run_matches_longest_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(Kind::Oracle);
        c.dim = 1;
        c.radius = 5;
        c.model = Model::bernoulli(0.5).unwrap();
        let out = run(&c, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("law.csv")).unwrap();
        let mut cum = 0.0;
        for line in text.lines().skip(1) {
            let (v, pr) = line.split_once(',').unwrap();
            cum += pr.parse::<f64>().unwrap();
            let exact = crate::oracles::longest_run_cdf(11, 0.5, v.parse().unwrap());
            assert!((cum - exact).abs() < 1e-12);
        }
        assert!(out.manifest.files.iter().any(|f| f.name == "law.csv"));
        assert_eq!(RunManifest::read(dir.path()).unwrap(), out.manifest);
    }

    #[test]
    fn extremes_at_p_zero_are_zero_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(Kind::Extremes);
        c.radius = 4;
        c.replicas = 5;
        c.model = Model::bernoulli(0.0).unwrap();
        let a = run(&c, &dir.path().join("a")).unwrap();
        let text = fs::read_to_string(dir.path().join("a/records.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().all(|l| l.contains("\"m_zb\":0")));
        let b = run(&c, &dir.path().join("b")).unwrap();
        assert_eq!(a.manifest.files, b.manifest.files);
    }

    #[test]
    fn sweep_writes_points_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let text = "kind = \"sweep\"\nreplicas = 4\n[sweep]\nkind = \"extremes\"\naxis = \"radius\"\nvalues = [2, 3, 4]\n";
        let c = ExperimentConfig::from_toml(text, None).unwrap();
        let out = run(&c, dir.path()).unwrap();
        for i in 0..3 {
            assert!(dir.path().join(format!("point_{i:03}/{MANIFEST}")).exists());
        }
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4);
        assert!(summary.starts_with("radius,status,error,kind"));
        assert_eq!(out.summary.get("failed"), Some("0"));
    }

    #[test]
    fn sweep_isolates_failed_points() {
        let dir = tempfile::tempdir().unwrap();
        // At p = 0 the event never occurs and the hitting point fails.
        let text = "kind = \"sweep\"\n[sweep]\nkind = \"hitting\"\naxis = \"p\"\nvalues = [0.0, 0.3]\n[hitting]\nm = 2\nprob_samples = 20000\n";
        let mut c = ExperimentConfig::from_toml(text, None).unwrap();
        c.replicas = 50;
        let out = run(&c, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert!(lines[1].starts_with("0,failed,"), "{summary}");
        assert!(lines[2].starts_with("0.3,ok,"), "{summary}");
        assert_eq!(out.summary.get("failed"), Some("1"));
    }

    #[test]
    fn failed_run_leaves_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(Kind::Hitting);
        c.model = Model::bernoulli(0.0).unwrap();
        c.hitting.prob_samples = 100;
        fs::write(dir.path().join(MANIFEST), "stale").unwrap();
        assert!(run(&c, dir.path()).is_err());
        assert!(!dir.path().join(MANIFEST).exists());
    }
}
