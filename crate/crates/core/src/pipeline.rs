//! End-to-end run: load or generate data, optionally select covariates, fit,
//! forecast, bootstrap every scenario and write the reports.
//!
//! Every artifact is first written as `<name>.partial` and renamed only after
//! the whole run has succeeded, so a failed run leaves its partial output
//! behind under the suffixed names. `manifest.jsonl` records the resolved
//! configuration, its hash and the SHA-256 of every artifact; feeding it back
//! to [`replay`] reproduces the run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accuracy::{
    aggregate, compare_to_reference, plot_rows, write_comparison_csv, write_plot_csv, AccuracyReport, Thresholds,
};
use crate::bootstrap::{run_scenarios, BootstrapPlan, ErrorPanel};
use crate::dataio::{
    generate_synthetic, ingest, select_variables, tag_subpopulations, DesignSpec, IngestReport, RawDataset,
    SelectionOptions, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::lmm::{fit_reml, FitOptions, FittedModel};
use crate::measures::{MeasureKind, QuantileMethod};
use crate::panel::Domain;
use crate::predictor::{build_future_frame, plug_in_cells, CovariatePolicy, FutureFrame};
use crate::scenarios::{builtin, parse_scenario, ShockScenario, BUILTIN_NAMES};

pub const REFERENCE_SCENARIO: &str = "s0";
pub const MANIFEST: &str = "manifest.jsonl";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        binary: Vec<String>,
    },
    Synthetic {
        seed: u64,
        #[serde(default)]
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    /// Run covariate selection; otherwise every covariate enters the design.
    pub selection: Option<SelectionOptions>,
    /// Built-in scenario names or paths to scenario TOML files.
    pub scenarios: Vec<String>,
    pub iterations: usize,
    pub seed: u64,
    pub measures: Vec<MeasureKind>,
    pub domains: Vec<Domain>,
    pub qape_orders: Vec<f64>,
    pub quantile_method: QuantileMethod,
    pub refit: bool,
    pub fit_options: FitOptions,
    pub max_failure_rate: f64,
    pub thresholds: Thresholds,
    /// Design columns held at the latest observed record.
    pub frozen: Vec<String>,
    /// Design columns with known future values, one per region.
    pub lagged: BTreeMap<String, Vec<f64>>,
    /// With synthetic data, use the generated next-year region covariates as lagged values.
    pub use_generated_lagged: bool,
    pub out_dir: PathBuf,
    /// Worker threads; `None` uses the rayon default. Never affects results.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = BootstrapPlan::default();
        Self {
            data: DataSource::Synthetic { seed: 1, spec: SyntheticSpec::default() },
            selection: None,
            scenarios: BUILTIN_NAMES.iter().map(|s| s.to_string()).collect(),
            iterations: plan.iterations,
            seed: plan.seed,
            measures: plan.measures,
            domains: plan.domains,
            qape_orders: plan.qape_orders,
            quantile_method: plan.quantile_method,
            refit: plan.refit,
            fit_options: plan.fit_options,
            max_failure_rate: plan.max_failure_rate,
            thresholds: Thresholds::default(),
            frozen: Vec::new(),
            lagged: BTreeMap::new(),
            use_generated_lagged: true,
            out_dir: PathBuf::from("out"),
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn plan(&self) -> BootstrapPlan {
        BootstrapPlan {
            iterations: self.iterations,
            seed: self.seed,
            measures: self.measures.clone(),
            domains: self.domains.clone(),
            qape_orders: self.qape_orders.clone(),
            quantile_method: self.quantile_method,
            refit: self.refit,
            fit_options: self.fit_options,
            couple_region_effects: true,
            max_failure_rate: self.max_failure_rate,
        }
    }

    /// SHA-256 of the settings that determine results; output directory and
    /// worker count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.workers = None;
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Resolve every scenario, putting the reference first.
    pub fn resolve_scenarios(&self) -> Result<Vec<ShockScenario>> {
        let mut out: Vec<ShockScenario> = Vec::new();
        for name in &self.scenarios {
            let s = match builtin(name) {
                Some(s) => s,
                None => {
                    let text = fs::read_to_string(name)
                        .map_err(|e| Error::Scenario(format!("`{name}` is neither a built-in nor a readable file: {e}")))?;
                    parse_scenario(&text)?
                }
            };
            if out.iter().any(|o| o.name == s.name) {
                return Err(Error::Scenario(format!("scenario `{}` listed twice", s.name)));
            }
            out.push(s);
        }
        if !out.iter().any(|s| s.name == REFERENCE_SCENARIO) {
            out.insert(0, ShockScenario::shock_free(REFERENCE_SCENARIO));
        }
        Ok(out)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Select,
    Fit,
    Forecast,
    Bootstrap,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestEntry {
    Run { seed: u64, config_sha256: String, crate_version: String, format_version: u32 },
    Config { config: RunConfig },
    Ingest { report: IngestReport },
    Artifact(ArtifactRecord),
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<ArtifactRecord>,
    pub model: FittedModel,
    pub report: AccuracyReport,
    pub failed_iterations: usize,
}

/// Writes `.partial` files and tracks them for the final rename.
struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<ArtifactRecord>,
}

impl ArtifactWriter {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        body(&mut buf)?;
        fs::write(self.dir.join(format!("{name}.partial")), &buf)?;
        self.written.push(ArtifactRecord { name: name.to_string(), sha256: hex(&Sha256::digest(&buf)), bytes: buf.len() as u64 });
        Ok(())
    }

    fn commit(self) -> Result<Vec<ArtifactRecord>> {
        for a in &self.written {
            fs::rename(self.dir.join(format!("{}.partial", a.name)), self.dir.join(&a.name))?;
        }
        Ok(self.written)
    }
}

/// The data as the model sees it, with the policy for the future period.
pub struct Prepared {
    pub dataset: RawDataset,
    pub ingest: Option<IngestReport>,
    pub spec: DesignSpec,
    pub selection: Option<crate::dataio::SelectionTrace>,
    pub policy_lagged: BTreeMap<String, Vec<f64>>,
}

fn load(cfg: &RunConfig) -> Result<(RawDataset, Option<IngestReport>, BTreeMap<String, Vec<f64>>)> {
    match &cfg.data {
        DataSource::Csv { path, binary } => {
            let (ds, report) = ingest(File::open(path)?, binary)?;
            if ds.is_empty() {
                return Err(Error::Data(format!("no valid records in {}", path.display())));
            }
            Ok((ds, Some(report), BTreeMap::new()))
        }
        DataSource::Synthetic { seed, spec } => {
            let data = generate_synthetic(spec, *seed)?;
            let lagged = if cfg.use_generated_lagged { data.future_lagged } else { BTreeMap::new() };
            Ok((data.dataset, None, lagged))
        }
    }
}

fn policy(cfg: &RunConfig, names: &[String], generated: &BTreeMap<String, Vec<f64>>) -> CovariatePolicy {
    let mut p = CovariatePolicy::replicate_all(names);
    for (name, values) in generated {
        if names.contains(name) && !cfg.lagged.contains_key(name) {
            p = p.with_lagged(name, values.clone());
        }
    }
    for (name, values) in &cfg.lagged {
        p = p.with_lagged(name, values.clone());
    }
    for name in &cfg.frozen {
        p = p.with_frozen(name);
    }
    p
}

/// Load, select, fit and build the future frame.
pub fn prepare(cfg: &RunConfig) -> std::result::Result<(Prepared, FittedModel, crate::panel::TransactionPanel, FutureFrame), PipelineError> {
    let (dataset, ingest, generated) = load(cfg).at(Stage::Load)?;
    let (spec, selection) = match &cfg.selection {
        Some(opts) => {
            let trace = select_variables(&dataset, opts).at(Stage::Select)?;
            (trace.spec.clone(), Some(trace))
        }
        None => (DesignSpec::full(&dataset), None),
    };
    let panel = tag_subpopulations(&dataset, &spec).at(Stage::Load)?;
    let model = fit_reml(&panel, &cfg.fit_options).at(Stage::Fit)?;
    let pol = policy(cfg, panel.design.names(), &generated);
    let frame = build_future_frame(&panel, &pol).at(Stage::Forecast)?;
    Ok((Prepared { dataset, ingest, spec, selection, policy_lagged: pol.lagged_known }, model, panel, frame))
}

fn json_artifact<T: Serialize>(value: &T) -> impl FnOnce(&mut dyn Write) -> Result<()> + '_ {
    move |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Forecast table rows: measure, domain, plug-in value.
pub fn write_forecasts<W: Write>(
    cells: &[Vec<Option<f64>>],
    measures: &[MeasureKind],
    domains: &[Domain],
    frame: &FutureFrame,
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["measure", "domain", "domain_size", "theta_hat"])?;
    for (m, kind) in measures.iter().enumerate() {
        for (d, dom) in domains.iter().enumerate() {
            out.write_record([
                kind.name().to_string(),
                dom.label(),
                frame.domain_size(dom).to_string(),
                cells[m][d].map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Plot files for RMSE and each QAPE order, as `(file name, csv bytes)`.
pub fn emit_plot_data(report: &AccuracyReport) -> Result<Vec<(String, Vec<u8>)>> {
    if report.cells.is_empty() {
        return Err(Error::InvalidArgument("empty accuracy report".into()));
    }
    report
        .statistics()
        .into_iter()
        .map(|stat| {
            let mut buf = Vec::new();
            write_plot_csv(&plot_rows(report, stat), &mut buf)?;
            Ok((format!("plot_{}.csv", stat.label()), buf))
        })
        .collect()
}

fn write_reports(art: &mut ArtifactWriter, panels: &[ErrorPanel], cfg: &RunConfig) -> Result<AccuracyReport> {
    let report = aggregate(panels, &cfg.qape_orders, REFERENCE_SCENARIO)?;
    art.write("accuracy.csv", |w| report.write_csv(w))?;
    let rows = compare_to_reference(&report, &cfg.thresholds);
    art.write("comparison.csv", |w| write_comparison_csv(&rows, w))?;
    for (name, bytes) in emit_plot_data(&report)? {
        art.write(&name, |w| Ok(w.write_all(&bytes)?))?;
    }
    Ok(report)
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::Config("workers must be positive".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Run every stage and write all artifacts into `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<RunSummary, PipelineError> {
    let scenarios = cfg.resolve_scenarios().at(Stage::Config)?;
    cfg.plan().validate().at(Stage::Config)?;
    cfg.thresholds_valid().at(Stage::Config)?;
    let mut art = ArtifactWriter::new(&cfg.out_dir).at(Stage::Config)?;

    let inner = || -> std::result::Result<_, PipelineError> {
        let (prep, model, panel, frame) = prepare(cfg)?;
        if let Some(trace) = &prep.selection {
            art.write("selection.json", json_artifact(trace)).at(Stage::Select)?;
        }
        art.write("model.json", json_artifact(&model)).at(Stage::Fit)?;
        let cells = plug_in_cells(&model, &frame, &cfg.measures, &cfg.domains, cfg.quantile_method).at(Stage::Forecast)?;
        art.write("forecasts.csv", |w| write_forecasts(&cells, &cfg.measures, &cfg.domains, &frame, w))
            .at(Stage::Forecast)?;

        let panels = run_scenarios(&cfg.plan(), &model, &panel, &frame, &scenarios).at(Stage::Bootstrap)?;
        for p in &panels {
            art.write(&format!("errors_{}.csv", p.scenario), |w| p.write_csv(w)).at(Stage::Bootstrap)?;
        }
        let report = write_reports(&mut art, &panels, cfg).at(Stage::Report)?;
        let failed = panels.first().map(|p| p.failed()).unwrap_or(0);
        Ok((prep, model, report, failed))
    };
    let (prep, model, report, failed) = with_pool(cfg.workers, inner).at(Stage::Config)??;

    let mut artifacts = art.commit().at(Stage::Report)?;
    let mut manifest = vec![
        ManifestEntry::Run {
            seed: cfg.seed,
            config_sha256: cfg.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: FORMAT_VERSION,
        },
        ManifestEntry::Config { config: cfg.clone() },
    ];
    if let Some(report) = prep.ingest {
        manifest.push(ManifestEntry::Ingest { report });
    }
    manifest.extend(artifacts.iter().cloned().map(ManifestEntry::Artifact));
    write_manifest(&cfg.out_dir.join(MANIFEST), &manifest).at(Stage::Report)?;
    artifacts.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), artifacts, model, report, failed_iterations: failed })
}

impl RunConfig {
    fn thresholds_valid(&self) -> Result<()> {
        let t = &self.thresholds;
        if !(t.moderate > 1.0 && t.high >= t.moderate) {
            return Err(Error::Config("thresholds need 1 < moderate <= high".into()));
        }
        Ok(())
    }
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Config(format!("bad manifest line: {e}")))?);
    }
    Ok(out)
}

/// Outcome of re-running a manifest.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub summary: RunSummary,
    /// Artifacts whose hash differs from the manifest, or that are missing.
    pub mismatched: Vec<String>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-run the configuration stored in a manifest into `out_dir`, optionally
/// with a different worker count, and compare artifact hashes.
pub fn replay(manifest: &Path, out_dir: &Path, workers: Option<usize>) -> std::result::Result<ReplayOutcome, PipelineError> {
    let entries = read_manifest(manifest).at(Stage::Config)?;
    let mut cfg = entries
        .iter()
        .find_map(|e| match e {
            ManifestEntry::Config { config } => Some(config.clone()),
            _ => None,
        })
        .ok_or_else(|| Error::Config("manifest has no config entry".into()))
        .at(Stage::Config)?;
    let expected_hash = entries.iter().find_map(|e| match e {
        ManifestEntry::Run { config_sha256, .. } => Some(config_sha256.clone()),
        _ => None,
    });
    if expected_hash.as_deref() != Some(cfg.hash().as_str()) {
        return Err(PipelineError { stage: Stage::Config, source: Error::Config("manifest config hash mismatch".into()) });
    }
    cfg.out_dir = out_dir.to_path_buf();
    cfg.workers = workers;
    let summary = run_pipeline(&cfg)?;
    let got: BTreeMap<&str, &str> = summary.artifacts.iter().map(|a| (a.name.as_str(), a.sha256.as_str())).collect();
    let mut mismatched = Vec::new();
    for e in &entries {
        if let ManifestEntry::Artifact(a) = e {
            if got.get(a.name.as_str()) != Some(&a.sha256.as_str()) {
                mismatched.push(a.name.clone());
            }
        }
    }
    Ok(ReplayOutcome { summary, mismatched })
}

/// Rebuild the report artifacts from the error panels already in `out_dir`.
pub fn rebuild_reports(cfg: &RunConfig) -> std::result::Result<AccuracyReport, PipelineError> {
    let scenarios = cfg.resolve_scenarios().at(Stage::Config)?;
    let mut panels = Vec::new();
    for s in &scenarios {
        let path = cfg.out_dir.join(format!("errors_{}.csv", s.name));
        let f = File::open(&path).map_err(Error::from).at(Stage::Report)?;
        panels.push(ErrorPanel::read_csv(&s.name, f).at(Stage::Report)?);
    }
    let mut art = ArtifactWriter::new(&cfg.out_dir).at(Stage::Report)?;
    let report = write_reports(&mut art, &panels, cfg).at(Stage::Report)?;
    art.commit().at(Stage::Report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig { iterations: 10, ..Default::default() };
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_config_key_rejected() {
        assert!(RunConfig::from_toml("iterationz = 3").is_err());
    }

    #[test]
    fn hash_ignores_workers_and_out_dir() {
        let a = RunConfig::default();
        let b = RunConfig { workers: Some(3), out_dir: "elsewhere".into(), ..Default::default() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 9, ..Default::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn reference_added_when_missing() {
        let cfg = RunConfig { scenarios: vec!["s1".into()], ..Default::default() };
        let names: Vec<String> = cfg.resolve_scenarios().unwrap().into_iter().map(|s| s.name).collect();
        assert_eq!(names, vec!["s0", "s1"]);
        let bad = RunConfig { scenarios: vec!["nope.toml".into()], ..Default::default() };
        assert!(matches!(bad.resolve_scenarios(), Err(Error::Scenario(_))));
    }
}
