use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use kernflow::io::{self, DatasetManifest, ManifestEntry};
use kernflow::optimize::StopReason;
use kernflow::pipeline::{estimate_flow, Estimate, ResolvedParams, RunConfig, StageTimes};
use kernflow::synth::{self, SceneSpec};
use kernflow::{FlowField, MetricReport, PointCloud};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{BenchmarkArgs, CloudFormat, ConfigArgs, EstimateArgs, ExportVizArgs, SynthArgs};
use crate::{CliError, CliResult};

/// Defaults, then the config file, then flags.
pub fn resolve_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => io::read_json::<RunConfig>(path)
            .map_err(|e| CliError::Usage(anyhow!("reading run config: {e}")))?,
        None => RunConfig::default(),
    };
    args.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn runtime<E: std::fmt::Display>(context: String) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Runtime(anyhow!("{context}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: Option<f64>,
    #[serde(rename = "final")]
    pub last: Option<f64>,
    pub best: Option<f64>,
}

impl LossSummary {
    fn of(est: &Estimate) -> Self {
        let r = &est.trace.records;
        Self {
            initial: r.first().map(|r| r.total),
            last: r.last().map(|r| r.total),
            best: est.trace.best_total(),
        }
    }
}

/// Written by `estimate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub params: ResolvedParams,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub best_iteration: Option<usize>,
    pub loss: LossSummary,
    pub stages: StageTimes,
    pub time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

pub fn estimate(a: &EstimateArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.config)?;
    let source = io::read_points(&a.source).map_err(runtime(format!("reading {}", a.source.display())))?;
    let target = io::read_points(&a.target).map_err(runtime(format!("reading {}", a.target.display())))?;
    let gt = a
        .gt
        .as_ref()
        .map(|p| io::read_flow(p).map_err(runtime(format!("reading {}", p.display()))))
        .transpose()?;

    let est = match estimate_flow(&source, &target, &cfg) {
        Ok(est) => est,
        Err(kernflow::Error::NonFiniteLoss { iteration, trace }) => {
            if let Some(path) = &a.trace {
                write_trace(path, &trace)?;
            }
            return Err(CliError::Runtime(anyhow!("loss became non-finite at iteration {iteration}")));
        }
        Err(e) => return Err(e.into()),
    };
    io::write_flow(&a.out, &est.flow).map_err(runtime(format!("writing {}", a.out.display())))?;
    if let Some(path) = &a.trace {
        write_trace(path, &est.trace)?;
    }
    let metrics = gt
        .map(|g| MetricReport::compute(&est.flow, &g, est.times.total_s))
        .transpose()
        .map_err(runtime("comparing with ground truth".into()))?;

    let record = RunRecord {
        config: cfg,
        params: est.params.clone(),
        iterations: est.trace.records.len(),
        stop_reason: est.trace.stop_reason,
        best_iteration: est.trace.best_iteration,
        loss: LossSummary::of(&est),
        stages: est.times.clone(),
        time_s: est.times.total_s,
        metrics,
    };
    match &a.record {
        Some(path) => io::write_json(path, &record).map_err(runtime(format!("writing {}", path.display())))?,
        None => println!("{}", serde_json::to_string_pretty(&record).expect("record serializes")),
    }
    Ok(())
}

fn write_trace(path: &Path, trace: &kernflow::OptimTrace) -> CliResult<()> {
    let file = fs::File::create(path).map_err(runtime(format!("creating {}", path.display())))?;
    trace
        .write_jsonl(BufWriter::new(file))
        .map_err(runtime(format!("writing {}", path.display())))
}

/// Metrics of one benchmark sample; only the timing without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleMetrics {
    Full(MetricReport),
    TimeOnly { time_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub n_points: usize,
    pub n_support: usize,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub best_loss: Option<f64>,
    pub metrics: SampleMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBlock {
    /// Samples that contributed to the accuracy fields.
    pub samples_with_gt: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epe_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc5_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc10_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub angle_rad: Option<f64>,
    /// Over all samples.
    pub time_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: RunConfig,
    pub samples: Vec<SampleRecord>,
    pub mean: MeanBlock,
    pub warnings: Vec<String>,
}

pub fn mean_block(samples: &[SampleRecord]) -> MeanBlock {
    let full: Vec<MetricReport> = samples
        .iter()
        .filter_map(|s| match &s.metrics {
            SampleMetrics::Full(m) => Some(m.clone()),
            SampleMetrics::TimeOnly { .. } => None,
        })
        .collect();
    let time = |s: &SampleRecord| match &s.metrics {
        SampleMetrics::Full(m) => m.time_seconds,
        SampleMetrics::TimeOnly { time_s } => *time_s,
    };
    let mean = MetricReport::mean(&full);
    MeanBlock {
        samples_with_gt: full.len(),
        epe_m: mean.as_ref().map(|m| m.epe),
        acc5_pct: mean.as_ref().map(|m| m.acc_strict),
        acc10_pct: mean.as_ref().map(|m| m.acc_relaxed),
        angle_rad: mean.as_ref().map(|m| m.angle_error),
        time_s: if samples.is_empty() {
            0.0
        } else {
            samples.iter().map(time).sum::<f64>() / samples.len() as f64
        },
    }
}

fn run_sample(entry: &ManifestEntry, cfg: &RunConfig) -> CliResult<SampleRecord> {
    let ctx = |what: &str, p: &Path| format!("sample {:?}: reading {what} {}", entry.id, p.display());
    let source = io::read_points(&entry.source).map_err(runtime(ctx("source", &entry.source)))?;
    let target = io::read_points(&entry.target).map_err(runtime(ctx("target", &entry.target)))?;
    let gt = entry
        .gt_flow
        .as_ref()
        .map(|p| io::read_flow(p).map_err(runtime(ctx("gt flow", p))))
        .transpose()?;
    let est = estimate_flow(&source, &target, cfg).map_err(|e| match CliError::from(e) {
        CliError::Runtime(e) => CliError::Runtime(e.context(format!("sample {:?}", entry.id))),
        usage => usage,
    })?;
    let time_s = est.times.total_s;
    let metrics = match gt {
        Some(g) => SampleMetrics::Full(
            MetricReport::compute(&est.flow, &g, time_s)
                .map_err(runtime(format!("sample {:?}: comparing with ground truth", entry.id)))?,
        ),
        None => SampleMetrics::TimeOnly { time_s },
    };
    Ok(SampleRecord {
        id: entry.id.clone(),
        n_points: source.len(),
        n_support: est.params.n_support,
        iterations: est.trace.records.len(),
        stop_reason: est.trace.stop_reason,
        best_loss: est.trace.best_total(),
        metrics,
    })
}

pub fn benchmark(a: &BenchmarkArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.config)?;
    let manifest = DatasetManifest::load(&a.manifest).map_err(runtime("loading manifest".into()))?;
    let mut warnings = Vec::new();
    for e in &manifest.entries {
        if e.gt_flow.is_none() {
            let w = format!("sample {:?} has no gt_flow; only time_s is reported", e.id);
            eprintln!("warning: {w}");
            warnings.push(w);
        }
    }
    let results: Vec<CliResult<SampleRecord>> = if a.parallel_samples {
        manifest.entries.par_iter().map(|e| run_sample(e, &cfg)).collect()
    } else {
        manifest.entries.iter().map(|e| run_sample(e, &cfg)).collect()
    };
    let samples = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let report = BenchmarkReport {
        mean: mean_block(&samples),
        config: cfg,
        samples,
        warnings,
    };
    match &a.out {
        Some(path) => io::write_json(path, &report).map_err(runtime(format!("writing {}", path.display())))?,
        None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
    }
    Ok(())
}

fn scene_spec(a: &SynthArgs, seed_offset: u64) -> CliResult<SceneSpec> {
    let base = match &a.spec {
        Some(path) => io::read_json::<SceneSpec>(path).map_err(|e| CliError::Usage(anyhow!("reading scene spec: {e}")))?,
        None => SceneSpec::default(),
    };
    let seed = a.seed.unwrap_or(base.seed) + seed_offset;
    let noise = a.noise.unwrap_or(base.noise_sigma);
    let mut spec = if a.spec.is_none() || a.objects.is_some() {
        let n = a.objects.unwrap_or(base.objects.len());
        SceneSpec {
            objects: SceneSpec::with_random_objects(n, noise, seed).objects,
            ..base
        }
    } else {
        base
    };
    spec.seed = seed;
    spec.noise_sigma = noise;
    if let Some(b) = a.background {
        spec.background_points = b;
    }
    spec.validate()?;
    Ok(spec)
}

fn relative_to(path: &Path, dir: &Path) -> PathBuf {
    match (path.parent(), path.file_name()) {
        (Some(p), Some(name)) if p == dir => PathBuf::from(name),
        _ => fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf()),
    }
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    if a.count == 0 {
        return Err(CliError::Usage(anyhow!("--count must be >= 1")));
    }
    fs::create_dir_all(&a.out).map_err(runtime(format!("creating {}", a.out.display())))?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| a.out.join("manifest.json"));
    let manifest_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries: Vec<ManifestEntry> = if manifest_path.exists() {
        io::read_json(&manifest_path).map_err(runtime("reading existing manifest".into()))?
    } else {
        Vec::new()
    };
    let ext = match a.format {
        CloudFormat::Xyz => "xyz",
        CloudFormat::Pcf => "pcf",
    };
    let flow_ext = match a.format {
        CloudFormat::Xyz => "xyz",
        CloudFormat::Pcf => "flw",
    };

    for i in 0..a.count {
        let spec = scene_spec(a, i as u64)?;
        let scene = synth::generate(&spec)?;
        let id = if a.count == 1 { a.id.clone() } else { format!("{}_{i:03}", a.id) };
        let src = a.out.join(format!("{id}_source.{ext}"));
        let tgt = a.out.join(format!("{id}_target.{ext}"));
        let gt = a.out.join(format!("{id}_gt.{flow_ext}"));
        write_cloud(&src, &scene.source)?;
        write_cloud(&tgt, &scene.target)?;
        write_flow(&gt, &scene.gt_flow)?;
        let entry = ManifestEntry {
            id: id.clone(),
            source: relative_to(&src, &manifest_dir),
            target: relative_to(&tgt, &manifest_dir),
            gt_flow: Some(relative_to(&gt, &manifest_dir)),
        };
        match entries.iter_mut().find(|e| e.id == id) {
            Some(slot) => *slot = entry,
            None => entries.push(entry),
        }
        println!("{id}: {} points -> {}", scene.source.len(), a.out.display());
    }
    DatasetManifest { entries }
        .save(&manifest_path)
        .map_err(runtime(format!("writing {}", manifest_path.display())))
}

fn write_cloud(path: &Path, cloud: &PointCloud) -> CliResult<()> {
    io::write_points(path, cloud).map_err(runtime(format!("writing {}", path.display())))
}

fn write_flow(path: &Path, flow: &FlowField) -> CliResult<()> {
    io::write_flow(path, flow).map_err(runtime(format!("writing {}", path.display())))
}

pub fn export_viz(a: &ExportVizArgs) -> CliResult<()> {
    let cloud = io::read_points(&a.cloud).map_err(runtime(format!("reading {}", a.cloud.display())))?;
    let flow = io::read_flow(&a.flow).map_err(runtime(format!("reading {}", a.flow.display())))?;
    io::export_ply(&cloud, &flow, &a.out).map_err(runtime(format!("writing {}", a.out.display())))
}
