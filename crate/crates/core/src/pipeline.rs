//! End-to-end runs: configuration, segmentation, rendering, reports and
//! batch suites.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bn_model::{Labeling, Predicate, PredicateConfig, DEFAULT_T1, DEFAULT_T2};
use crate::class_model::{kmeans_centers, ClassModel, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::evaluation::{
    self, consistency, EvalReport, NIBLACK_K, NIBLACK_WINDOW, SAUVOLA_K, SAUVOLA_R, SAUVOLA_WINDOW,
};
use crate::inference::{
    self, Algorithm, IcmConfig, InferenceTrace, DEFAULT_MAX_SWEEPS, DEFAULT_STOP_FRACTION,
};
use crate::raster::{self, GrayImage, LabelImage, Palette};
use crate::superpixel::{self, SuperpixelMap, DEFAULT_BALANCE, DEFAULT_BANDWIDTH};

pub const DEFAULT_SUPERPIXELS: usize = 200;
pub const DEFAULT_CLASSES: usize = 2;
pub const REPORT_VERSION: u32 = 1;
pub const METRICS_HEADER: [&str; 7] = [
    "image",
    "algorithm",
    "n",
    "k",
    "accuracy",
    "seconds",
    "sweeps",
];

pub const LABELS_FILE: &str = "labels.png";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const IDS_FILE: &str = "superpixels.pgm";
pub const BASELINE_FILE: &str = "baseline.png";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUITE_FILE: &str = "suite.csv";

/// JSON Schema (draft 2020-12) of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/run_report.schema.json");

/// One standard deviation for every class, or one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    PerClass(Vec<f64>),
}

impl Sigma {
    fn for_classes(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            Sigma::Scalar(s) => Ok(vec![*s; k]),
            Sigma::PerClass(v) if v.len() == k => Ok(v.clone()),
            Sigma::PerClass(v) => Err(Error::Configuration(format!(
                "{} per-class sigmas given for {k} classes",
                v.len()
            ))),
        }
    }
}

impl FromStr for Sigma {
    type Err = Error;

    /// `"50"` or a comma-separated list such as `"20,40,20"`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Configuration(format!("invalid sigma {t:?}")))
        };
        if s.contains(',') {
            s.split(',')
                .map(parse)
                .collect::<Result<Vec<_>>>()
                .map(Sigma::PerClass)
        } else {
            parse(s).map(Sigma::Scalar)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Otsu,
    Niblack,
    Sauvola,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Otsu => "otsu",
            Baseline::Niblack => "niblack",
            Baseline::Sauvola => "sauvola",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "otsu" => Ok(Baseline::Otsu),
            "niblack" => Ok(Baseline::Niblack),
            "sauvola" => Ok(Baseline::Sauvola),
            other => Err(Error::Configuration(format!(
                "unknown baseline {other:?} (expected otsu, niblack or sauvola)"
            ))),
        }
    }
}

/// Starting labeling for ICM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Nearest class center per superpixel.
    #[default]
    Threshold,
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Init::Threshold),
            other => Err(Error::Configuration(format!(
                "unknown init {other:?} (expected threshold)"
            ))),
        }
    }
}

/// Comma-separated predicate list; `"none"` or empty disables both.
pub fn parse_predicates(s: &str) -> Result<Vec<Predicate>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',').map(Predicate::from_str).collect()
}

/// Fully resolved parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: PathBuf,
    /// Root under which the per-run directory is created. Left out of the
    /// report and the config hash so a run is reproducible anywhere.
    #[serde(skip)]
    pub out: PathBuf,
    pub superpixels: usize,
    pub classes: usize,
    pub sigma: Sigma,
    pub t1: f64,
    pub t2: f64,
    pub predicates: Vec<Predicate>,
    pub inference: Algorithm,
    pub init: Init,
    pub stop_fraction: f64,
    pub max_sweeps: usize,
    pub seed: u64,
    pub ground_truth: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub balance: f64,
    pub bandwidth: f64,
    /// Report or model JSON whose class model replaces k-means.
    pub pin_model: Option<PathBuf>,
    pub palette: Option<Palette>,
    pub overlay: bool,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            out: out.into(),
            superpixels: DEFAULT_SUPERPIXELS,
            classes: DEFAULT_CLASSES,
            sigma: Sigma::Scalar(DEFAULT_SIGMA),
            t1: DEFAULT_T1,
            t2: DEFAULT_T2,
            predicates: vec![Predicate::P1, Predicate::P2],
            inference: Algorithm::Combined,
            init: Init::Threshold,
            stop_fraction: DEFAULT_STOP_FRACTION,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            seed: 0,
            ground_truth: None,
            baseline: None,
            balance: DEFAULT_BALANCE,
            bandwidth: DEFAULT_BANDWIDTH,
            pin_model: None,
            palette: None,
            overlay: false,
        }
    }

    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(file: Option<&ConfigPatch>, flags: &ConfigPatch) -> Result<Self> {
        let mut merged = ConfigPatch::default();
        if let Some(file) = file {
            merged.apply(file);
        }
        merged.apply(flags);
        let input = merged
            .input
            .clone()
            .ok_or_else(|| Error::Configuration("no input image given".into()))?;
        let mut cfg = RunConfig::new(
            input,
            merged.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        );
        let ConfigPatch {
            input: _,
            out: _,
            superpixels,
            classes,
            sigma,
            t1,
            t2,
            predicates,
            inference,
            init,
            stop_fraction,
            max_sweeps,
            seed,
            ground_truth,
            baseline,
            balance,
            bandwidth,
            pin_model,
            palette,
            overlay,
        } = merged;
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = $field {
                    cfg.$field = v;
                }
            )*};
        }
        take!(
            superpixels,
            classes,
            sigma,
            t1,
            t2,
            predicates,
            inference,
            init,
            stop_fraction,
            max_sweeps,
            seed,
            balance,
            bandwidth,
            overlay
        );
        cfg.ground_truth = ground_truth;
        cfg.baseline = baseline;
        cfg.pin_model = pin_model;
        cfg.palette = palette;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.superpixels == 0 {
            return Err(Error::Parameter(
                "superpixel count must be at least 1".into(),
            ));
        }
        if self.classes == 0 {
            return Err(Error::Parameter("class count must be at least 1".into()));
        }
        match &self.sigma {
            Sigma::Scalar(s) if !(*s > 0.0 && s.is_finite()) => {
                return Err(Error::Parameter(format!("sigma must be positive, got {s}")))
            }
            Sigma::PerClass(v) if v.iter().any(|s| !(*s > 0.0 && s.is_finite())) => {
                return Err(Error::Parameter(format!(
                    "sigmas must be positive, got {v:?}"
                )))
            }
            _ => {}
        }
        if !(self.balance >= 0.0 && self.balance.is_finite()) {
            return Err(Error::Parameter(format!(
                "balance must be >= 0, got {}",
                self.balance
            )));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Parameter(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        self.predicate_config().validate()?;
        self.icm_config().validate()
    }

    pub fn predicate_config(&self) -> PredicateConfig {
        let mut enabled = Vec::new();
        for p in &self.predicates {
            if !enabled.contains(p) {
                enabled.push(*p);
            }
        }
        PredicateConfig {
            t1: self.t1,
            t2: self.t2,
            enabled,
            ..PredicateConfig::default()
        }
    }

    pub fn icm_config(&self) -> IcmConfig {
        IcmConfig {
            stop_fraction: self.stop_fraction,
            max_sweeps: self.max_sweeps,
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<out>/<input stem>-<first 12 hash digits>`.
    pub fn run_dir(&self) -> PathBuf {
        let stem = self
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        self.out.join(format!("{stem}-{}", &self.hash()[..12]))
    }
}

/// Partial config as read from a JSON file or command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub superpixels: Option<usize>,
    pub classes: Option<usize>,
    pub sigma: Option<Sigma>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub predicates: Option<Vec<Predicate>>,
    pub inference: Option<Algorithm>,
    pub init: Option<Init>,
    pub stop_fraction: Option<f64>,
    pub max_sweeps: Option<usize>,
    pub seed: Option<u64>,
    pub ground_truth: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub balance: Option<f64>,
    pub bandwidth: Option<f64>,
    pub pin_model: Option<PathBuf>,
    pub palette: Option<Palette>,
    pub overlay: Option<bool>,
}

impl ConfigPatch {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Configuration(format!("config: {e}")))
    }

    /// Read a JSON config file. Relative paths inside it are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut patch = Self::from_json(&text)
            .map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut patch.input,
            &mut patch.out,
            &mut patch.ground_truth,
            &mut patch.pin_model,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(patch)
    }

    /// Overwrite every field that `other` sets.
    pub fn apply(&mut self, other: &ConfigPatch) {
        macro_rules! over {
            ($($field:ident),*) => {$(
                if other.$field.is_some() {
                    self.$field = other.$field.clone();
                }
            )*};
        }
        over!(
            input,
            out,
            superpixels,
            classes,
            sigma,
            t1,
            t2,
            predicates,
            inference,
            init,
            stop_fraction,
            max_sweeps,
            seed,
            ground_truth,
            baseline,
            balance,
            bandwidth,
            pin_model,
            palette,
            overlay
        );
    }
}

/// The parameters of the segmentation itself, without file handling.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentParams {
    pub superpixels: usize,
    pub classes: usize,
    pub sigma: Sigma,
    pub predicates: PredicateConfig,
    pub inference: Algorithm,
    pub icm: IcmConfig,
    pub seed: u64,
    pub balance: f64,
    pub bandwidth: f64,
    pub pinned_model: Option<ClassModel>,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            superpixels: DEFAULT_SUPERPIXELS,
            classes: DEFAULT_CLASSES,
            sigma: Sigma::Scalar(DEFAULT_SIGMA),
            predicates: PredicateConfig::default(),
            inference: Algorithm::Combined,
            icm: IcmConfig::default(),
            seed: 0,
            balance: DEFAULT_BALANCE,
            bandwidth: DEFAULT_BANDWIDTH,
            pinned_model: None,
        }
    }
}

impl SegmentParams {
    pub fn from_config(cfg: &RunConfig, pinned_model: Option<ClassModel>) -> Self {
        Self {
            superpixels: cfg.superpixels,
            classes: cfg.classes,
            sigma: cfg.sigma.clone(),
            predicates: cfg.predicate_config(),
            inference: cfg.inference,
            icm: cfg.icm_config(),
            seed: cfg.seed,
            balance: cfg.balance,
            bandwidth: cfg.bandwidth,
            pinned_model,
        }
    }
}

/// The pinned model if any, else k-means centers over the superpixel means
/// with the configured sigmas.
pub fn class_model_for(sp: &SuperpixelMap, params: &SegmentParams) -> Result<ClassModel> {
    if let Some(model) = &params.pinned_model {
        return Ok(model.clone());
    }
    let centers = kmeans_centers(&sp.means, params.classes, params.seed)?;
    centers.with_sigmas(params.sigma.for_classes(params.classes)?)
}

pub fn infer_labels(
    sp: &SuperpixelMap,
    model: &ClassModel,
    params: &SegmentParams,
) -> Result<(Labeling, InferenceTrace)> {
    inference::infer(params.inference, sp, model, &params.predicates, &params.icm)
}

/// Pixel label map from superpixel labels.
pub fn label_image(sp: &SuperpixelMap, labeling: &Labeling) -> LabelImage {
    let labels = sp
        .assignment
        .iter()
        .map(|&id| labeling.labels[id] as u16)
        .collect();
    LabelImage::new(sp.width, sp.height, labels).expect("labels are 1-based")
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub superpixels: SuperpixelMap,
    pub model: ClassModel,
    pub labeling: Labeling,
    pub trace: InferenceTrace,
    pub labels: LabelImage,
    pub timing: Timing,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub oversegment_seconds: f64,
    pub cluster_seconds: f64,
    pub inference_seconds: f64,
    pub total_seconds: f64,
}

/// Over-segment, cluster and infer.
pub fn segment(img: &GrayImage, params: &SegmentParams) -> Result<Segmentation> {
    let start = Instant::now();
    let sp = superpixel::oversegment(img, params.superpixels, params.balance, params.bandwidth)?;
    let t_sp = start.elapsed().as_secs_f64();
    let model = class_model_for(&sp, params)?;
    let t_model = start.elapsed().as_secs_f64();
    let (labeling, trace) = infer_labels(&sp, &model, params)?;
    let t_inf = start.elapsed().as_secs_f64();
    let labels = label_image(&sp, &labeling);
    Ok(Segmentation {
        superpixels: sp,
        model,
        labeling,
        trace,
        labels,
        timing: Timing {
            oversegment_seconds: t_sp,
            cluster_seconds: t_model - t_sp,
            inference_seconds: t_inf - t_model,
            total_seconds: t_inf,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelInfo {
    pub requested: usize,
    pub produced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: Baseline,
    /// Global threshold, for Otsu only.
    pub threshold: Option<u8>,
    pub evaluation: Option<EvalReport>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFiles {
    pub labels: String,
    pub overlay: Option<String>,
    pub superpixel_ids: String,
    pub baseline: Option<String>,
    pub report: String,
    pub metrics: String,
}

/// Everything a run records. Fields named `seconds`, `*_seconds` and
/// `timing` are the only ones that vary between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub image: ImageInfo,
    pub superpixels: SuperpixelInfo,
    pub model: ClassModel,
    pub trace: InferenceTrace,
    pub evaluation: Option<EvalReport>,
    pub baseline: Option<BaselineReport>,
    pub outputs: OutputFiles,
    pub timing: Timing,
    #[serde(skip)]
    pub run_dir: PathBuf,
}

impl RunReport {
    pub fn accuracy(&self) -> Option<f64> {
        self.evaluation.as_ref().map(|e| e.accuracy)
    }
}

/// Remove timing content from a serialized report, in place.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !(k == "timing" || k == "seconds" || k.ends_with("_seconds")));
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

/// Class model from a previous report (its `model` key) or a bare model JSON.
pub fn load_pinned_model(path: impl AsRef<Path>) -> Result<ClassModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
    let model = value.get("model").cloned().unwrap_or(value);
    serde_json::from_value(model)
        .map_err(|e| Error::Configuration(format!("{}: invalid class model: {e}", path.display())))
}

fn run_baseline(
    method: Baseline,
    img: &GrayImage,
    truth: Option<&LabelImage>,
) -> Result<(BaselineReport, LabelImage)> {
    let start = Instant::now();
    let (threshold, labels) = match method {
        Baseline::Otsu => {
            let (t, l) = evaluation::otsu(img)?;
            (Some(t), l)
        }
        Baseline::Niblack => (None, evaluation::niblack(img, NIBLACK_WINDOW, NIBLACK_K)?),
        Baseline::Sauvola => (
            None,
            evaluation::sauvola(img, SAUVOLA_WINDOW, SAUVOLA_K, SAUVOLA_R)?,
        ),
    };
    let seconds = start.elapsed().as_secs_f64();
    let evaluation = truth
        .map(|t| {
            consistency(&labels, t).map(|mut e| {
                e.runtime_seconds = seconds;
                e
            })
        })
        .transpose()?;
    Ok((
        BaselineReport {
            method,
            threshold,
            evaluation,
            seconds,
        },
        labels,
    ))
}

fn image_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn metrics_csv(rows: &[[String; 7]]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Format(format!("metrics csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("metrics csv: {e}")))
}

/// Run the full pipeline for one image and write its outputs into
/// [`RunConfig::run_dir`].
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    let img = raster::load_gray(&cfg.input)?;
    let truth = cfg
        .ground_truth
        .as_ref()
        .map(raster::load_label_map)
        .transpose()?;
    let pinned = cfg.pin_model.as_ref().map(load_pinned_model).transpose()?;
    let params = SegmentParams::from_config(cfg, pinned);
    let seg = segment(&img, &params)?;

    let palette = cfg.palette.clone().unwrap_or_default();
    let label_png = raster::render_labels(&seg.labels, &palette)?;
    let evaluation = truth
        .as_ref()
        .map(|t| {
            consistency(&seg.labels, t).map(|mut e| {
                e.runtime_seconds = seg.timing.total_seconds;
                e
            })
        })
        .transpose()?;
    let baseline = cfg
        .baseline
        .map(|b| run_baseline(b, &img, truth.as_ref()))
        .transpose()?;

    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    raster::write_bytes(&dir.join(LABELS_FILE), &label_png)?;
    let ids = raster::encode_id_map_pgm16(img.width(), img.height(), &seg.superpixels.assignment)?;
    raster::write_bytes(&dir.join(IDS_FILE), &ids)?;
    if cfg.overlay {
        let overlay = raster::render_boundaries(&img, &seg.superpixels.assignment)?;
        raster::write_bytes(&dir.join(OVERLAY_FILE), &overlay)?;
    }
    if let Some((_, labels)) = &baseline {
        let png = raster::render_labels(labels, &palette)?;
        raster::write_bytes(&dir.join(BASELINE_FILE), &png)?;
    }

    let name = image_name(&cfg.input);
    let mut rows = vec![[
        name.clone(),
        cfg.inference.name().to_string(),
        seg.superpixels.n.to_string(),
        seg.model.k().to_string(),
        fmt_opt(evaluation.as_ref().map(|e| e.accuracy)),
        seg.timing.total_seconds.to_string(),
        seg.trace.sweeps().to_string(),
    ]];
    if let Some((b, labels)) = &baseline {
        rows.push([
            name,
            b.method.name().to_string(),
            String::new(),
            labels.max_label().to_string(),
            fmt_opt(b.evaluation.as_ref().map(|e| e.accuracy)),
            b.seconds.to_string(),
            "0".to_string(),
        ]);
    }
    raster::write_bytes(&dir.join(METRICS_FILE), &metrics_csv(&rows)?)?;

    let mut timing = seg.timing.clone();
    timing.total_seconds = start.elapsed().as_secs_f64();
    let report = RunReport {
        version: REPORT_VERSION,
        config: serde_json::to_value(cfg).expect("config serializes"),
        config_hash: cfg.hash(),
        image: ImageInfo {
            width: img.width(),
            height: img.height(),
        },
        superpixels: SuperpixelInfo {
            requested: cfg.superpixels,
            produced: seg.superpixels.n,
        },
        model: seg.model,
        trace: seg.trace,
        evaluation,
        baseline: baseline.map(|(b, _)| b),
        outputs: OutputFiles {
            labels: LABELS_FILE.into(),
            overlay: cfg.overlay.then(|| OVERLAY_FILE.into()),
            superpixel_ids: IDS_FILE.into(),
            baseline: cfg.baseline.map(|_| BASELINE_FILE.into()),
            report: REPORT_FILE.into(),
            metrics: METRICS_FILE.into(),
        },
        timing,
        run_dir: dir.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    raster::write_bytes(&dir.join(REPORT_FILE), &json)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub image: String,
    pub algorithm: String,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub accuracy: Option<f64>,
    pub seconds: Option<f64>,
    pub sweeps: Option<f64>,
    /// `ok`, `mean`, or `error: <kind>: <message>`.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub means: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn mean_accuracy(&self, algorithm: Algorithm) -> Option<f64> {
        self.means
            .iter()
            .find(|r| r.algorithm == algorithm.name())
            .and_then(|r| r.accuracy)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }

    /// Metrics CSV with a trailing `status` column.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::Format(format!("suite csv: {e}"));
        let mut header = METRICS_HEADER.to_vec();
        header.push("status");
        w.write_record(&header).map_err(to_err)?;
        for r in self.rows.iter().chain(&self.means) {
            w.write_record([
                r.image.clone(),
                r.algorithm.clone(),
                fmt_opt(r.n),
                fmt_opt(r.k),
                fmt_opt(r.accuracy),
                fmt_opt(r.seconds),
                fmt_opt(r.sweeps),
                r.status.clone(),
            ])
            .map_err(to_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::Format(format!("suite csv: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteOptions {
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
    /// Run every config once per algorithm instead of its own `inference`.
    pub algorithms: Option<Vec<Algorithm>>,
}

/// One run config per image in `dir` (PNG or PGM, sorted by name). A file
/// `<stem>.gt.png` or `<stem>.gt.pgm` next to an image is used as its ground
/// truth and is not itself a suite item.
pub fn configs_from_dir(dir: impl AsRef<Path>, template: &RunConfig) -> Result<Vec<RunConfig>> {
    let dir = dir.as_ref();
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let ext = p
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            matches!(ext.as_deref(), Some("png" | "pgm")) && !stem.ends_with(".gt")
        })
        .collect();
    images.sort();
    Ok(images
        .into_iter()
        .map(|input| {
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("")
                .to_string();
            let ground_truth = ["png", "pgm"]
                .iter()
                .map(|ext| dir.join(format!("{stem}.gt.{ext}")))
                .find(|p| p.is_file())
                .or_else(|| template.ground_truth.clone());
            RunConfig {
                input,
                ground_truth,
                ..template.clone()
            }
        })
        .collect())
}

fn mean_rows(rows: &[SuiteRow]) -> Vec<SuiteRow> {
    let mut groups: BTreeMap<&str, Vec<&SuiteRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        groups.entry(&r.algorithm).or_default().push(r);
    }
    let mean =
        |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    groups
        .into_iter()
        .map(|(alg, rs)| SuiteRow {
            image: "mean".into(),
            algorithm: alg.into(),
            n: None,
            k: None,
            accuracy: mean(rs.iter().filter_map(|r| r.accuracy).collect()),
            seconds: mean(rs.iter().filter_map(|r| r.seconds).collect()),
            sweeps: mean(rs.iter().filter_map(|r| r.sweeps).collect()),
            status: "mean".into(),
        })
        .collect()
}

/// Run every config, in parallel across `opts.workers` threads. Failed runs
/// become error rows; the rest of the suite still runs. The aggregated CSV
/// is written to `out/suite.csv` when `out` is given.
pub fn run_suite(
    configs: &[RunConfig],
    opts: &SuiteOptions,
    out: Option<&Path>,
) -> Result<SuiteReport> {
    use rayon::prelude::*;

    if configs.is_empty() {
        return Err(Error::Configuration("suite has no runs".into()));
    }
    let jobs: Vec<RunConfig> = match &opts.algorithms {
        None => configs.to_vec(),
        Some(algs) => configs
            .iter()
            .flat_map(|c| {
                algs.iter().map(move |&a| RunConfig {
                    inference: a,
                    ..c.clone()
                })
            })
            .collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Configuration(format!("worker pool: {e}")))?;
    let rows: Vec<SuiteRow> = pool.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let image = image_name(&cfg.input);
                let algorithm = cfg.inference.name().to_string();
                match run(cfg) {
                    Ok(r) => SuiteRow {
                        image,
                        algorithm,
                        n: Some(r.superpixels.produced),
                        k: Some(r.model.k()),
                        accuracy: r.accuracy(),
                        seconds: Some(r.timing.total_seconds),
                        sweeps: Some(r.trace.sweeps() as f64),
                        status: "ok".into(),
                    },
                    Err(e) => SuiteRow {
                        image,
                        algorithm,
                        n: None,
                        k: None,
                        accuracy: None,
                        seconds: None,
                        sweeps: None,
                        status: format!("error: {}: {e}", e.kind()),
                    },
                }
            })
            .collect()
    });
    let report = SuiteReport {
        means: mean_rows(&rows),
        rows,
    };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        raster::write_bytes(&out.join(SUITE_FILE), &report.to_csv()?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{synth_image, SynthSpec};

    fn two_region_dir() -> (tempfile::TempDir, PathBuf, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::three_regions(48, 32, [40, 200, 200]);
        let (img, truth) = synth_image(&spec, 5.0, 3).unwrap();
        let input = dir.path().join("two.pgm");
        raster::save_pgm(&img, &input).unwrap();
        let gt = dir.path().join("two.gt.png");
        let levels: Vec<u8> = truth.labels().iter().map(|&l| (l * 100) as u8).collect();
        raster::save_png_gray(&GrayImage::new(48, 32, levels).unwrap(), &gt).unwrap();
        (dir, input, gt)
    }

    #[test]
    fn sigma_parsing() {
        assert_eq!("50".parse::<Sigma>().unwrap(), Sigma::Scalar(50.0));
        assert_eq!(
            "10, 20".parse::<Sigma>().unwrap(),
            Sigma::PerClass(vec![10.0, 20.0])
        );
        assert!("x".parse::<Sigma>().is_err());
        assert_eq!(
            serde_json::from_str::<Sigma>("[1.0,2.0]").unwrap(),
            Sigma::PerClass(vec![1.0, 2.0])
        );
        assert_eq!(Sigma::Scalar(3.0).for_classes(2).unwrap(), vec![3.0, 3.0]);
        assert!(Sigma::PerClass(vec![3.0]).for_classes(2).is_err());
    }

    #[test]
    fn predicate_parsing() {
        assert_eq!(
            parse_predicates("p1,P2").unwrap(),
            vec![Predicate::P1, Predicate::P2]
        );
        assert!(parse_predicates("none").unwrap().is_empty());
        assert!(parse_predicates("p3").is_err());
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::resolve(
            None,
            &ConfigPatch {
                input: Some("a.png".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(cfg.superpixels, 200);
        assert_eq!(cfg.classes, 2);
        assert_eq!(cfg.sigma, Sigma::Scalar(50.0));
        assert_eq!((cfg.t1, cfg.t2), (15.0, 30.0));
        assert_eq!(cfg.inference, Algorithm::Combined);
        assert_eq!(cfg.stop_fraction, 0.10);
        assert_eq!(cfg.max_sweeps, 20);
        assert_eq!(cfg.seed, 0);
        assert_eq!((cfg.balance, cfg.bandwidth), (0.5, 30.0));
    }

    #[test]
    fn precedence() {
        let file = ConfigPatch::from_json(
            r#"{"input":"a.png","superpixels":50,"seed":3,"baseline":"otsu"}"#,
        )
        .unwrap();
        let flags = ConfigPatch {
            superpixels: Some(80),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(Some(&file), &flags).unwrap();
        assert_eq!(cfg.superpixels, 80);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.baseline, Some(Baseline::Otsu));
    }

    #[test]
    fn unknown_key_and_missing_input() {
        assert_eq!(
            ConfigPatch::from_json(r#"{"superpixel":5}"#)
                .unwrap_err()
                .kind(),
            "configuration"
        );
        assert_eq!(
            RunConfig::resolve(None, &ConfigPatch::default())
                .unwrap_err()
                .kind(),
            "configuration"
        );
    }

    #[test]
    fn hash_ignores_output_root() {
        let a = RunConfig::new("x/img.png", "out1");
        let b = RunConfig::new("x/img.png", "out2");
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 1,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
        assert!(a.run_dir().starts_with("out1"));
        assert!(a
            .run_dir()
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .starts_with("img-"));
    }

    #[test]
    fn strip_timing_removes_nested() {
        let mut v = serde_json::json!({"a": 1, "seconds": 2, "t": {"runtime_seconds": 1, "b": [ {"seconds": 3, "c": 4} ]}, "timing": {}});
        strip_timing(&mut v);
        assert_eq!(v, serde_json::json!({"a": 1, "t": {"b": [{"c": 4}]}}));
    }

    #[test]
    fn run_two_regions() {
        let (dir, input, gt) = two_region_dir();
        let mut cfg = RunConfig::new(&input, dir.path().join("out"));
        cfg.superpixels = 20;
        cfg.ground_truth = Some(gt);
        cfg.baseline = Some(Baseline::Otsu);
        let report = run(&cfg).unwrap();
        assert_eq!(report.trace.algorithm, Algorithm::Combined);
        assert!(report.accuracy().unwrap() > 0.95);
        assert!(
            report
                .baseline
                .as_ref()
                .unwrap()
                .evaluation
                .as_ref()
                .unwrap()
                .accuracy
                > 0.95
        );
        let d = &report.run_dir;
        for f in [
            LABELS_FILE,
            IDS_FILE,
            REPORT_FILE,
            METRICS_FILE,
            BASELINE_FILE,
        ] {
            assert!(d.join(f).is_file(), "{f}");
        }
        assert!(!d.join(OVERLAY_FILE).exists());
        let csv = fs::read_to_string(d.join(METRICS_FILE)).unwrap();
        assert!(csv.starts_with("image,algorithm,n,k,accuracy,seconds,sweeps\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn pinned_model_replays() {
        let (dir, input, _) = two_region_dir();
        let mut cfg = RunConfig::new(&input, dir.path().join("a"));
        cfg.superpixels = 20;
        let first = run(&cfg).unwrap();
        let mut replay = cfg.clone();
        replay.pin_model = Some(first.run_dir.join(REPORT_FILE));
        replay.classes = 5;
        let second = run(&replay).unwrap();
        assert_eq!(second.model, first.model);
        assert_eq!(
            fs::read(first.run_dir.join(LABELS_FILE)).unwrap(),
            fs::read(second.run_dir.join(LABELS_FILE)).unwrap()
        );
    }

    #[test]
    fn suite_isolates_failures() {
        let (dir, input, _) = two_region_dir();
        let mut good = RunConfig::new(&input, dir.path().join("out"));
        good.superpixels = 20;
        let bad = RunConfig {
            input: dir.path().join("missing.png"),
            ..good.clone()
        };
        let opts = SuiteOptions {
            workers: 2,
            algorithms: None,
        };
        let report = run_suite(&[good.clone(), bad], &opts, Some(&dir.path().join("out"))).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.failures(), 1);
        assert!(report.rows[1].status.starts_with("error: io"));
        assert_eq!(report.means.len(), 1);
        let csv = fs::read_to_string(dir.path().join("out").join(SUITE_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 4);

        let single = run_suite(&[good], &SuiteOptions::default(), None).unwrap();
        assert_eq!((single.rows.len(), single.means.len()), (1, 1));
    }

    #[test]
    fn suite_from_directory() {
        let (dir, _, gt) = two_region_dir();
        let template = RunConfig {
            superpixels: 20,
            ..RunConfig::new("", dir.path().join("out"))
        };
        let configs = configs_from_dir(dir.path(), &template).unwrap();
        assert_eq!(configs.len(), 1);
        assert_eq!(configs[0].ground_truth.as_deref(), Some(gt.as_path()));
        let opts = SuiteOptions {
            workers: 1,
            algorithms: Some(Algorithm::ALL.to_vec()),
        };
        let report = run_suite(&configs, &opts, None).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.means.len(), 3);
        assert!(report.mean_accuracy(Algorithm::Combined).unwrap() > 0.9);
    }
}
