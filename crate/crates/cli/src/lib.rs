//! Subcommands of the `uoiskit` binary, exposed as a library so they can be
//! driven from tests.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use uoiskit_core::hdnet::{build_training_set, train_hdnet, HdnetConfig};
use uoiskit_core::hpg::GaussianSpec;
use uoiskit_core::hpghead::{predict_hpg, train_hpg, HpgConfig, FEATURE_WIDTH, OUTPUT_WIDTH};
use uoiskit_core::metrics::{aggregate, evaluate_scene, format_table, Aggregation, MetricsReport, DEFAULT_TOLERANCE};
use uoiskit_core::pipeline::{infer_from_prompts, prompts, Ablation, Detection, PipelineConfig, ProposerKind};
use uoiskit_core::proposer::{MaskProposer, OracleConfig, OracleProposer, Recording, RecordingProposer, ReplayProposer};
use uoiskit_core::rng;
use uoiskit_core::synthgen::{generate_scene, read_dataset, read_manifest, write_dataset, write_json, DatasetMeta};
use uoiskit_core::tinynn::{CheckpointMeta, Mlp, TrainConfig, TrainOutcome};
use uoiskit_core::{BinaryMask, Error, MaskRecord, PixelPoint, Result, SceneConfig};

/// Exit status for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::PlacementFailure { .. } | Error::InvalidPrompt { .. } => 2,
        Error::Numerical(_) => 4,
        Error::InvalidDimensions(_)
        | Error::CorruptMask(_)
        | Error::EmptyMask
        | Error::Dataset(_)
        | Error::Sampling(_)
        | Error::Io { .. } => 3,
    }
}

// tags for seeds derived from the run seed
const TAG_TRAIN_HPG: u64 = 0x0048_5047;
const TAG_TRAIN_HDNET: u64 = 0x0048_444e;
const TAG_INFER: u64 = 0x0049_4e46;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerance: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            aggregation: Aggregation::PerImageMean,
        }
    }
}

/// Everything a run needs, read from one TOML file. Training seeds are
/// derived from `seed`; the `seed` keys inside the training sections are
/// overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenes generated by `gen`.
    pub count: usize,
    pub scene: SceneConfig,
    pub oracle: OracleConfig,
    pub hpg: HpgConfig,
    pub hdnet: HdnetConfig,
    pub train_hpg: TrainConfig,
    pub train_hdnet: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 100,
            scene: SceneConfig::default(),
            oracle: OracleConfig::default(),
            hpg: HpgConfig::default(),
            hdnet: HdnetConfig::default(),
            train_hpg: TrainConfig::default(),
            train_hdnet: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.oracle.validate()?;
        self.train_hpg.validate()?;
        self.train_hdnet.validate()?;
        self.pipeline.validate()?;
        GaussianSpec::new(self.pipeline.sigma)?;
        if self.hdnet.prompts_per_scene == 0 || !(0.0..=1.0).contains(&self.hdnet.bg_fraction) {
            return Err(Error::Config("hdnet needs prompts_per_scene >= 1 and bg_fraction in [0, 1]".into()));
        }
        if self.hpg.samples_per_image == 0 {
            return Err(Error::Config("hpg.samples_per_image must be at least 1".into()));
        }
        if self.eval.tolerance.is_nan() || self.eval.tolerance < 0.0 {
            return Err(Error::Config("eval.tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn distinct(input: &Path, output: &Path) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if canon(input) == canon(output) {
        return Err(Error::Config(format!(
            "output {} would overwrite input {}",
            output.display(),
            input.display()
        )));
    }
    Ok(())
}

/// Generates `count` scenes into `out`; scene `i` uses `scene_seed(seed, i)`.
pub fn cmd_gen(cfg: &RunConfig, count: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(c) = count {
        cfg.count = c;
    }
    let seeds: Vec<u64> = (0..cfg.count as u64).map(|i| rng::scene_seed(cfg.seed, i)).collect();
    let scenes = seeds
        .par_iter()
        .map(|&s| generate_scene(&cfg.scene, s))
        .collect::<Result<Vec<_>>>()?;
    let manifest = write_dataset(
        out,
        &scenes,
        &DatasetMeta {
            global_seed: Some(cfg.seed),
            config: cfg.to_json(),
            seeds,
        },
    )?;
    log::info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    Ok(())
}

fn write_training_log(out: &Path, outcome: &TrainOutcome) -> Result<PathBuf> {
    let mut path = out.as_os_str().to_owned();
    path.push(".log.jsonl");
    let path = PathBuf::from(path);
    let mut text = String::new();
    for e in &outcome.log {
        let line = serde_json::to_string(e).expect("epoch log serializes");
        log::info!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    let summary = serde_json::json!({
        "selected_epoch": outcome.best_epoch,
        "best_val_loss": outcome.best_val_loss,
        "initial_val_loss": outcome.initial_val_loss,
    });
    text.push_str(&summary.to_string());
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub const KIND_HPG: &str = "hpg-head";
pub const KIND_HDNET: &str = "hdnet";

fn save(out: &Path, kind: &str, outcome: &TrainOutcome, train: &TrainConfig, extra: serde_json::Value) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    outcome.net.save(
        out,
        &CheckpointMeta {
            kind: kind.to_string(),
            dims: outcome.net.dims(),
            train: train.clone(),
            best_epoch: Some(outcome.best_epoch),
            best_val_loss: Some(outcome.best_val_loss),
            extra,
        },
    )?;
    write_training_log(out, outcome)?;
    Ok(())
}

/// Loads a checkpoint and checks its sidecar names the expected network.
pub fn load_checkpoint(path: &Path, kind: &str) -> Result<Mlp> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    let meta = CheckpointMeta::load(path)?;
    if meta.kind != kind {
        return Err(Error::Config(format!(
            "{} holds a {:?} network, expected {kind:?}",
            path.display(),
            meta.kind
        )));
    }
    Mlp::load(path)
}

pub fn cmd_train_hpg(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    distinct(data, out)?;
    let (_, scenes) = read_dataset(data)?;
    let train = TrainConfig {
        seed: rng::derive(cfg.seed, TAG_TRAIN_HPG),
        ..cfg.train_hpg.clone()
    };
    let spec = GaussianSpec::new(cfg.pipeline.sigma)?;
    let outcome = train_hpg(&scenes, spec, &cfg.hpg, &train)?;
    let extra = serde_json::json!({ "hpg": cfg.hpg, "sigma": cfg.pipeline.sigma });
    save(out, KIND_HPG, &outcome, &train, extra)
}

/// The proposer selected by `kind`; replay reads `replay` (or the pipeline
/// config's `replay_path`).
pub fn make_proposer(cfg: &RunConfig, kind: ProposerKind, replay: Option<&Path>) -> Result<Box<dyn MaskProposer>> {
    Ok(match kind {
        ProposerKind::Oracle => Box::new(OracleProposer::new(cfg.oracle.clone())?),
        ProposerKind::Replay => {
            let path = replay
                .map(Path::to_path_buf)
                .or_else(|| cfg.pipeline.replay_path.clone())
                .ok_or_else(|| Error::Config("replay proposer needs a recording path".into()))?;
            Box::new(ReplayProposer::from_recording(&Recording::read(&path)?)?)
        }
    })
}

pub fn cmd_train_hdnet(cfg: &RunConfig, data: &Path, out: &Path, proposer: &dyn MaskProposer) -> Result<()> {
    distinct(data, out)?;
    let (_, scenes) = read_dataset(data)?;
    let seed = rng::derive(cfg.seed, TAG_TRAIN_HDNET);
    let samples = build_training_set(&scenes, &cfg.hdnet, proposer, seed)?;
    let train = TrainConfig {
        seed,
        ..cfg.train_hdnet.clone()
    };
    let outcome = train_hdnet(&samples, &cfg.hdnet.hidden, &train)?;
    let channels = samples[0].features.ncols() / 2;
    let extra = serde_json::json!({ "hdnet": cfg.hdnet, "channels": channels, "samples": samples.len() });
    save(out, KIND_HDNET, &outcome, &train, extra)
}

pub const PREDICTIONS_FORMAT: &str = "uoiskit-predictions";
pub const REPORT_FORMAT: &str = "uoiskit-report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub mask: MaskRecord,
    pub score: f64,
    pub prompt: PixelPoint,
    pub slot: usize,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            mask: d.mask.to_record(),
            score: d.score,
            prompt: d.prompt,
            slot: d.slot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePredictions {
    pub index: usize,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// `"full"` or the ablation name.
    pub name: String,
    pub scenes: Vec<ScenePredictions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub format: String,
    pub version: u32,
    pub global_seed: u64,
    pub config: serde_json::Value,
    pub variants: Vec<Variant>,
}

pub fn variant_name(a: Ablation) -> &'static str {
    match a {
        Ablation::None => "full",
        other => other.name(),
    }
}

pub struct InferArgs<'a> {
    pub data: &'a Path,
    pub hpg: Option<&'a Path>,
    pub hdnet: Option<&'a Path>,
    pub out: &'a Path,
    pub ablation: Ablation,
    pub proposer: &'a dyn MaskProposer,
    /// Where to save every proposal served, for later replay.
    pub record: Option<&'a Path>,
}

/// Runs the full pipeline, plus the requested ablation as a second variant.
pub fn cmd_infer(cfg: &RunConfig, args: &InferArgs) -> Result<Predictions> {
    distinct(args.data, args.out)?;
    let pick = |flag: Option<&Path>, conf: &Option<PathBuf>, what: &str| {
        flag.map(Path::to_path_buf)
            .or_else(|| conf.clone())
            .ok_or_else(|| Error::Config(format!("{what} checkpoint not given")))
    };
    let hpg = load_checkpoint(&pick(args.hpg, &cfg.pipeline.hpg_checkpoint, "HPG")?, KIND_HPG)?;
    let hdnet = load_checkpoint(&pick(args.hdnet, &cfg.pipeline.hdnet_checkpoint, "HDNet")?, KIND_HDNET)?;
    if hpg.input_dim() != FEATURE_WIDTH || hpg.output_dim() != OUTPUT_WIDTH {
        return Err(Error::Config("HPG checkpoint has the wrong shape".into()));
    }
    let (_, scenes) = read_dataset(args.data)?;
    let mut variants = vec![Ablation::None];
    if args.ablation != Ablation::None {
        variants.push(args.ablation);
    }
    let recorder = args.record.map(|_| RecordingProposer::new(args.proposer));
    let proposer: &dyn MaskProposer = match &recorder {
        Some(r) => r,
        None => args.proposer,
    };
    let seed = rng::derive(cfg.seed, TAG_INFER);
    let per_scene = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let out = predict_hpg(&hpg, scene.image())?;
            variants
                .iter()
                .map(|&a| {
                    let kps = prompts(scene.size(), Some(&out), &cfg.pipeline, a)?;
                    let net = a.uses_hdnet().then_some(&hdnet);
                    let res = infer_from_prompts(scene, i, kps, net, proposer, &cfg.pipeline, seed)?;
                    Ok(ScenePredictions {
                        index: i,
                        detections: res.detections.iter().map(DetectionRecord::from).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions = Predictions {
        format: PREDICTIONS_FORMAT.to_string(),
        version: 1,
        global_seed: cfg.seed,
        config: cfg.to_json(),
        variants: variants
            .iter()
            .enumerate()
            .map(|(v, &a)| Variant {
                name: variant_name(a).to_string(),
                scenes: per_scene.iter().map(|s| s[v].clone()).collect(),
            })
            .collect(),
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_json(args.out, &predictions)?;
    if let (Some(r), Some(path)) = (recorder, args.record) {
        r.into_recording().write(path)?;
    }
    Ok(predictions)
}

/// Named mask sets per scene, from a dataset directory (its ground truth) or a
/// predictions file (one set per variant).
pub fn load_mask_sets(path: &Path) -> Result<Vec<(String, Vec<Vec<BinaryMask>>)>> {
    let decode = |recs: &[MaskRecord]| recs.iter().map(BinaryMask::from_record).collect::<Result<Vec<_>>>();
    if path.is_dir() {
        let manifest = read_manifest(path)?;
        let sets = manifest
            .scenes
            .iter()
            .map(|s| decode(&s.instances))
            .collect::<Result<Vec<_>>>()?;
        return Ok(vec![("dataset".to_string(), sets)]);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let preds: Predictions =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if preds.format != PREDICTIONS_FORMAT {
        return Err(Error::Dataset(format!("{}: not a predictions file", path.display())));
    }
    preds
        .variants
        .iter()
        .map(|v| {
            let mut sets = Vec::with_capacity(v.scenes.len());
            for (i, s) in v.scenes.iter().enumerate() {
                if s.index != i {
                    return Err(Error::Dataset(format!(
                        "{}: scene {i} missing from variant {:?}",
                        path.display(),
                        v.name
                    )));
                }
                let masks: Vec<MaskRecord> = s.detections.iter().map(|d| d.mask.clone()).collect();
                sets.push(decode(&masks)?);
            }
            Ok((v.name.clone(), sets))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub name: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub variants: Vec<NamedReport>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let rows: Vec<(&str, &MetricsReport)> = self.variants.iter().map(|v| (v.name.as_str(), &v.report)).collect();
        format_table(&rows)
    }
}

/// Scores every variant in `pred` against the ground truth in `gt`.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let gts = load_mask_sets(gt)?
        .into_iter()
        .next()
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Dataset(format!("{}: no ground truth", gt.display())))?;
    let mut variants = Vec::new();
    for (name, preds) in load_mask_sets(pred)? {
        if preds.len() < gts.len() {
            return Err(Error::Dataset(format!(
                "scene {} missing from {} ({name})",
                preds.len(),
                pred.display()
            )));
        }
        if preds.len() > gts.len() {
            return Err(Error::Dataset(format!(
                "scene {} has predictions but no ground truth in {}",
                gts.len(),
                gt.display()
            )));
        }
        let scenes = preds
            .par_iter()
            .zip(&gts)
            .enumerate()
            .map(|(i, (p, g))| evaluate_scene(i, p, g, cfg.eval.tolerance))
            .collect::<Result<Vec<_>>>()?;
        variants.push(NamedReport {
            name,
            report: aggregate(scenes, cfg.eval.tolerance, cfg.eval.aggregation),
        });
    }
    let report = EvalReport {
        format: REPORT_FORMAT.to_string(),
        version: 1,
        variants,
    };
    if let Some(out) = out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_json(out, &report)?;
        let txt = out.with_extension("txt");
        std::fs::write(&txt, report.table()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if r.format != REPORT_FORMAT {
        return Err(Error::Dataset(format!("{}: not an evaluation report", path.display())));
    }
    Ok(r)
}

/// One table over several evaluation reports; rows are labelled with the
/// file stem when more than one report is given.
pub fn cmd_report(inputs: &[PathBuf]) -> Result<String> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one evaluation report".into()));
    }
    let reports = inputs.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<(String, &MetricsReport)> = Vec::new();
    for (path, r) in inputs.iter().zip(&reports) {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for v in &r.variants {
            let label = if inputs.len() > 1 { format!("{stem}/{}", v.name) } else { v.name.clone() };
            rows.push((label, &v.report));
        }
    }
    let refs: Vec<(&str, &MetricsReport)> = rows.iter().map(|(l, r)| (l.as_str(), *r)).collect();
    Ok(format_table(&refs))
}
