//! Experiment runner: declarative specs, per-cell training and adaptation,
//! code-size sweeps, strategy comparisons, gradient checks and timing.

mod report;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::model::{build_network, Injection, InjectionMode, Network, NetworkConfig, SpeakerId, Strategy};
use crate::numeric::{Rng, Vector, DEFAULT_FD_EPS};
use crate::synthgen::{generate, oracle_rmse_floor, GenConfig, Split, SpeakerDataset};
use crate::training::{
    adapt_speaker, gradcheck, mse_loss, train_multispeaker, AdaptConfig, Frame, GradcheckReport, Selector, TrainConfig,
};

pub use report::{
    median, spearman, strategy_label, write_numbered, write_report, AdaptMetrics, CellResult, MetricsReport,
    SeenMetrics,
};

/// Gradient-check tolerance on relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A directory written by `gen-data`.
    Path(PathBuf),
    Generate(GenConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Generate(GenConfig::default())
    }
}

/// Network shape; input and output widths come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkShape {
    pub width: usize,
    pub depth: usize,
    #[serde(default = "sigmoid")]
    pub hidden_activation: Activation,
}

fn sigmoid() -> Activation {
    Activation::Sigmoid
}

impl Default for NetworkShape {
    fn default() -> Self {
        NetworkShape {
            width: 32,
            depth: 2,
            hidden_activation: Activation::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSettings {
    /// Omitted fields take the adaptation defaults, not the training ones.
    #[serde(default = "adapt_train_defaults", deserialize_with = "adapt_train_overlay")]
    pub train: TrainConfig,
    /// Defaults to the strategy's own speaker parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<Selector>,
}

fn adapt_train_defaults() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        batch_size: 16,
        adam: crate::training::AdamConfig {
            learning_rate: 1e-2,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

impl Default for AdaptSettings {
    fn default() -> Self {
        AdaptSettings {
            train: adapt_train_defaults(),
            selector: None,
        }
    }
}

/// Applies the keys of a JSON object on top of `base`'s serialized form,
/// rejecting keys `base` does not have.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(
    base: &T,
    patch: serde_json::Map<String, serde_json::Value>,
) -> std::result::Result<T, String> {
    let mut value = serde_json::to_value(base).map_err(|e| e.to_string())?;
    let fields = value.as_object_mut().ok_or("overlay base is not an object")?;
    for (key, v) in patch {
        match fields.get_mut(&key) {
            Some(slot) => *slot = v,
            None => {
                let known: Vec<&str> = fields.keys().map(String::as_str).collect();
                return Err(format!("unknown field `{key}`, expected one of {}", known.join(", ")));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn train_overlay<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    let patch = serde_json::Map::deserialize(d)?;
    overlay(&TrainConfig::default(), patch).map_err(serde::de::Error::custom)
}

fn adapt_train_overlay<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    let patch = serde_json::Map::deserialize(d)?;
    overlay(&adapt_train_defaults(), patch).map_err(serde::de::Error::custom)
}

impl AdaptSettings {
    pub fn config_for(&self, strategy: Strategy, seed: u64) -> AdaptConfig {
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        match self.selector {
            Some(selector) => AdaptConfig { train, selector },
            None => AdaptConfig::default_for(strategy, train),
        }
    }
}

/// Everything one harness command needs. All fields have desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSource,
    pub network: NetworkShape,
    #[serde(deserialize_with = "train_overlay")]
    pub train: TrainConfig,
    pub adapt: AdaptSettings,
    pub strategies: Vec<Strategy>,
    pub modes: Vec<InjectionMode>,
    /// Adaptation frames per unseen speaker.
    pub adapt_sizes: Vec<usize>,
    /// Scaling-code lengths for the code-size sweep.
    pub code_sizes: Vec<usize>,
    /// Each seed drives network initialization and minibatch order.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            data: DataSource::default(),
            network: NetworkShape::default(),
            train: TrainConfig::default(),
            adapt: AdaptSettings::default(),
            strategies: desk_strategies().to_vec(),
            modes: vec![InjectionMode::Nonlinear, InjectionMode::Linear],
            adapt_sizes: vec![10, 40, 160],
            code_sizes: vec![1, 4, 16, 64],
            seeds: vec![0, 1, 2],
        }
    }
}

/// The five code strategies at equal total code length (16) for the
/// desk-scale network.
pub fn desk_strategies() -> [Strategy; 5] {
    [
        Strategy::Bias { q: 16 },
        Strategy::Scale { p: 16 },
        Strategy::Affine { p: 8, q: 8 },
        Strategy::Level { p: 8, q: 8 },
        Strategy::Bottle { p: 8, q: 8, n: 16 },
    ]
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text).map_err(|e| Error::parse("<spec>", e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentSpec::from_json(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::parse(path, reason),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("at least one injection mode is required".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        if self.code_sizes.contains(&0) {
            return Err(Error::InvalidConfig("code sizes must be positive".into()));
        }
        if self.adapt_sizes.contains(&0) {
            return Err(Error::InvalidConfig("adaptation sizes must be positive".into()));
        }
        self.train.validate()?;
        self.adapt.train.validate()
    }

    pub fn network_config(&self, data: &GenConfig, strategy: Strategy, mode: InjectionMode, seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_dim: data.input_dim,
            output_dim: data.output_dim,
            width: self.network.width,
            depth: self.network.depth,
            hidden_activation: self.network.hidden_activation,
            strategy,
            injection: Injection::of(mode),
            seed,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Loads or generates the spec's dataset and returns it with its content hash.
pub fn load_dataset(source: &DataSource) -> Result<(SpeakerDataset, String)> {
    let data = match source {
        DataSource::Path(dir) => SpeakerDataset::load(dir)?,
        DataSource::Generate(cfg) => generate(cfg)?,
    };
    let hash = data.content_hash()?;
    Ok((data, hash))
}

/// Anything that maps an input and a speaker to an output vector.
pub trait Predictor: Sync {
    fn predict(&self, x: &Vector, speaker: SpeakerId) -> Result<Vector>;
}

impl Predictor for Network {
    fn predict(&self, x: &Vector, speaker: SpeakerId) -> Result<Vector> {
        self.forward(x, speaker)
    }
}

/// Predicts the noise-free targets from the generator's own function and latents.
pub struct Oracle<'a>(pub &'a SpeakerDataset);

impl Predictor for Oracle<'_> {
    fn predict(&self, x: &Vector, speaker: SpeakerId) -> Result<Vector> {
        self.0.oracle_output(x, speaker)
    }
}

/// Per-speaker RMSE and the mean over speakers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_speaker: BTreeMap<SpeakerId, f64>,
    pub mean: f64,
}

/// RMSE over all output entries of each speaker's frames.
pub fn evaluate(predictor: &impl Predictor, frames: &[Frame]) -> Result<Evaluation> {
    if frames.is_empty() {
        return Err(Error::EmptyData("evaluation frames"));
    }
    let losses = frames
        .par_iter()
        .map(|f| mse_loss(&predictor.predict(&f.x, f.speaker)?, &f.y))
        .collect::<Result<Vec<f64>>>()?;
    let mut sums: BTreeMap<SpeakerId, (f64, usize)> = BTreeMap::new();
    for (f, l) in frames.iter().zip(losses) {
        let e = sums.entry(f.speaker).or_insert((0.0, 0));
        e.0 += l;
        e.1 += 1;
    }
    let per_speaker: BTreeMap<SpeakerId, f64> = sums.into_iter().map(|(id, (s, n))| (id, (s / n as f64).sqrt())).collect();
    let mean = per_speaker.values().sum::<f64>() / per_speaker.len() as f64;
    Ok(Evaluation { per_speaker, mean })
}

/// Builds a network with every seen speaker registered and trains it.
pub fn train_seen(
    data: &SpeakerDataset,
    spec: &ExperimentSpec,
    strategy: Strategy,
    mode: InjectionMode,
    seed: u64,
) -> Result<(Network, crate::training::TrainHistory)> {
    let mut net = build_network(&spec.network_config(&data.config, strategy, mode, seed))?;
    for &id in &data.seen {
        net.register_speaker(id)?;
    }
    let history = train_multispeaker(
        &mut net,
        &data.seen_frames(Split::Train),
        &data.seen_frames(Split::Valid),
        &spec.train_config(seed),
    )?;
    Ok((net, history))
}

/// Adapts a copy of `net` to every unseen speaker using the first `size`
/// adaptation frames each, and evaluates on their valid and test splits.
pub fn adapt_unseen(
    net: &Network,
    data: &SpeakerDataset,
    spec: &ExperimentSpec,
    size: usize,
    seed: u64,
) -> Result<(Network, AdaptMetrics)> {
    let cfg = spec.adapt.config_for(net.strategy(), seed);
    let mut adapted = net.clone();
    for &id in &data.unseen {
        let train = data.adaptation_frames(id, size)?;
        let valid = data.speaker_frames(id, Split::Valid);
        adapt_speaker(&mut adapted, id, &train, &valid, &cfg)?;
    }
    let valid = evaluate(&adapted, &data.frames(Split::Valid, &data.unseen))?;
    let test = evaluate(&adapted, &data.frames(Split::Test, &data.unseen))?;
    Ok((
        adapted,
        AdaptMetrics {
            size,
            valid_rmse: valid.mean,
            test_rmse: test.mean,
            per_speaker_test_rmse: test.per_speaker,
        },
    ))
}

fn run_cell_inner(
    data: &SpeakerDataset,
    spec: &ExperimentSpec,
    strategy: Strategy,
    mode: InjectionMode,
    seed: u64,
    adapt: bool,
    checkpoints: Option<&Path>,
) -> Result<CellResult> {
    let start = Instant::now();
    let (net, history) = train_seen(data, spec, strategy, mode, seed)?;
    if let Some(dir) = checkpoints {
        save_checkpoint(&net, &dir.join(checkpoint_name(strategy, mode, seed)))?;
    }
    let seen = SeenMetrics {
        train_rmse: evaluate(&net, &data.seen_frames(Split::Train))?.mean,
        valid_rmse: evaluate(&net, &data.seen_frames(Split::Valid))?.mean,
        test_rmse: evaluate(&net, &data.seen_frames(Split::Test))?.mean,
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut adapted = Vec::new();
    if adapt {
        for &size in &spec.adapt_sizes {
            adapted.push(adapt_unseen(&net, data, spec, size, seed)?.1);
        }
    }
    Ok(CellResult {
        strategy,
        mode,
        seed,
        failure: None,
        params: Some(net.count_params()),
        epochs_run: history.epochs.len(),
        seen: Some(seen),
        adapted,
        train_seconds,
        adapt_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Trains one cell on the seen speakers and, if `adapt`, adapts every
/// unseen speaker at each configured size. Errors become failed cells.
pub fn run_cell(
    data: &SpeakerDataset,
    spec: &ExperimentSpec,
    strategy: Strategy,
    mode: InjectionMode,
    seed: u64,
    adapt: bool,
) -> CellResult {
    run_cell_inner(data, spec, strategy, mode, seed, adapt, None)
        .unwrap_or_else(|e| CellResult::failed(strategy, mode, seed, e.to_string()))
}

fn run_grid(
    command: &str,
    data: &SpeakerDataset,
    hash: &str,
    spec: &ExperimentSpec,
    grid: Vec<(Strategy, InjectionMode, u64)>,
    adapt: bool,
    checkpoints: Option<&Path>,
) -> MetricsReport {
    let cells = grid
        .into_par_iter()
        .map(|(strategy, mode, seed)| {
            run_cell_inner(data, spec, strategy, mode, seed, adapt, checkpoints)
                .unwrap_or_else(|e| CellResult::failed(strategy, mode, seed, e.to_string()))
        })
        .collect();
    single_report(command, data, hash, spec, cells)
}

/// File name for a trained cell, e.g. `affine-p8-q8-nonlinear-seed0.json`.
pub fn checkpoint_name(strategy: Strategy, mode: InjectionMode, seed: u64) -> String {
    let mut name = strategy.name().replace('_', "-");
    for (tag, size) in [("p", strategy.scale_len()), ("q", strategy.bias_len())] {
        if let Some(size) = size {
            name.push_str(&format!("-{tag}{size}"));
        }
    }
    if let Strategy::Bottle { n, .. } = strategy {
        name.push_str(&format!("-n{n}"));
    }
    format!("{name}-{mode}-seed{seed}.json")
}

/// Writes a network checkpoint, refusing to replace an existing file.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let text = net.to_json()?;
    let mut file = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::WouldOverwrite(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn check_compatible(net: &Network, data: &SpeakerDataset) -> Result<()> {
    if net.input_dim() != data.config.input_dim || net.output_dim() != data.config.output_dim {
        return Err(Error::InvalidConfig(format!(
            "network maps {} -> {} but the dataset has {} inputs and {} outputs",
            net.input_dim(),
            net.output_dim(),
            data.config.input_dim,
            data.config.output_dim
        )));
    }
    Ok(())
}

/// RMSE of a checkpoint on one split, over the dataset speakers it has
/// registered.
pub fn evaluate_checkpoint(net: &Network, data: &SpeakerDataset, split: Split) -> Result<Evaluation> {
    check_compatible(net, data)?;
    let ids: Vec<SpeakerId> = data.seen.iter().chain(&data.unseen).copied().filter(|&id| net.has_speaker(id)).collect();
    evaluate(net, &data.frames(split, &ids))
}

/// Seen-speaker metrics of a trained checkpoint, then adaptation of every
/// unseen speaker at each configured size. Adapted networks are saved in
/// `out` as `<stem>-adapt<size>.json` when given.
pub fn adapt_checkpoint(
    net: &Network,
    stem: &str,
    data: &SpeakerDataset,
    spec: &ExperimentSpec,
    seed: u64,
    out: Option<&Path>,
) -> Result<CellResult> {
    check_compatible(net, data)?;
    let cfg = net.config();
    let seen: Vec<SpeakerId> = data.seen.iter().copied().filter(|&id| net.has_speaker(id)).collect();
    let metrics = |split| evaluate(net, &data.frames(split, &seen)).map(|e| e.mean);
    let seen_metrics = if seen.is_empty() {
        None
    } else {
        Some(SeenMetrics {
            train_rmse: metrics(Split::Train)?,
            valid_rmse: metrics(Split::Valid)?,
            test_rmse: metrics(Split::Test)?,
        })
    };
    let start = Instant::now();
    let mut adapted = Vec::new();
    for &size in &spec.adapt_sizes {
        let (net, metrics) = adapt_unseen(net, data, spec, size, seed)?;
        if let Some(dir) = out {
            save_checkpoint(&net, &dir.join(format!("{stem}-adapt{size}.json")))?;
        }
        adapted.push(metrics);
    }
    Ok(CellResult {
        strategy: cfg.strategy,
        mode: cfg.injection.mode,
        seed,
        failure: None,
        params: Some(net.count_params()),
        epochs_run: 0,
        seen: seen_metrics,
        adapted,
        train_seconds: 0.0,
        adapt_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Wraps cells from a single-dataset command into a report.
pub fn single_report(command: &str, data: &SpeakerDataset, hash: &str, spec: &ExperimentSpec, cells: Vec<CellResult>) -> MetricsReport {
    MetricsReport {
        command: command.into(),
        dataset_sha256: hash.into(),
        dataset: data.config.clone(),
        oracle_rmse_floor: oracle_rmse_floor(&data.config),
        spec: spec.clone(),
        cells,
    }
}

/// Runs every strategy × injection mode × seed cell on the same dataset,
/// with adaptation of the unseen speakers.
pub fn compare(spec: &ExperimentSpec, data: &SpeakerDataset, hash: &str) -> Result<MetricsReport> {
    if spec.strategies.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one strategy".into()));
    }
    let mut grid = Vec::new();
    for &strategy in &spec.strategies {
        for &mode in &spec.modes {
            for &seed in &spec.seeds {
                grid.push((strategy, mode, seed));
            }
        }
    }
    Ok(run_grid("compare", data, hash, spec, grid, true, None))
}

/// Multi-speaker training only, one cell per strategy × mode × seed. With
/// `checkpoints`, each trained network is saved there under
/// [`checkpoint_name`].
pub fn train_grid(
    spec: &ExperimentSpec,
    data: &SpeakerDataset,
    hash: &str,
    checkpoints: Option<&Path>,
) -> Result<MetricsReport> {
    if spec.strategies.is_empty() {
        return Err(Error::InvalidConfig("no strategies configured".into()));
    }
    let grid = spec
        .strategies
        .iter()
        .flat_map(|&s| spec.modes.iter().flat_map(move |&m| spec.seeds.iter().map(move |&seed| (s, m, seed))))
        .collect();
    Ok(run_grid("train", data, hash, spec, grid, false, checkpoints))
}

/// One multi-speaker scale-code model per code length, in the first
/// configured injection mode.
pub fn sweep_code_size(spec: &ExperimentSpec, data: &SpeakerDataset, hash: &str) -> Result<MetricsReport> {
    if spec.code_sizes.is_empty() {
        return Err(Error::InvalidConfig("no code sizes configured".into()));
    }
    let mode = spec.modes[0];
    let grid = spec
        .code_sizes
        .iter()
        .flat_map(|&p| spec.seeds.iter().map(move |&seed| (Strategy::Scale { p }, mode, seed)))
        .collect();
    Ok(run_grid("sweep", data, hash, spec, grid, false, None))
}

/// Code length paired with the median validation RMSE over seeds, plus the
/// Spearman correlation between the two.
pub fn sweep_trend(report: &MetricsReport) -> (Vec<(usize, f64)>, Option<f64>) {
    let mut sizes: Vec<usize> = report.cells.iter().filter_map(|c| c.strategy.scale_len()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let points: Vec<(usize, f64)> = sizes
        .into_iter()
        .filter_map(|p| {
            report
                .median(|c| c.strategy.scale_len() == Some(p), |c| c.seen.as_ref().map(|s| s.valid_rmse))
                .map(|m| (p, m))
        })
        .collect();
    let xs: Vec<f64> = points.iter().map(|&(p, _)| p as f64).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, r)| r).collect();
    (points.clone(), spearman(&xs, &ys))
}

/// Every strategy the network supports, at small sizes, for gradient checks.
pub fn gradcheck_strategies() -> [Strategy; 7] {
    [
        Strategy::Bias { q: 2 },
        Strategy::Scale { p: 2 },
        Strategy::Affine { p: 2, q: 2 },
        Strategy::Level { p: 2, q: 2 },
        Strategy::Bottle { p: 2, q: 2, n: 2 },
        Strategy::Lhuc,
        Strategy::FullFinetune,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub strategy: Strategy,
    pub mode: InjectionMode,
    pub report: GradcheckReport,
    pub passed: bool,
}

/// Deliberate gradient corruption for exercising the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientBug {
    None,
    /// Negate the largest-magnitude entry of the speaker's gradient.
    NegateSpeakerEntry,
}

/// A width-4, depth-2 network with unit-scale adapters and speaker
/// parameters, one registered speaker, and one random frame.
pub fn gradcheck_instance(strategy: Strategy, mode: InjectionMode, seed: u64) -> Result<(Network, Frame)> {
    let (input_dim, output_dim) = (4, 3);
    let mut net = build_network(&NetworkConfig {
        input_dim,
        output_dim,
        width: 4,
        depth: 2,
        hidden_activation: Activation::Sigmoid,
        strategy,
        injection: Injection::of(mode),
        seed,
    })?;
    let id = SpeakerId(0);
    net.register_speaker(id)?;
    let mut rng = Rng::derived(seed, 7);
    for key in net.param_keys(Some(id)) {
        if key.owner != crate::model::Owner::Shared {
            for x in net.param_mut(&key).expect("listed key exists") {
                *x = rng.normal();
            }
        }
    }
    let frame = Frame {
        speaker: id,
        x: Vector::gaussian(input_dim, 1.0, &mut rng),
        y: Vector::gaussian(output_dim, 1.0, &mut rng),
    };
    Ok((net, frame))
}

/// Gradient check of every strategy × injection mode.
pub fn gradcheck_all(seed: u64, bug: GradientBug) -> Result<Vec<GradcheckEntry>> {
    let mut out = Vec::new();
    for strategy in gradcheck_strategies() {
        for mode in [InjectionMode::Nonlinear, InjectionMode::Linear] {
            let (net, frame) = gradcheck_instance(strategy, mode, seed)?;
            let report = match bug {
                GradientBug::None => gradcheck(&net, &frame, DEFAULT_FD_EPS)?,
                GradientBug::NegateSpeakerEntry => {
                    let mut grads = crate::model::Gradients::new();
                    crate::training::frame_gradients(&net, &frame, crate::model::LayerSource::Speaker, &mut grads)?;
                    let worst = grads
                        .iter()
                        .filter(|(k, _)| k.is_speaker())
                        .flat_map(|(k, g)| g.iter().enumerate().map(move |(i, v)| (*k, i, v.abs())))
                        .max_by(|a, b| a.2.total_cmp(&b.2));
                    if let Some((key, i, _)) = worst {
                        let g = grads.get_mut(&key).expect("key came from grads");
                        g[i] = -g[i];
                    }
                    crate::training::compare_gradients(&net, &frame, &grads, DEFAULT_FD_EPS)?
                }
            };
            let passed = report.passes(GRADCHECK_TOLERANCE);
            out.push(GradcheckEntry {
                strategy,
                mode,
                report,
                passed,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub strategy: Strategy,
    pub mode: InjectionMode,
    pub frames: usize,
    pub seconds: f64,
    pub microseconds_per_frame: f64,
}

/// Times single-frame forward passes for each configured strategy and mode.
pub fn bench(spec: &ExperimentSpec, data: &GenConfig, frames: usize) -> Result<Vec<BenchEntry>> {
    let mut out = Vec::new();
    for &strategy in &spec.strategies {
        for &mode in &spec.modes {
            let seed = spec.seeds[0];
            let mut net = build_network(&spec.network_config(data, strategy, mode, seed))?;
            let id = SpeakerId(0);
            net.register_speaker(id)?;
            let mut rng = Rng::derived(seed, 9);
            let xs: Vec<Vector> = (0..frames.max(1)).map(|_| Vector::gaussian(data.input_dim, 1.0, &mut rng)).collect();
            let start = Instant::now();
            for x in &xs {
                std::hint::black_box(net.forward(x, id)?);
            }
            let seconds = start.elapsed().as_secs_f64();
            out.push(BenchEntry {
                strategy,
                mode,
                frames: xs.len(),
                seconds,
                microseconds_per_frame: seconds * 1e6 / xs.len() as f64,
            });
        }
    }
    Ok(out)
}
