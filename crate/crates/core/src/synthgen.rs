//! Synthetic multi-speaker regression data.
//!
//! Every speaker shares one fixed nonlinear function `g`; speaker `k`
//! observes `y = alpha_k ∘ g(x) + beta_k + noise`. Which of `alpha` and
//! `beta` vary across speakers is controlled by [`VariationMode`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::SpeakerId;
use crate::numeric::{matvec, Matrix, Rng, Vector};
use crate::training::Frame;

pub const METADATA_FILE: &str = "metadata.json";
pub const FRAMES_FILE: &str = "frames.csv";
const BASE_WIDTH: usize = 16;
const LOG_ALPHA_STD: f64 = 0.4;
const BETA_STD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariationMode {
    /// Speakers differ only by a positive per-output gain.
    Scale,
    /// Speakers differ only by a per-output offset.
    Bias,
    /// Both gain and offset vary.
    Affine,
}

impl VariationMode {
    pub fn name(self) -> &'static str {
        match self {
            VariationMode::Scale => "scale",
            VariationMode::Bias => "bias",
            VariationMode::Affine => "affine",
        }
    }
}

impl fmt::Display for VariationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dataset shape. Seen speakers get `train_frames` / `valid_frames` /
/// `test_frames`; unseen speakers get `adapt_frames` / `valid_frames` /
/// `test_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_seen_speakers: usize,
    pub num_unseen_speakers: usize,
    pub train_frames: usize,
    pub valid_frames: usize,
    pub test_frames: usize,
    pub adapt_frames: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub mode: VariationMode,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_seen_speakers: 16,
            num_unseen_speakers: 4,
            train_frames: 200,
            valid_frames: 50,
            test_frames: 100,
            adapt_frames: 160,
            input_dim: 8,
            output_dim: 6,
            mode: VariationMode::Affine,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_seen_speakers", self.num_seen_speakers),
            ("num_unseen_speakers", self.num_unseen_speakers),
            ("train_frames", self.train_frames),
            ("valid_frames", self.valid_frames),
            ("test_frames", self.test_frames),
            ("adapt_frames", self.adapt_frames),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn seen_speakers(&self) -> Vec<SpeakerId> {
        (0..self.num_seen_speakers as u32).map(SpeakerId).collect()
    }

    pub fn unseen_speakers(&self) -> Vec<SpeakerId> {
        let start = self.num_seen_speakers as u32;
        (start..start + self.num_unseen_speakers as u32).map(SpeakerId).collect()
    }
}

/// RMSE of the predictor that knows `g` and every speaker's latents.
pub fn oracle_rmse_floor(cfg: &GenConfig) -> f64 {
    cfg.noise_sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    /// Adaptation data of an unseen speaker.
    Adapt,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
            Split::Adapt => "adapt",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            "adapt" => Ok(Split::Adapt),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// The shared two-hidden-layer tanh function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseFunction {
    pub layers: Vec<(Matrix, Vector)>,
}

impl BaseFunction {
    /// Weights are scaled so each layer's pre-activation has roughly unit
    /// variance for inputs uniform on [-1, 1].
    fn draw(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let dims = [(input_dim, BASE_WIDTH, 3.0), (BASE_WIDTH, BASE_WIDTH, 2.5), (BASE_WIDTH, output_dim, 2.5)];
        let layers = dims
            .iter()
            .map(|&(fan_in, fan_out, gain)| {
                let w = Matrix::gaussian(fan_out, fan_in, (gain / fan_in as f64).sqrt(), rng);
                let c = Vector::gaussian(fan_out, 0.5, rng);
                (w, c)
            })
            .collect();
        BaseFunction { layers }
    }

    pub fn eval(&self, x: &Vector) -> Result<Vector> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (w, c)) in self.layers.iter().enumerate() {
            let pre = matvec(w, &h)?.add(c)?;
            h = if i < last { pre.map(f64::tanh) } else { pre };
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerLatent {
    /// Multiplicative factor on `g(x)`.
    pub alpha: Vector,
    /// Additive offset.
    pub beta: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub split: Split,
    pub frame: Frame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpeakerEntry {
    id: SpeakerId,
    seen: bool,
    latent: SpeakerLatent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitCount {
    speaker: SpeakerId,
    split: Split,
    frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: GenConfig,
    base: BaseFunction,
    speakers: Vec<SpeakerEntry>,
    counts: Vec<SplitCount>,
    frames_file: String,
    frames_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerDataset {
    pub config: GenConfig,
    pub base: BaseFunction,
    pub latents: BTreeMap<SpeakerId, SpeakerLatent>,
    pub seen: Vec<SpeakerId>,
    pub unseen: Vec<SpeakerId>,
    /// Grouped by speaker, then split, in generation order.
    pub records: Vec<Record>,
}

/// Draws the dataset described by `cfg`. The result depends only on `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<SpeakerDataset> {
    cfg.validate()?;
    let base = BaseFunction::draw(cfg.input_dim, cfg.output_dim, &mut Rng::derived(cfg.seed, 0));
    let mut latent_rng = Rng::derived(cfg.seed, 1);
    let (seen, unseen) = (cfg.seen_speakers(), cfg.unseen_speakers());
    let mut latents = BTreeMap::new();
    for &id in seen.iter().chain(&unseen) {
        let log_alpha = Vector::gaussian(cfg.output_dim, LOG_ALPHA_STD, &mut latent_rng);
        let beta = Vector::gaussian(cfg.output_dim, BETA_STD, &mut latent_rng);
        let latent = SpeakerLatent {
            alpha: match cfg.mode {
                VariationMode::Bias => Vector::ones(cfg.output_dim),
                _ => log_alpha.map(f64::exp),
            },
            beta: match cfg.mode {
                VariationMode::Scale => Vector::zeros(cfg.output_dim),
                _ => beta,
            },
        };
        latents.insert(id, latent);
    }

    let mut records = Vec::new();
    for &id in seen.iter().chain(&unseen) {
        let mut rng = Rng::derived(cfg.seed, 2 + u64::from(id.0));
        let latent = &latents[&id];
        let splits = if seen.contains(&id) {
            [(Split::Train, cfg.train_frames), (Split::Valid, cfg.valid_frames), (Split::Test, cfg.test_frames)]
        } else {
            [(Split::Adapt, cfg.adapt_frames), (Split::Valid, cfg.valid_frames), (Split::Test, cfg.test_frames)]
        };
        for (split, count) in splits {
            for _ in 0..count {
                let x = Vector::from_vec((0..cfg.input_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect())?;
                let clean = latent.alpha.hadamard(&base.eval(&x)?)?.add(&latent.beta)?;
                let noise = Vector::gaussian(cfg.output_dim, 1.0, &mut rng).scale(cfg.noise_sigma);
                let y = clean.add(&noise)?;
                records.push(Record {
                    split,
                    frame: Frame { speaker: id, x, y },
                });
            }
        }
    }
    Ok(SpeakerDataset {
        config: cfg.clone(),
        base,
        latents,
        seen,
        unseen,
        records,
    })
}

impl SpeakerDataset {
    /// Frames of `split` for the given speakers, in stored order.
    pub fn frames(&self, split: Split, speakers: &[SpeakerId]) -> Vec<Frame> {
        self.records
            .iter()
            .filter(|r| r.split == split && speakers.contains(&r.frame.speaker))
            .map(|r| r.frame.clone())
            .collect()
    }

    pub fn seen_frames(&self, split: Split) -> Vec<Frame> {
        self.frames(split, &self.seen)
    }

    pub fn speaker_frames(&self, speaker: SpeakerId, split: Split) -> Vec<Frame> {
        self.frames(split, &[speaker])
    }

    /// The first `count` adaptation frames of an unseen speaker, so smaller
    /// adaptation sets are prefixes of larger ones.
    pub fn adaptation_frames(&self, speaker: SpeakerId, count: usize) -> Result<Vec<Frame>> {
        let all = self.speaker_frames(speaker, Split::Adapt);
        if all.is_empty() {
            return Err(Error::InvalidConfig(format!("{speaker} has no adaptation data")));
        }
        if count > all.len() {
            return Err(Error::InvalidConfig(format!(
                "{count} adaptation frames requested for {speaker}, only {} available",
                all.len()
            )));
        }
        Ok(all[..count].to_vec())
    }

    /// Noise-free target: what a predictor that knows `g` and the latents outputs.
    pub fn oracle_output(&self, x: &Vector, speaker: SpeakerId) -> Result<Vector> {
        let latent = self.latents.get(&speaker).ok_or(Error::UnknownSpeaker(speaker))?;
        latent.alpha.hadamard(&self.base.eval(x)?)?.add(&latent.beta)
    }

    /// Frame table as written to disk.
    pub fn frames_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::parse(FRAMES_FILE, e);
        let mut header = vec!["speaker".to_string(), "split".to_string()];
        header.extend((0..self.config.input_dim).map(|i| format!("x{i}")));
        header.extend((0..self.config.output_dim).map(|i| format!("y{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![r.frame.speaker.0.to_string(), r.split.name().to_string()];
            // 17 significant digits reproduce every f64 exactly.
            row.extend(r.frame.x.iter().chain(r.frame.y.iter()).map(|v| format!("{v:.16e}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::parse(FRAMES_FILE, e))
    }

    /// Hex SHA-256 of the frame table.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.frames_csv()?)))
    }

    pub fn split_counts(&self) -> BTreeMap<(SpeakerId, Split), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry((r.frame.speaker, r.split)).or_insert(0) += 1;
        }
        counts
    }

    /// Writes `metadata.json` and `frames.csv` into `dir`, refusing to
    /// replace existing files. Returns the content hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (meta_path, frames_path) = (dir.join(METADATA_FILE), dir.join(FRAMES_FILE));
        for p in [&meta_path, &frames_path] {
            if p.exists() {
                return Err(Error::WouldOverwrite(p.clone()));
            }
        }
        let csv = self.frames_csv()?;
        let hash = hex::encode(Sha256::digest(&csv));
        let meta = Metadata {
            config: self.config.clone(),
            base: self.base.clone(),
            speakers: self
                .latents
                .iter()
                .map(|(&id, latent)| SpeakerEntry {
                    id,
                    seen: self.seen.contains(&id),
                    latent: latent.clone(),
                })
                .collect(),
            counts: self
                .split_counts()
                .into_iter()
                .map(|((speaker, split), frames)| SplitCount { speaker, split, frames })
                .collect(),
            frames_file: FRAMES_FILE.into(),
            frames_sha256: hash.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::parse(&meta_path, e))?;
        std::fs::write(&frames_path, csv).map_err(|e| Error::io(&frames_path, e))?;
        std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        Ok(hash)
    }

    /// Reads a dataset written by [`SpeakerDataset::save`], checking the
    /// frame table against the recorded hash and counts.
    pub fn load(dir: &Path) -> Result<SpeakerDataset> {
        let meta_path = dir.join(METADATA_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Metadata = serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e))?;
        meta.config.validate()?;
        let frames_path: PathBuf = dir.join(&meta.frames_file);
        let bytes = std::fs::read(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
        if hex::encode(Sha256::digest(&bytes)) != meta.frames_sha256 {
            return Err(Error::parse(&frames_path, "content hash does not match metadata"));
        }
        let records = parse_frames(&bytes, &meta.config, &frames_path)?;
        let mut seen = Vec::new();
        let mut unseen = Vec::new();
        let mut latents = BTreeMap::new();
        for s in meta.speakers {
            if s.seen {
                seen.push(s.id);
            } else {
                unseen.push(s.id);
            }
            latents.insert(s.id, s.latent);
        }
        let data = SpeakerDataset {
            config: meta.config,
            base: meta.base,
            latents,
            seen,
            unseen,
            records,
        };
        let expected: BTreeMap<_, _> = meta.counts.iter().map(|c| ((c.speaker, c.split), c.frames)).collect();
        if data.split_counts() != expected {
            return Err(Error::parse(&frames_path, "frame counts do not match metadata"));
        }
        Ok(data)
    }
}

fn parse_frames(bytes: &[u8], cfg: &GenConfig, path: &Path) -> Result<Vec<Record>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let width = 2 + cfg.input_dim + cfg.output_dim;
    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        let bad = |what: String| Error::parse(path, format!("row {}: {what}", line + 1));
        if row.len() != width {
            return Err(bad(format!("expected {width} columns, found {}", row.len())));
        }
        let speaker = SpeakerId(row[0].parse().map_err(|e| bad(format!("speaker: {e}")))?);
        let split: Split = row[1].parse().map_err(bad)?;
        let values = row
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        let (x, y) = values.split_at(cfg.input_dim);
        records.push(Record {
            split,
            frame: Frame {
                speaker,
                x: Vector::from_vec(x.to_vec()).map_err(|e| bad(e.to_string()))?,
                y: Vector::from_vec(y.to_vec()).map_err(|e| bad(e.to_string()))?,
            },
        });
    }
    Ok(records)
}
