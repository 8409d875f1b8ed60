//! Loss, optimizer, multi-speaker training and unseen-speaker adaptation.

mod gradcheck;
mod optim;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Field, Gradients, LayerSource, Network, Owner, ParamKey, SpeakerId, Strategy};
use crate::numeric::{Rng, Vector};

pub use gradcheck::{compare_gradients, gradcheck, GradcheckReport, GroupError, ParamGroup};
pub use optim::{Adam, AdamConfig};

/// One input/target pair belonging to a speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub speaker: SpeakerId,
    pub x: Vector,
    pub y: Vector,
}

/// Mean of squared differences.
pub fn mse_loss(pred: &Vector, target: &Vector) -> Result<f64> {
    let diff = pred.sub(target)?;
    Ok(diff.dot(&diff)? / diff.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_grad(pred: &Vector, target: &Vector) -> Result<Vector> {
    Ok(pred.sub(target)?.scale(2.0 / pred.len() as f64))
}

/// Mean per-frame MSE of `net` over `frames`. Frames are evaluated in
/// parallel and summed in order, so the result does not depend on thread count.
pub fn mean_loss(net: &Network, frames: &[Frame], source: LayerSource) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyData("evaluation frames"));
    }
    let losses = frames
        .par_iter()
        .map(|f| mse_loss(&net.forward_trace(&f.x, f.speaker, source)?.output, &f.y))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Accumulates the MSE gradient of one frame into `grads`. Returns the loss.
pub fn frame_gradients(net: &Network, frame: &Frame, source: LayerSource, grads: &mut Gradients) -> Result<f64> {
    let trace = net.forward_trace(&frame.x, frame.speaker, source)?;
    let loss = mse_loss(&trace.output, &frame.y)?;
    let upstream = mse_grad(&trace.output, &frame.y)?;
    net.backward(&trace, frame.speaker, source, &upstream, grads)?;
    Ok(loss)
}

fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    32
}
fn default_patience() -> usize {
    20
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default, flatten)]
    pub adam: AdamConfig,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            adam: AdamConfig::default(),
            patience: default_patience(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("moment decays must lie in [0, 1)");
        }
        if !(self.adam.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Which speaker parameters adaptation may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    /// Codes and LHUC scalings; projections and layers stay frozen.
    CodesOnly,
    /// Codes plus a speaker-specific copy of one dense layer.
    CodesAndLayer { layer: usize },
    /// Every speaker-owned parameter, including fine-tuned layer copies.
    FullFinetuneLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub selector: Selector,
}

impl AdaptConfig {
    /// The selector that adapts whatever speaker parameters `strategy` defines.
    pub fn default_for(strategy: Strategy, train: TrainConfig) -> Self {
        let selector = match strategy {
            Strategy::FullFinetune => Selector::FullFinetuneLayers,
            _ => Selector::CodesOnly,
        };
        AdaptConfig { train, selector }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Training loss before the first update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored, when validation data was given.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }

    pub fn best_valid_loss(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs.iter().find(|e| e.epoch == best)?.valid_loss
    }

    /// The same history without timings, for comparing runs.
    pub fn without_timings(&self) -> TrainHistory {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::parse("<history>", e);
        w.write_record(["epoch", "train_loss", "valid_loss", "seconds"]).map_err(csv_err)?;
        for e in &self.epochs {
            let valid = e.valid_loss.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), valid, e.seconds.to_string()])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("<history>", e))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Minibatch Adam over `train`, updating only parameters for which
/// `trainable` holds, with early stopping on `valid`.
fn fit(
    net: &mut Network,
    train: &[Frame],
    valid: &[Frame],
    cfg: &TrainConfig,
    source: LayerSource,
    trainable: impl Fn(&ParamKey) -> bool,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut history = TrainHistory {
        initial_train_loss: mean_loss(net, train, source)?,
        ..TrainHistory::default()
    };
    let mut adam = Adam::new(cfg.adam);
    let mut rng = Rng::derived(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Network)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new();
            for &i in batch {
                frame_gradients(net, &train[i], source, &mut grads)?;
            }
            grads.retain(&trainable);
            grads.scale(1.0 / batch.len() as f64);
            adam.step(net, &grads)?;
        }
        let train_loss = mean_loss(net, train, source)?;
        let valid_loss = if valid.is_empty() {
            None
        } else {
            Some(mean_loss(net, valid, source)?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(v) = valid_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, net.clone()));
                history.best_epoch = Some(epoch);
            } else if epoch - history.best_epoch.unwrap_or(0) >= cfg.patience.max(1) && epoch < cfg.epochs {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, snapshot)) = best {
        *net = snapshot;
    }
    Ok(history)
}

/// Jointly trains shared layers, adapter projections and the codes of every
/// speaker appearing in `train`. Speakers must already be registered.
///
/// Under `full_finetune`, seen speakers share the common layers during this
/// phase, and their layer copies are reset to the trained shared layers
/// afterwards.
pub fn train_multispeaker(net: &mut Network, train: &[Frame], valid: &[Frame], cfg: &TrainConfig) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::EmptyData("training frames"));
    }
    let seen: BTreeSet<SpeakerId> = train.iter().map(|f| f.speaker).collect();
    for f in train.iter().chain(valid) {
        net.speaker(f.speaker)?;
    }
    let history = fit(net, train, valid, cfg, LayerSource::Shared, |k| match k.owner {
        Owner::Shared | Owner::Adapter => true,
        Owner::Speaker(id) => seen.contains(&id) && !matches!(k.field, Field::Weight | Field::Bias),
    })?;
    if net.strategy() == Strategy::FullFinetune {
        for id in seen {
            let fresh = net.initial_speaker_params(id).layers;
            net.speaker_mut(id)?.layers.extend(fresh);
        }
    }
    Ok(history)
}

/// Registers `speaker`, then fits the parameters picked by the selector on
/// `train` (early-stopping on `valid`). Everything else in the network is
/// left bit-identical.
pub fn adapt_speaker(
    net: &mut Network,
    speaker: SpeakerId,
    train: &[Frame],
    valid: &[Frame],
    cfg: &AdaptConfig,
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::EmptyData("adaptation frames"));
    }
    if net.has_speaker(speaker) {
        return Err(Error::SpeakerExists(speaker));
    }
    if let Some(f) = train.iter().chain(valid).find(|f| f.speaker != speaker) {
        return Err(Error::InvalidConfig(format!(
            "adaptation data for {speaker} contains a frame of {}",
            f.speaker
        )));
    }
    cfg.train.validate()?;
    let strategy = net.strategy();
    let copies_allowed = match cfg.selector {
        Selector::CodesOnly => {
            if !strategy.has_codes() && strategy != Strategy::Lhuc {
                return Err(Error::InvalidConfig(format!("codes_only adaptation: {strategy} has no speaker codes")));
            }
            false
        }
        Selector::CodesAndLayer { layer } => {
            let mut probe = net.clone();
            probe.register_speaker(speaker)?;
            probe.copy_layer_for_speaker(speaker, layer)?;
            true
        }
        Selector::FullFinetuneLayers => {
            if strategy != Strategy::FullFinetune {
                return Err(Error::InvalidConfig(format!("full_finetune_layers adaptation needs full_finetune, not {strategy}")));
            }
            true
        }
    };
    net.register_speaker(speaker)?;
    if let Selector::CodesAndLayer { layer } = cfg.selector {
        net.copy_layer_for_speaker(speaker, layer)?;
    }
    fit(net, train, valid, &cfg.train, LayerSource::Speaker, |k| {
        k.owner == Owner::Speaker(speaker) && (copies_allowed || !matches!(k.field, Field::Weight | Field::Bias))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::model::{build_network, Injection, InjectionMode, NetworkConfig};

    fn v(data: &[f64]) -> Vector {
        Vector::from_vec(data.to_vec()).unwrap()
    }

    fn net(strategy: Strategy, width: usize, seed: u64) -> Network {
        build_network(&NetworkConfig {
            input_dim: 2,
            output_dim: 2,
            width,
            depth: 2,
            hidden_activation: Activation::Sigmoid,
            strategy,
            injection: Injection::of(InjectionMode::Nonlinear),
            seed,
        })
        .unwrap()
    }

    fn frames(speaker: SpeakerId, count: usize, seed: u64) -> Vec<Frame> {
        let mut rng = Rng::new(seed);
        (0..count)
            .map(|_| {
                let x = Vector::gaussian(2, 1.0, &mut rng);
                let y = v(&[x[0] * x[1] + 0.3, (2.0 * x[0]).sin()]);
                Frame { speaker, x, y }
            })
            .collect()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&v(&[0.0, 0.0]), &v(&[2.0, 0.0])).unwrap(), 2.0);
        let (p, t) = (v(&[0.3, -1.2, 4.0]), v(&[1.0, 0.5, -2.0]));
        assert_eq!(mse_loss(&p, &t).unwrap(), mse_loss(&p.scale(-1.0), &t.scale(-1.0)).unwrap());
        assert!(mse_loss(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn memorizes_a_tiny_single_speaker_set() {
        let mut n = net(Strategy::Bias { q: 2 }, 8, 1);
        n.register_speaker(SpeakerId(0)).unwrap();
        let data = frames(SpeakerId(0), 8, 2);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let h = train_multispeaker(&mut n, &data, &[], &cfg).unwrap();
        assert_eq!(h.epochs.len(), 200);
        assert!(h.final_train_loss() < 0.1 * h.initial_train_loss, "{h:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut n = net(Strategy::Affine { p: 2, q: 2 }, 4, 3);
            n.register_speaker(SpeakerId(0)).unwrap();
            n.register_speaker(SpeakerId(1)).unwrap();
            let mut data = frames(SpeakerId(0), 12, 4);
            data.extend(frames(SpeakerId(1), 12, 5));
            let valid = frames(SpeakerId(1), 6, 6);
            let cfg = TrainConfig {
                epochs: 15,
                batch_size: 5,
                ..TrainConfig::default()
            };
            let h = train_multispeaker(&mut n, &data, &valid, &cfg).unwrap();
            (h.without_timings(), n)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn early_stopping_restores_the_best_checkpoint() {
        let mut n = net(Strategy::Bias { q: 2 }, 6, 7);
        n.register_speaker(SpeakerId(0)).unwrap();
        let train = frames(SpeakerId(0), 6, 8);
        // Validation targets unrelated to training so overfitting shows up.
        let valid: Vec<Frame> = frames(SpeakerId(0), 6, 9)
            .into_iter()
            .map(|f| Frame { y: f.y.scale(-1.0), ..f })
            .collect();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 6,
            patience: 5,
            adam: AdamConfig {
                learning_rate: 3e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let h = train_multispeaker(&mut n, &train, &valid, &cfg).unwrap();
        let best = h.best_valid_loss().unwrap();
        assert!(h.epochs.iter().all(|e| e.valid_loss.unwrap() >= best));
        let restored = mean_loss(&n, &valid, LayerSource::Shared).unwrap();
        assert_eq!(restored, best);
        if h.stopped_early {
            assert!(h.epochs.len() < 300);
        }
    }

    #[test]
    fn small_steps_do_not_increase_full_batch_loss() {
        let mut n = net(Strategy::Scale { p: 2 }, 4, 10);
        n.register_speaker(SpeakerId(0)).unwrap();
        let data = frames(SpeakerId(0), 10, 11);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 10,
            shuffle: false,
            adam: AdamConfig {
                learning_rate: 1e-4,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let h = train_multispeaker(&mut n, &data, &[], &cfg).unwrap();
        let mut prev = h.initial_train_loss;
        for e in &h.epochs {
            assert!(e.train_loss <= prev * 1.01, "epoch {}: {} after {}", e.epoch, e.train_loss, prev);
            prev = e.train_loss;
        }
    }

    #[test]
    fn training_rejects_bad_input() {
        let mut n = net(Strategy::Bias { q: 2 }, 4, 0);
        assert!(matches!(
            train_multispeaker(&mut n, &[], &[], &TrainConfig::default()),
            Err(Error::EmptyData(_))
        ));
        let data = frames(SpeakerId(3), 2, 0);
        assert!(matches!(
            train_multispeaker(&mut n, &data, &[], &TrainConfig::default()),
            Err(Error::UnknownSpeaker(SpeakerId(3)))
        ));
    }

    fn snapshot_except(net: &Network, speaker: SpeakerId) -> Vec<(ParamKey, Vec<u64>)> {
        let mut keys = net.param_keys(None);
        for id in net.speaker_ids().filter(|&id| id != speaker) {
            keys.extend(net.speaker_keys(id));
        }
        keys.into_iter()
            .map(|k| (k, net.param(&k).unwrap().iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn codes_only_adaptation_freezes_everything_else() {
        for strategy in [Strategy::Affine { p: 2, q: 2 }, Strategy::Lhuc, Strategy::Bottle { p: 2, q: 2, n: 2 }] {
            let mut n = net(strategy, 4, 12);
            n.register_speaker(SpeakerId(0)).unwrap();
            let before = snapshot_except(&n, SpeakerId(5));
            let new = SpeakerId(5);
            let cfg = AdaptConfig::default_for(strategy, TrainConfig { epochs: 10, batch_size: 3, ..TrainConfig::default() });
            let h = adapt_speaker(&mut n, new, &frames(new, 9, 13), &frames(new, 3, 14), &cfg).unwrap();
            assert!(!h.epochs.is_empty());
            assert_eq!(snapshot_except(&n, new), before, "{strategy}");
            assert_ne!(n.speaker(new).unwrap(), &n.initial_speaker_params(new), "{strategy}");
        }
    }

    #[test]
    fn zero_epoch_adaptation_returns_the_initial_code() {
        let mut n = net(Strategy::Scale { p: 3 }, 4, 12);
        let id = SpeakerId(2);
        let cfg = AdaptConfig::default_for(n.strategy(), TrainConfig { epochs: 0, ..TrainConfig::default() });
        let h = adapt_speaker(&mut n, id, &frames(id, 4, 1), &[], &cfg).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(n.speaker(id).unwrap(), &n.initial_speaker_params(id));
        assert_eq!(n.speaker_ids().collect::<Vec<_>>(), vec![id]);
    }

    #[test]
    fn adaptation_rejects_bad_requests() {
        let mut n = net(Strategy::Bias { q: 2 }, 4, 12);
        n.register_speaker(SpeakerId(0)).unwrap();
        let cfg = AdaptConfig::default_for(n.strategy(), TrainConfig::default());
        let id = SpeakerId(1);
        assert!(matches!(adapt_speaker(&mut n, id, &[], &[], &cfg), Err(Error::EmptyData(_))));
        assert!(matches!(
            adapt_speaker(&mut n, SpeakerId(0), &frames(SpeakerId(0), 2, 0), &[], &cfg),
            Err(Error::SpeakerExists(_))
        ));
        assert!(adapt_speaker(&mut n, id, &frames(SpeakerId(0), 2, 0), &[], &cfg).is_err());
        let finetune = AdaptConfig {
            selector: Selector::FullFinetuneLayers,
            ..cfg.clone()
        };
        assert!(adapt_speaker(&mut n, id, &frames(id, 2, 0), &[], &finetune).is_err());
        let out_of_range = AdaptConfig {
            selector: Selector::CodesAndLayer { layer: 9 },
            ..cfg
        };
        assert!(adapt_speaker(&mut n, id, &frames(id, 2, 0), &[], &out_of_range).is_err());
        assert!(!n.has_speaker(id));
    }

    #[test]
    fn layer_selector_trains_only_the_copy() {
        let mut n = net(Strategy::Bias { q: 2 }, 4, 15);
        let shared = snapshot_except(&n, SpeakerId(1));
        let id = SpeakerId(1);
        let cfg = AdaptConfig {
            train: TrainConfig { epochs: 5, batch_size: 2, ..TrainConfig::default() },
            selector: Selector::CodesAndLayer { layer: 1 },
        };
        adapt_speaker(&mut n, id, &frames(id, 6, 2), &[], &cfg).unwrap();
        assert_eq!(snapshot_except(&n, id), shared);
        let sp = n.speaker(id).unwrap();
        assert_eq!(sp.layers.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_ne!(&sp.layers[&1], n.blocks()[1].core.as_dense().unwrap());
    }

    #[test]
    fn full_finetune_adapts_layer_copies() {
        let mut n = net(Strategy::FullFinetune, 4, 16);
        n.register_speaker(SpeakerId(0)).unwrap();
        let data = frames(SpeakerId(0), 8, 3);
        train_multispeaker(&mut n, &data, &[], &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
        // Seen speakers' copies track the trained shared layers.
        let sp = n.speaker(SpeakerId(0)).unwrap();
        assert_eq!(&sp.layers[&0], n.blocks()[0].core.as_dense().unwrap());

        let id = SpeakerId(1);
        let cfg = AdaptConfig::default_for(n.strategy(), TrainConfig { epochs: 5, batch_size: 2, ..TrainConfig::default() });
        let h = adapt_speaker(&mut n, id, &frames(id, 6, 4), &[], &cfg).unwrap();
        assert!(h.final_train_loss() < h.initial_train_loss);
        assert_ne!(&n.speaker(id).unwrap().layers[&0], n.blocks()[0].core.as_dense().unwrap());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let h = TrainHistory {
            initial_train_loss: 1.0,
            epochs: vec![
                EpochRecord { epoch: 1, train_loss: 0.5, valid_loss: Some(0.6), seconds: 0.1 },
                EpochRecord { epoch: 2, train_loss: 0.25, valid_loss: None, seconds: 0.1 },
            ],
            best_epoch: Some(1),
            stopped_early: false,
        };
        let csv = h.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines, ["epoch,train_loss,valid_loss,seconds", "1,0.5,0.6,0.1", "2,0.25,,0.1"]);
    }
}
