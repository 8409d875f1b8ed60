use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Field, Gradients, Owner, ParamKey};
use super::{InjectionMode, NetworkConfig, SpeakerId, Strategy};
use crate::error::{Error, Result};
use crate::layers::{
    bias_from_code, fold_lhuc, layer_backward, scaling_from_code, Activation, BiasAdapter, BottleneckLayer,
    DenseLayer, LayerCache, LayerGrads, LayerRef, ScalingAdapter, SpeakerCode,
};
use crate::numeric::{Rng, Vector};

const STRUCTURE_STREAM: u64 = 0;
const SPEAKER_STREAM_BASE: u64 = 1 << 32;
const DOC_FORMAT: &str = "spkadapt.network";
const DOC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Core {
    Dense(DenseLayer),
    Bottleneck(BottleneckLayer),
}

impl Core {
    pub fn in_dim(&self) -> usize {
        match self {
            Core::Dense(l) => l.in_dim(),
            Core::Bottleneck(b) => b.down.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Core::Dense(l) => l.out_dim(),
            Core::Bottleneck(b) => b.width(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Core::Dense(l) => l.activation,
            Core::Bottleneck(b) => b.activation,
        }
    }

    pub fn as_dense(&self) -> Option<&DenseLayer> {
        match self {
            Core::Dense(l) => Some(l),
            Core::Bottleneck(_) => None,
        }
    }
}

/// One layer of the stack plus the speaker machinery attached to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub core: Core,
    #[serde(default)]
    pub scaling: Option<ScalingAdapter>,
    #[serde(default)]
    pub bias: Option<BiasAdapter>,
    /// Speakers carry a post-activation scaling vector for this block.
    #[serde(default)]
    pub lhuc: bool,
    /// Speakers get their own copy of this layer on registration.
    #[serde(default)]
    pub finetune: bool,
}

impl Block {
    fn plain(core: Core) -> Self {
        Block {
            core,
            scaling: None,
            bias: None,
            lhuc: false,
            finetune: false,
        }
    }

    fn is_adapted(&self) -> bool {
        self.scaling.is_some() || self.bias.is_some() || self.lhuc || self.finetune
    }
}

/// Everything one speaker owns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    #[serde(default)]
    pub code: Option<SpeakerCode>,
    /// LHUC scaling per block index.
    #[serde(default)]
    pub lhuc: BTreeMap<usize, Vector>,
    /// Speaker-specific replacement layers per block index.
    #[serde(default)]
    pub layers: BTreeMap<usize, DenseLayer>,
}

impl SpeakerParams {
    pub fn param_count(&self) -> usize {
        self.code.as_ref().map_or(0, SpeakerCode::param_count)
            + self.lhuc.values().map(Vector::len).sum::<usize>()
            + self.layers.values().map(DenseLayer::param_count).sum::<usize>()
    }
}

/// Whether a forward pass uses a speaker's layer copies or the shared layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSource {
    Speaker,
    Shared,
}

/// Output of a forward pass with per-layer caches for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub output: Vector,
    pub caches: Vec<LayerCache>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub shared: usize,
    pub adapters: usize,
    pub per_speaker: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.shared + self.adapters + self.per_speaker
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

/// Hidden layers, an optional linear bottleneck layer (bottle in linear
/// mode), then the linear output layer.
fn layout(cfg: &NetworkConfig) -> Vec<Shape> {
    let mut shapes: Vec<Shape> = (0..cfg.depth)
        .map(|i| Shape {
            in_dim: if i == 0 { cfg.input_dim } else { cfg.width },
            out_dim: cfg.width,
            activation: cfg.hidden_activation,
        })
        .collect();
    if matches!(cfg.strategy, Strategy::Bottle { .. }) && cfg.injection.mode == InjectionMode::Linear {
        shapes.push(Shape {
            in_dim: cfg.width,
            out_dim: cfg.width,
            activation: Activation::Linear,
        });
    }
    shapes.push(Shape {
        in_dim: cfg.width,
        out_dim: cfg.output_dim,
        activation: Activation::Linear,
    });
    shapes
}

#[derive(Debug, Default)]
struct Placement {
    scale: Vec<usize>,
    bias: Vec<usize>,
    lhuc: Vec<usize>,
    finetune: Vec<usize>,
    bottleneck: Vec<usize>,
}

fn resolve_placement(cfg: &NetworkConfig, shapes: &[Shape]) -> Result<Placement> {
    let n = shapes.len();
    let output = n - 1;
    let linear_from = (0..n)
        .rev()
        .take_while(|&i| shapes[i].activation == Activation::Linear)
        .last()
        .unwrap_or(output);
    let mode = cfg.injection.mode;
    let square = |i: usize| shapes[i].in_dim == shapes[i].out_dim;

    let explicit = cfg.injection.layers.clone();
    if let Some(layers) = &explicit {
        if let Some(&bad) = layers.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidConfig(format!("injection layer {bad} out of range (network has {n} layers)")));
        }
        let mut sorted = layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != layers.len() {
            return Err(Error::InvalidConfig("duplicate injection layer".into()));
        }
    }
    let check_linear = |sites: &[usize]| -> Result<()> {
        if mode == InjectionMode::Linear {
            if let Some(&bad) = sites.iter().find(|&&i| i < linear_from) {
                return Err(Error::InvalidConfig(format!(
                    "linear injection at layer {bad} is followed by nonlinear layers"
                )));
            }
        }
        Ok(())
    };

    let default_sites = |filter_square: bool| -> Vec<usize> {
        match mode {
            InjectionMode::Nonlinear => (0..cfg.depth).filter(|&i| !filter_square || square(i)).collect(),
            InjectionMode::Linear if filter_square => vec![cfg.depth],
            InjectionMode::Linear => vec![output],
        }
    };

    let mut p = Placement::default();
    match cfg.strategy {
        Strategy::Vanilla => {}
        Strategy::Level { .. } => {
            let (b, s) = match explicit.as_deref() {
                Some(&[b, s]) => (b, s),
                Some(_) => {
                    return Err(Error::InvalidConfig(
                        "level injection takes exactly [bias_layer, scale_layer]".into(),
                    ))
                }
                None => match mode {
                    InjectionMode::Nonlinear => {
                        let b = cfg.depth.div_ceil(2) - 1;
                        (b, b + 1)
                    }
                    InjectionMode::Linear => (cfg.depth - 1, output),
                },
            };
            check_linear(&[s])?;
            p.bias.push(b);
            p.scale.push(s);
        }
        Strategy::Bottle { .. } => {
            let sites = explicit.unwrap_or_else(|| default_sites(true));
            if let Some(&bad) = sites.iter().find(|&&i| !square(i)) {
                return Err(Error::InvalidConfig(format!(
                    "bottleneck residual at layer {bad} needs input width {} to equal output width {}",
                    shapes[bad].in_dim, shapes[bad].out_dim
                )));
            }
            check_linear(&sites)?;
            p.bottleneck = sites.clone();
            p.scale = sites.clone();
            p.bias = sites;
        }
        strategy => {
            let sites = explicit.unwrap_or_else(|| default_sites(false));
            check_linear(&sites)?;
            match strategy {
                Strategy::Bias { .. } => p.bias = sites,
                Strategy::Scale { .. } => p.scale = sites,
                Strategy::Affine { .. } => {
                    p.scale = sites.clone();
                    p.bias = sites;
                }
                Strategy::Lhuc => p.lhuc = sites,
                Strategy::FullFinetune => p.finetune = sites,
                _ => unreachable!(),
            }
        }
    }
    if cfg.strategy != Strategy::Vanilla
        && p.scale.is_empty()
        && p.bias.is_empty()
        && p.lhuc.is_empty()
        && p.finetune.is_empty()
    {
        return Err(Error::InvalidConfig(format!("{} strategy has no injection site", cfg.strategy)));
    }
    Ok(p)
}

/// Deterministically builds a network from its configuration and seed.
pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    cfg.validate()?;
    let shapes = layout(cfg);
    let placement = resolve_placement(cfg, &shapes)?;
    let mut rng = Rng::derived(cfg.seed, STRUCTURE_STREAM);
    let blocks = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let core = match cfg.strategy {
                Strategy::Bottle { n, .. } if placement.bottleneck.contains(&i) => {
                    Core::Bottleneck(BottleneckLayer::init(s.out_dim, n, s.activation, &mut rng))
                }
                _ => Core::Dense(DenseLayer::init(s.in_dim, s.out_dim, s.activation, &mut rng)),
            };
            let mut block = Block::plain(core);
            if placement.scale.contains(&i) {
                let p = cfg.strategy.scale_len().expect("scale placement implies a scaling code");
                let rows = match cfg.strategy {
                    Strategy::Bottle { n, .. } => n,
                    _ => s.out_dim,
                };
                block.scaling = Some(ScalingAdapter::init(rows, p, &mut rng));
            }
            if placement.bias.contains(&i) {
                let q = cfg.strategy.bias_len().expect("bias placement implies a bias code");
                block.bias = Some(BiasAdapter::init(s.out_dim, q, &mut rng));
            }
            block.lhuc = placement.lhuc.contains(&i);
            block.finetune = placement.finetune.contains(&i);
            block
        })
        .collect();
    Ok(Network {
        config: cfg.clone(),
        blocks,
        speakers: BTreeMap::new(),
    })
}

/// A layer stack with per-layer speaker adapters and the speaker registry.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    blocks: Vec<Block>,
    speakers: BTreeMap<SpeakerId, SpeakerParams>,
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Direct access to a block's parameters. Shapes must be preserved.
    pub fn block_mut(&mut self, index: usize) -> Option<&mut Block> {
        self.blocks.get_mut(index)
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].core.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.blocks[self.blocks.len() - 1].core.out_dim()
    }

    /// Indices of blocks carrying any speaker-specific machinery.
    pub fn injected_layers(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&i| self.blocks[i].is_adapted()).collect()
    }

    pub fn speaker_ids(&self) -> impl Iterator<Item = SpeakerId> + '_ {
        self.speakers.keys().copied()
    }

    pub fn has_speaker(&self, id: SpeakerId) -> bool {
        self.speakers.contains_key(&id)
    }

    pub fn speaker(&self, id: SpeakerId) -> Result<&SpeakerParams> {
        self.speakers.get(&id).ok_or(Error::UnknownSpeaker(id))
    }

    pub fn speaker_mut(&mut self, id: SpeakerId) -> Result<&mut SpeakerParams> {
        self.speakers.get_mut(&id).ok_or(Error::UnknownSpeaker(id))
    }

    /// Speaker parameters as a fresh registration would create them. The
    /// draw depends only on `(seed, id)`, not on registration order.
    pub fn initial_speaker_params(&self, id: SpeakerId) -> SpeakerParams {
        let mut rng = Rng::derived(self.config.seed, SPEAKER_STREAM_BASE + u64::from(id.0));
        let strategy = self.config.strategy;
        let code = SpeakerCode::init(strategy.scale_len(), strategy.bias_len(), &mut rng);
        let mut params = SpeakerParams {
            code,
            ..SpeakerParams::default()
        };
        for (i, block) in self.blocks.iter().enumerate() {
            if block.lhuc {
                params.lhuc.insert(i, Vector::ones(block.core.out_dim()));
            }
            if block.finetune {
                if let Core::Dense(l) = &block.core {
                    params.layers.insert(i, l.clone());
                }
            }
        }
        params
    }

    /// Registers a speaker with freshly initialised codes, LHUC scalings at
    /// identity, and copies of any fine-tuned layers.
    pub fn register_speaker(&mut self, id: SpeakerId) -> Result<()> {
        if self.speakers.contains_key(&id) {
            return Err(Error::SpeakerExists(id));
        }
        let params = self.initial_speaker_params(id);
        self.speakers.insert(id, params);
        Ok(())
    }

    pub fn insert_speaker(&mut self, id: SpeakerId, params: SpeakerParams) -> Result<()> {
        if self.speakers.contains_key(&id) {
            return Err(Error::SpeakerExists(id));
        }
        self.check_speaker_params(id, &params)?;
        self.speakers.insert(id, params);
        Ok(())
    }

    pub fn remove_speaker(&mut self, id: SpeakerId) -> Result<SpeakerParams> {
        self.speakers.remove(&id).ok_or(Error::UnknownSpeaker(id))
    }

    /// Gives a speaker its own copy of a dense block (copy-on-register for
    /// that block only).
    pub fn copy_layer_for_speaker(&mut self, id: SpeakerId, block: usize) -> Result<()> {
        let layer = match self.blocks.get(block).map(|b| &b.core) {
            Some(Core::Dense(l)) => l.clone(),
            Some(Core::Bottleneck(_)) => {
                return Err(Error::InvalidConfig(format!("block {block} is a bottleneck layer and cannot be copied")))
            }
            None => return Err(Error::InvalidConfig(format!("block {block} does not exist"))),
        };
        self.speaker_mut(id)?.layers.entry(block).or_insert(layer);
        Ok(())
    }

    fn layer_ref<'a>(
        &'a self,
        i: usize,
        id: SpeakerId,
        sp: &'a SpeakerParams,
        source: LayerSource,
    ) -> Result<(LayerRef<'a>, bool)> {
        let block = &self.blocks[i];
        let missing = |component| Error::MissingCode {
            speaker: id.to_string(),
            component,
        };
        match &block.core {
            Core::Dense(shared) => {
                let copy = match source {
                    LayerSource::Speaker => sp.layers.get(&i),
                    LayerSource::Shared => None,
                };
                let layer = copy.unwrap_or(shared);
                let r = if block.lhuc {
                    let scale = sp.lhuc.get(&i).ok_or_else(|| missing("lhuc"))?;
                    LayerRef::Lhuc { layer, scale }
                } else if block.scaling.is_some() || block.bias.is_some() {
                    LayerRef::Factored {
                        layer,
                        scaling: block.scaling.as_ref(),
                        bias: block.bias.as_ref(),
                        code: sp.code.as_ref().ok_or_else(|| missing("code"))?,
                    }
                } else {
                    LayerRef::Dense(layer)
                };
                Ok((r, copy.is_some()))
            }
            Core::Bottleneck(layer) => Ok((
                LayerRef::Bottleneck {
                    layer,
                    scaling: block
                        .scaling
                        .as_ref()
                        .ok_or(Error::InvalidConfig(format!("bottleneck block {i} lacks a scaling adapter")))?,
                    bias: block.bias.as_ref(),
                    code: sp.code.as_ref().ok_or_else(|| missing("code"))?,
                },
                false,
            )),
        }
    }

    pub fn forward(&self, x: &Vector, id: SpeakerId) -> Result<Vector> {
        Ok(self.forward_trace(x, id, LayerSource::Speaker)?.output)
    }

    pub fn forward_trace(&self, x: &Vector, id: SpeakerId, source: LayerSource) -> Result<Trace> {
        let sp = self.speaker(id)?;
        if x.len() != self.input_dim() {
            return Err(Error::dims("network forward", format!("input_dim {}", self.input_dim()), format!("x len {}", x.len())));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for i in 0..self.blocks.len() {
            let (layer, _) = self.layer_ref(i, id, sp, source)?;
            let (out, cache) = layer.forward(&h)?;
            caches.push(cache);
            h = out;
        }
        Ok(Trace { output: h, caches })
    }

    /// Backpropagates `upstream = ∂objective/∂output` through a trace made by
    /// [`Network::forward_trace`] with the same speaker and source,
    /// accumulating parameter gradients into `grads`. Returns `∂objective/∂x`.
    pub fn backward(
        &self,
        trace: &Trace,
        id: SpeakerId,
        source: LayerSource,
        upstream: &Vector,
        grads: &mut Gradients,
    ) -> Result<Vector> {
        if trace.caches.len() != self.blocks.len() {
            return Err(Error::CacheMismatch("trace length differs from network depth"));
        }
        let sp = self.speaker(id)?;
        let mut up = upstream.clone();
        for i in (0..self.blocks.len()).rev() {
            let (layer, used_copy) = self.layer_ref(i, id, sp, source)?;
            let g = layer_backward(layer, &trace.caches[i], &up)?;
            up = self.collect_grads(i, id, used_copy, g, grads);
        }
        Ok(up)
    }

    fn collect_grads(&self, i: usize, id: SpeakerId, used_copy: bool, g: LayerGrads, grads: &mut Gradients) -> Vector {
        let core_owner = if used_copy { Owner::Speaker(id) } else { Owner::Shared };
        let blk = Some(i);
        let mut put = |owner, block, field, values: &[f64]| grads.add(ParamKey::new(owner, block, field), values);
        if let Some(w) = &g.weight {
            put(core_owner, blk, Field::Weight, w.as_slice());
        }
        if let Some(c) = &g.bias {
            put(core_owner, blk, Field::Bias, c.as_slice());
        }
        if let Some(u) = &g.up {
            put(Owner::Adapter, blk, Field::Up, u.as_slice());
        }
        if let Some(v) = &g.down {
            put(Owner::Adapter, blk, Field::Down, v.as_slice());
        }
        if let Some(p) = &g.scale_proj {
            put(Owner::Adapter, blk, Field::ScaleProj, p.as_slice());
        }
        if let Some(p) = &g.bias_proj {
            put(Owner::Adapter, blk, Field::BiasProj, p.as_slice());
        }
        if let Some(s) = &g.scale_code {
            put(Owner::Speaker(id), None, Field::ScaleCode, s.as_slice());
        }
        if let Some(s) = &g.bias_code {
            put(Owner::Speaker(id), None, Field::BiasCode, s.as_slice());
        }
        if let Some(a) = &g.lhuc {
            put(Owner::Speaker(id), blk, Field::Lhuc, a.as_slice());
        }
        g.input
    }

    /// Exact parameter counts: shared layer weights and biases, speaker-independent
    /// projections (`W_A`, `W_b`, `U`, `V`), and what one speaker owns.
    pub fn count_params(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            shared: 0,
            adapters: 0,
            per_speaker: self.config.strategy.scale_len().unwrap_or(0) + self.config.strategy.bias_len().unwrap_or(0),
        };
        for block in &self.blocks {
            match &block.core {
                Core::Dense(l) => counts.shared += l.param_count(),
                Core::Bottleneck(b) => {
                    counts.shared += b.bias.len();
                    counts.adapters += b.up.len() + b.down.len();
                }
            }
            counts.adapters += block.scaling.as_ref().map_or(0, |a| a.proj.len());
            counts.adapters += block.bias.as_ref().map_or(0, |a| a.proj.len());
            if block.lhuc {
                counts.per_speaker += block.core.out_dim();
            }
            if block.finetune {
                if let Core::Dense(l) = &block.core {
                    counts.per_speaker += l.param_count();
                }
            }
        }
        counts
    }

    /// Bakes one speaker's transformation into plain weights and biases,
    /// returning an adapter-free network with only that speaker registered.
    pub fn fold_speaker(&self, id: SpeakerId) -> Result<Network> {
        if !self.config.strategy.is_foldable() {
            return Err(Error::Unfoldable(self.config.strategy));
        }
        let sp = self.speaker(id)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let shared = block.core.as_dense().ok_or(Error::Unfoldable(self.config.strategy))?;
            let mut layer = sp.layers.get(&i).unwrap_or(shared).clone();
            if let Some(sa) = &block.scaling {
                let s_a = sp.code.as_ref().and_then(SpeakerCode::scale).ok_or(Error::MissingCode {
                    speaker: id.to_string(),
                    component: "scale",
                })?;
                layer.weight = layer.weight.scale_rows(&scaling_from_code(sa, s_a)?)?;
            }
            if let Some(ba) = &block.bias {
                let s_b = sp.code.as_ref().and_then(SpeakerCode::bias).ok_or(Error::MissingCode {
                    speaker: id.to_string(),
                    component: "bias",
                })?;
                layer.bias = layer.bias.add(&bias_from_code(ba, s_b)?)?;
            }
            layers.push(layer);
        }
        // Post-activation scalings move into the next layer's columns; on a
        // linear last layer they scale its rows instead.
        for (&i, a) in &sp.lhuc {
            if i + 1 < layers.len() {
                layers[i + 1].weight = fold_lhuc(&layers[i + 1].weight, a)?;
            } else if layers[i].activation == Activation::Linear {
                layers[i].weight = layers[i].weight.scale_rows(a)?;
                layers[i].bias = layers[i].bias.hadamard(a)?;
            } else {
                return Err(Error::Unfoldable(self.config.strategy));
            }
        }
        let mut config = self.config.clone();
        config.strategy = Strategy::Vanilla;
        config.injection.layers = None;
        let mut speakers = BTreeMap::new();
        speakers.insert(id, SpeakerParams::default());
        Ok(Network {
            config,
            blocks: layers.into_iter().map(|l| Block::plain(Core::Dense(l))).collect(),
            speakers,
        })
    }

    /// Keys of every shared and adapter parameter, followed by the keys of
    /// `speaker`'s parameters when given.
    pub fn param_keys(&self, speaker: Option<SpeakerId>) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let b = Some(i);
            match &block.core {
                Core::Dense(_) => {
                    keys.push(ParamKey::new(Owner::Shared, b, Field::Weight));
                    keys.push(ParamKey::new(Owner::Shared, b, Field::Bias));
                }
                Core::Bottleneck(_) => {
                    keys.push(ParamKey::new(Owner::Shared, b, Field::Bias));
                    keys.push(ParamKey::new(Owner::Adapter, b, Field::Up));
                    keys.push(ParamKey::new(Owner::Adapter, b, Field::Down));
                }
            }
            if block.scaling.is_some() {
                keys.push(ParamKey::new(Owner::Adapter, b, Field::ScaleProj));
            }
            if block.bias.is_some() {
                keys.push(ParamKey::new(Owner::Adapter, b, Field::BiasProj));
            }
        }
        if let Some(id) = speaker {
            keys.extend(self.speaker_keys(id));
        }
        keys
    }

    /// Keys of one speaker's parameters (empty if unregistered).
    pub fn speaker_keys(&self, id: SpeakerId) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        let Some(sp) = self.speakers.get(&id) else {
            return keys;
        };
        let owner = Owner::Speaker(id);
        if let Some(code) = &sp.code {
            if code.scale().is_some() {
                keys.push(ParamKey::new(owner, None, Field::ScaleCode));
            }
            if code.bias().is_some() {
                keys.push(ParamKey::new(owner, None, Field::BiasCode));
            }
        }
        for &i in sp.lhuc.keys() {
            keys.push(ParamKey::new(owner, Some(i), Field::Lhuc));
        }
        for &i in sp.layers.keys() {
            keys.push(ParamKey::new(owner, Some(i), Field::Weight));
            keys.push(ParamKey::new(owner, Some(i), Field::Bias));
        }
        keys
    }

    pub fn param(&self, key: &ParamKey) -> Option<&[f64]> {
        match key.owner {
            Owner::Shared | Owner::Adapter => {
                let block = self.blocks.get(key.block?)?;
                match (key.owner, &block.core, key.field) {
                    (Owner::Shared, Core::Dense(l), Field::Weight) => Some(l.weight.as_slice()),
                    (Owner::Shared, Core::Dense(l), Field::Bias) => Some(l.bias.as_slice()),
                    (Owner::Shared, Core::Bottleneck(b), Field::Bias) => Some(b.bias.as_slice()),
                    (Owner::Adapter, Core::Bottleneck(b), Field::Up) => Some(b.up.as_slice()),
                    (Owner::Adapter, Core::Bottleneck(b), Field::Down) => Some(b.down.as_slice()),
                    (Owner::Adapter, _, Field::ScaleProj) => block.scaling.as_ref().map(|a| a.proj.as_slice()),
                    (Owner::Adapter, _, Field::BiasProj) => block.bias.as_ref().map(|a| a.proj.as_slice()),
                    _ => None,
                }
            }
            Owner::Speaker(id) => {
                let sp = self.speakers.get(&id)?;
                match (key.block, key.field) {
                    (None, Field::ScaleCode) => sp.code.as_ref()?.scale().map(Vector::as_slice),
                    (None, Field::BiasCode) => sp.code.as_ref()?.bias().map(Vector::as_slice),
                    (Some(i), Field::Lhuc) => sp.lhuc.get(&i).map(Vector::as_slice),
                    (Some(i), Field::Weight) => sp.layers.get(&i).map(|l| l.weight.as_slice()),
                    (Some(i), Field::Bias) => sp.layers.get(&i).map(|l| l.bias.as_slice()),
                    _ => None,
                }
            }
        }
    }

    pub fn param_mut(&mut self, key: &ParamKey) -> Option<&mut [f64]> {
        match key.owner {
            Owner::Shared | Owner::Adapter => {
                let block = self.blocks.get_mut(key.block?)?;
                match (key.owner, &mut block.core, key.field) {
                    (Owner::Shared, Core::Dense(l), Field::Weight) => Some(l.weight.as_mut_slice()),
                    (Owner::Shared, Core::Dense(l), Field::Bias) => Some(l.bias.as_mut_slice()),
                    (Owner::Shared, Core::Bottleneck(b), Field::Bias) => Some(b.bias.as_mut_slice()),
                    (Owner::Adapter, Core::Bottleneck(b), Field::Up) => Some(b.up.as_mut_slice()),
                    (Owner::Adapter, Core::Bottleneck(b), Field::Down) => Some(b.down.as_mut_slice()),
                    (Owner::Adapter, _, Field::ScaleProj) => block.scaling.as_mut().map(|a| a.proj.as_mut_slice()),
                    (Owner::Adapter, _, Field::BiasProj) => block.bias.as_mut().map(|a| a.proj.as_mut_slice()),
                    _ => None,
                }
            }
            Owner::Speaker(id) => {
                let sp = self.speakers.get_mut(&id)?;
                match (key.block, key.field) {
                    (None, Field::ScaleCode) => sp.code.as_mut()?.scale_mut().map(Vector::as_mut_slice),
                    (None, Field::BiasCode) => sp.code.as_mut()?.bias_mut().map(Vector::as_mut_slice),
                    (Some(i), Field::Lhuc) => sp.lhuc.get_mut(&i).map(Vector::as_mut_slice),
                    (Some(i), Field::Weight) => sp.layers.get_mut(&i).map(|l| l.weight.as_mut_slice()),
                    (Some(i), Field::Bias) => sp.layers.get_mut(&i).map(|l| l.bias.as_mut_slice()),
                    _ => None,
                }
            }
        }
    }

    /// Shape consistency of the whole stack and every speaker entry.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.blocks.is_empty() {
            return bad("network has no layers".into());
        }
        if self.input_dim() != self.config.input_dim || self.output_dim() != self.config.output_dim {
            return bad("network input/output widths disagree with its config".into());
        }
        for (i, pair) in self.blocks.windows(2).enumerate() {
            if pair[0].core.out_dim() != pair[1].core.in_dim() {
                return bad(format!("layer {i} output does not feed layer {}", i + 1));
            }
        }
        let strategy = self.config.strategy;
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.core.out_dim();
            if let Core::Bottleneck(b) = &block.core {
                BottleneckLayer::new(b.up.clone(), b.down.clone(), b.bias.clone(), b.activation)?;
            }
            if let Some(sa) = &block.scaling {
                let rows = match &block.core {
                    Core::Bottleneck(b) => b.bottleneck(),
                    Core::Dense(_) => out,
                };
                if sa.width() != rows || Some(sa.code_len()) != strategy.scale_len() {
                    return bad(format!("scaling adapter shape mismatch at layer {i}"));
                }
            }
            if let Some(ba) = &block.bias {
                if ba.width() != out || Some(ba.code_len()) != strategy.bias_len() {
                    return bad(format!("bias adapter shape mismatch at layer {i}"));
                }
            }
        }
        for (&id, sp) in &self.speakers {
            self.check_speaker_params(id, sp)?;
        }
        Ok(())
    }

    fn check_speaker_params(&self, id: SpeakerId, sp: &SpeakerParams) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("{id}: {what}")));
        let strategy = self.config.strategy;
        let code_scale = sp.code.as_ref().and_then(|c| c.scale()).map(Vector::len);
        let code_bias = sp.code.as_ref().and_then(|c| c.bias()).map(Vector::len);
        if sp.code.is_some() && (code_scale != strategy.scale_len() || code_bias != strategy.bias_len()) {
            return bad("code lengths do not match the strategy");
        }
        for (&i, a) in &sp.lhuc {
            match self.blocks.get(i) {
                Some(b) if b.lhuc && b.core.out_dim() == a.len() => {}
                _ => return bad("lhuc vector does not match an lhuc layer"),
            }
        }
        for (&i, l) in &sp.layers {
            match self.blocks.get(i).and_then(|b| b.core.as_dense()) {
                Some(shared) if shared.weight.shape() == l.weight.shape() && shared.bias.len() == l.bias.len() => {}
                _ => return bad("layer copy does not match a dense layer"),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetworkDocRef {
            format: DOC_FORMAT,
            version: DOC_VERSION,
            config: &self.config,
            blocks: &self.blocks,
            speakers: self
                .speakers
                .iter()
                .map(|(&id, params)| SpeakerEntryRef { id, params })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("<network>", e))
    }

    pub fn from_json(text: &str) -> Result<Network> {
        let doc: NetworkDoc = serde_json::from_str(text).map_err(|e| Error::parse("<network>", e))?;
        if doc.format != DOC_FORMAT || doc.version != DOC_VERSION {
            return Err(Error::parse("<network>", format!("unsupported format {} v{}", doc.format, doc.version)));
        }
        let mut speakers = BTreeMap::new();
        for entry in doc.speakers {
            if speakers.insert(entry.id, entry.params).is_some() {
                return Err(Error::parse("<network>", format!("duplicate speaker {}", entry.id)));
            }
        }
        let net = Network {
            config: doc.config,
            blocks: doc.blocks,
            speakers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_json(&text).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::parse(path, reason),
            other => other,
        })
    }
}

#[derive(Serialize)]
struct NetworkDocRef<'a> {
    format: &'a str,
    version: u32,
    config: &'a NetworkConfig,
    blocks: &'a [Block],
    speakers: Vec<SpeakerEntryRef<'a>>,
}

#[derive(Serialize)]
struct SpeakerEntryRef<'a> {
    id: SpeakerId,
    params: &'a SpeakerParams,
}

#[derive(Deserialize)]
struct NetworkDoc {
    format: String,
    version: u32,
    config: NetworkConfig,
    blocks: Vec<Block>,
    speakers: Vec<SpeakerEntry>,
}

#[derive(Deserialize)]
struct SpeakerEntry {
    id: SpeakerId,
    params: SpeakerParams,
}
