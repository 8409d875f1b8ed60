use std::collections::BTreeMap;
use std::fmt;

use super::SpeakerId;

/// Which partition a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    /// Layer weights and biases common to all speakers.
    Shared,
    /// Speaker-independent projections: `W_A`, `W_b`, `U`, `V`.
    Adapter,
    /// Codes, LHUC scalings and layer copies owned by one speaker.
    Speaker(SpeakerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Weight,
    Bias,
    Up,
    Down,
    ScaleProj,
    BiasProj,
    ScaleCode,
    BiasCode,
    Lhuc,
}

impl Field {
    pub fn name(self) -> &'static str {
        match self {
            Field::Weight => "weight",
            Field::Bias => "bias",
            Field::Up => "up",
            Field::Down => "down",
            Field::ScaleProj => "scale_proj",
            Field::BiasProj => "bias_proj",
            Field::ScaleCode => "scale_code",
            Field::BiasCode => "bias_code",
            Field::Lhuc => "lhuc",
        }
    }
}

/// Names one parameter array. Codes are network-wide, so their `block` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub owner: Owner,
    pub block: Option<usize>,
    pub field: Field,
}

impl ParamKey {
    pub fn new(owner: Owner, block: Option<usize>, field: Field) -> Self {
        ParamKey { owner, block, field }
    }

    pub fn is_speaker(&self) -> bool {
        matches!(self.owner, Owner::Speaker(_))
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.owner {
            Owner::Shared => f.write_str("shared")?,
            Owner::Adapter => f.write_str("adapter")?,
            Owner::Speaker(id) => write!(f, "{id}")?,
        }
        if let Some(b) = self.block {
            write!(f, ".block{b}")?;
        }
        write!(f, ".{}", self.field.name())
    }
}

/// Gradient arrays keyed like the parameters they belong to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulates `values` into the entry for `key`.
    pub fn add(&mut self, key: ParamKey, values: &[f64]) {
        match self.map.get_mut(&key) {
            Some(acc) => {
                debug_assert_eq!(acc.len(), values.len());
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += v;
                }
            }
            None => {
                self.map.insert(key, values.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (k, v) in &other.map {
            self.add(*k, v);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.map.values_mut() {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn get(&self, key: &ParamKey) -> Option<&[f64]> {
        self.map.get(key).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Vec<f64>> {
        self.map.get_mut(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &[f64])> {
        self.map.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&ParamKey) -> bool) {
        self.map.retain(|k, _| keep(k));
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
