use std::fmt;

use serde::{Deserialize, Serialize};

use super::{frame_gradients, mse_loss, Frame};
use crate::error::Result;
use crate::model::{Gradients, LayerSource, Network, Owner, ParamKey};
use crate::numeric::{finite_diff_grad, relative_error_with_floor, Vector, REL_ERR_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Layer weights and biases.
    Shared,
    /// Speaker-independent projections.
    Adapters,
    /// Codes, LHUC scalings and layer copies of the checked speaker.
    Speaker,
}

impl ParamGroup {
    pub fn of(key: &ParamKey) -> Self {
        match key.owner {
            Owner::Shared => ParamGroup::Shared,
            Owner::Adapter => ParamGroup::Adapters,
            Owner::Speaker(_) => ParamGroup::Speaker,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Shared => "shared",
            ParamGroup::Adapters => "adapters",
            ParamGroup::Speaker => "speaker",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: ParamGroup,
    /// Number of scalar parameters compared.
    pub entries: usize,
    pub max_rel_error: f64,
    /// Parameter and index where the largest error occurred.
    pub worst: Option<String>,
}

/// Largest relative error between analytic and finite-difference gradients,
/// per parameter group present in the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance
    }

    pub fn group(&self, group: ParamGroup) -> Option<&GroupError> {
        self.groups.iter().find(|g| g.group == group)
    }
}

/// Checks the backpropagated gradient of the frame's MSE against central
/// finite differences for every parameter the frame's speaker sees.
pub fn gradcheck(net: &Network, frame: &Frame, eps: f64) -> Result<GradcheckReport> {
    let mut analytic = Gradients::new();
    frame_gradients(net, frame, LayerSource::Speaker, &mut analytic)?;
    compare_gradients(net, frame, &analytic, eps)
}

/// Compares `analytic` (missing entries count as zero) with finite
/// differences of the frame's MSE.
///
/// Rounding noise in a central difference is proportional to the loss, so
/// the relative-error floor is `REL_ERR_FLOOR * max(1, loss)`.
pub fn compare_gradients(net: &Network, frame: &Frame, analytic: &Gradients, eps: f64) -> Result<GradcheckReport> {
    let floor = REL_ERR_FLOOR * mse_loss(&net.forward(&frame.x, frame.speaker)?, &frame.y)?.max(1.0);
    let mut probe = net.clone();
    let mut groups: Vec<GroupError> = Vec::new();
    for key in net.param_keys(Some(frame.speaker)) {
        let at = Vector::from_vec(net.param(&key).expect("listed key exists").to_vec())?;
        let numeric = finite_diff_grad(
            |v| {
                probe.param_mut(&key).expect("listed key exists").copy_from_slice(v.as_slice());
                probe
                    .forward(&frame.x, frame.speaker)
                    .and_then(|out| mse_loss(&out, &frame.y))
                    .unwrap_or(f64::NAN)
            },
            &at,
            eps,
        )?;
        probe.param_mut(&key).expect("listed key exists").copy_from_slice(at.as_slice());

        let group = ParamGroup::of(&key);
        let idx = match groups.iter().position(|g| g.group == group) {
            Some(i) => i,
            None => {
                groups.push(GroupError {
                    group,
                    entries: 0,
                    max_rel_error: 0.0,
                    worst: None,
                });
                groups.len() - 1
            }
        };
        let entry = &mut groups[idx];
        let exact = analytic.get(&key);
        for (i, &fd) in numeric.iter().enumerate() {
            let a = exact.map_or(0.0, |g| g[i]);
            let err = relative_error_with_floor(a, fd, floor);
            entry.entries += 1;
            if err > entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst = Some(format!("{key}[{i}]"));
            }
        }
    }
    groups.sort_by_key(|g| g.group);
    Ok(GradcheckReport { groups })
}
