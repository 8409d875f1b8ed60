//! Layer and adapter kernels.
//!
//! Every speaker transformation in the crate reduces to one of four layer
//! kinds, each with a forward pass that records a [`LayerCache`] and a shared
//! [`layer_backward`]:
//!
//! | kind       | output                                                  |
//! |------------|---------------------------------------------------------|
//! | dense      | `f(W h + c)`                                            |
//! | lhuc       | `a ∘ f(W h + c)`                                        |
//! | factored   | `f(diag(W_A s_A) (W h) + c + W_b s_b)`                  |
//! | bottleneck | `f(U diag(W_A s_A) (V h) + c + W_b s_b + h)`            |
//!
//! Diagonal scalings are always kept as vectors and applied elementwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matvec, sigmoid, Matrix, Rng, Vector};

/// Standard deviation for fresh projection entries (`W_A` beyond its first
/// column, and all of `W_b`).
pub const PROJECTION_INIT_STD: f64 = 0.01;
/// Standard deviation for fresh bias codes.
pub const BIAS_CODE_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, pre: &Vector) -> Vector {
        match self {
            Activation::Sigmoid => sigmoid(pre),
            Activation::Linear => pre.clone(),
        }
    }

    /// `f'(pre)` expressed through `y = f(pre)`.
    fn derivative_from_output(self, y: &Vector) -> Vector {
        match self {
            Activation::Sigmoid => y.map(|v| v * (1.0 - v)),
            Activation::Linear => Vector::ones(y.len()),
        }
    }
}

/// `f(W h + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::dims(
                "dense layer",
                format!("weight {}x{}", weight.rows(), weight.cols()),
                format!("bias len {}", bias.len()),
            ));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    /// `W ~ N(0, 1/fan_in)`, `c = 0`.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        DenseLayer {
            weight: Matrix::gaussian(out_dim, in_dim, std, rng),
            bias: Vector::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Feature-space affine transform `A x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmllrTransform {
    pub a: Matrix,
    pub b: Vector,
}

impl FmllrTransform {
    pub fn new(a: Matrix, b: Vector) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() != b.len() {
            return Err(Error::dims(
                "fmllr transform",
                format!("A {}x{}", a.rows(), a.cols()),
                format!("b len {}", b.len()),
            ));
        }
        Ok(FmllrTransform { a, b })
    }

    pub fn identity(dim: usize) -> Self {
        FmllrTransform {
            a: Matrix::identity(dim),
            b: Vector::zeros(dim),
        }
    }
}

pub fn fmllr_apply(t: &FmllrTransform, x: &Vector) -> Result<Vector> {
    matvec(&t.a, x)?.add(&t.b)
}

/// Projection `W_A` (m × p) from a scaling code to a diagonal scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingAdapter {
    pub proj: Matrix,
}

impl ScalingAdapter {
    /// First column all ones, remaining entries `N(0, 0.01²)`. Paired with a
    /// code initialised to `e_1`, every speaker starts at identity scaling.
    pub fn init(width: usize, code_len: usize, rng: &mut Rng) -> Self {
        let mut proj = Matrix::gaussian(width, code_len, PROJECTION_INIT_STD, rng);
        for r in 0..width {
            proj.set(r, 0, 1.0);
        }
        ScalingAdapter { proj }
    }

    pub fn width(&self) -> usize {
        self.proj.rows()
    }

    pub fn code_len(&self) -> usize {
        self.proj.cols()
    }
}

/// Projection `W_b` (m × q) from a bias code to an additive bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasAdapter {
    pub proj: Matrix,
}

impl BiasAdapter {
    pub fn init(width: usize, code_len: usize, rng: &mut Rng) -> Self {
        BiasAdapter {
            proj: Matrix::gaussian(width, code_len, PROJECTION_INIT_STD, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.proj.rows()
    }

    pub fn code_len(&self) -> usize {
        self.proj.cols()
    }
}

/// Weight factorised as `U · diag(scaling) · V` with a residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckLayer {
    /// m × n
    pub up: Matrix,
    /// n × m
    pub down: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl BottleneckLayer {
    pub fn new(up: Matrix, down: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        let (m, n) = up.shape();
        if down.rows() != n || bias.len() != m {
            return Err(Error::dims(
                "bottleneck layer",
                format!("U {}x{}, c len {}", m, n, bias.len()),
                format!("V {}x{}", down.rows(), down.cols()),
            ));
        }
        if down.cols() != m {
            return Err(Error::InvalidConfig(format!(
                "bottleneck residual needs input width {m} to equal output width, got {}",
                down.cols()
            )));
        }
        Ok(BottleneckLayer {
            up,
            down,
            bias,
            activation,
        })
    }

    /// `U ~ N(0, 1/n)`, `V ~ N(0, 1/m)`, `c = 0`.
    pub fn init(width: usize, bottleneck: usize, activation: Activation, rng: &mut Rng) -> Self {
        let up = Matrix::gaussian(width, bottleneck, (1.0 / bottleneck as f64).sqrt(), rng);
        let down = Matrix::gaussian(bottleneck, width, (1.0 / width as f64).sqrt(), rng);
        BottleneckLayer {
            up,
            down,
            bias: Vector::zeros(width),
            activation,
        }
    }

    pub fn width(&self) -> usize {
        self.up.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.up.cols()
    }
}

/// Per-speaker scaling code `s_A` and bias code `s_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodeRepr", into = "CodeRepr")]
pub struct SpeakerCode {
    scale: Option<Vector>,
    bias: Option<Vector>,
}

#[derive(Serialize, Deserialize)]
struct CodeRepr {
    scale: Option<Vector>,
    bias: Option<Vector>,
}

impl TryFrom<CodeRepr> for SpeakerCode {
    type Error = Error;

    fn try_from(r: CodeRepr) -> Result<Self> {
        SpeakerCode::new(r.scale, r.bias)
    }
}

impl From<SpeakerCode> for CodeRepr {
    fn from(c: SpeakerCode) -> Self {
        CodeRepr {
            scale: c.scale,
            bias: c.bias,
        }
    }
}

impl SpeakerCode {
    pub fn new(scale: Option<Vector>, bias: Option<Vector>) -> Result<Self> {
        if scale.is_none() && bias.is_none() {
            return Err(Error::InvalidConfig(
                "a speaker code needs a scaling or a bias component".into(),
            ));
        }
        Ok(SpeakerCode { scale, bias })
    }

    /// `s_A = e_1`, `s_b ~ N(0, 0.1²)`. Returns `None` when both lengths are absent.
    pub fn init(scale_len: Option<usize>, bias_len: Option<usize>, rng: &mut Rng) -> Option<Self> {
        let scale = scale_len.map(|p| Vector::basis(p, 0));
        let bias = bias_len.map(|q| Vector::gaussian(q, BIAS_CODE_INIT_STD, rng));
        SpeakerCode::new(scale, bias).ok()
    }

    pub fn scale(&self) -> Option<&Vector> {
        self.scale.as_ref()
    }

    pub fn bias(&self) -> Option<&Vector> {
        self.bias.as_ref()
    }

    pub fn scale_mut(&mut self) -> Option<&mut Vector> {
        self.scale.as_mut()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vector> {
        self.bias.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.scale.as_ref().map_or(0, Vector::len) + self.bias.as_ref().map_or(0, Vector::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheKind {
    Dense,
    Lhuc,
    Factored,
    Bottleneck,
}

/// Intermediate values of one forward pass, consumed by [`layer_backward`].
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub kind: CacheKind,
    pub input: Vector,
    pub pre: Vector,
    /// `f(pre)`; equals the layer output except for LHUC.
    pub activated: Vector,
    /// `W h` for factored layers, `V h` for bottleneck layers.
    pub projected: Option<Vector>,
    /// Effective diagonal scaling `W_A s_A`, when a scaling adapter is present.
    pub scaling: Option<Vector>,
}

pub fn scaling_from_code(ad: &ScalingAdapter, s_a: &Vector) -> Result<Vector> {
    matvec(&ad.proj, s_a)
}

pub fn bias_from_code(ad: &BiasAdapter, s_b: &Vector) -> Result<Vector> {
    matvec(&ad.proj, s_b)
}

fn check_input(op: &'static str, expected: usize, h: &Vector) -> Result<()> {
    if h.len() != expected {
        return Err(Error::dims(op, format!("layer input width {expected}"), format!("input len {}", h.len())));
    }
    Ok(())
}

fn finite(op: &str, v: Vector) -> Result<Vector> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

pub fn dense_forward(l: &DenseLayer, h: &Vector) -> Result<(Vector, LayerCache)> {
    check_input("dense_forward", l.in_dim(), h)?;
    let pre = matvec(&l.weight, h)?.add(&l.bias)?;
    let activated = l.activation.apply(&pre);
    let cache = LayerCache {
        kind: CacheKind::Dense,
        input: h.clone(),
        pre,
        activated: activated.clone(),
        projected: None,
        scaling: None,
    };
    Ok((activated, cache))
}

pub fn lhuc_forward(l: &DenseLayer, a: &Vector, h: &Vector) -> Result<(Vector, LayerCache)> {
    if a.len() != l.out_dim() {
        return Err(Error::dims("lhuc_forward", format!("layer width {}", l.out_dim()), format!("lhuc len {}", a.len())));
    }
    let (activated, mut cache) = dense_forward(l, h)?;
    cache.kind = CacheKind::Lhuc;
    let out = finite("lhuc_forward", a.hadamard(&activated)?)?;
    Ok((out, cache))
}

/// `W_next · diag(a)`: pushes a post-activation scaling into the next layer.
pub fn fold_lhuc(w_next: &Matrix, a: &Vector) -> Result<Matrix> {
    w_next.scale_cols(a)
}

fn code_part<'a>(component: &'static str, v: Option<&'a Vector>) -> Result<&'a Vector> {
    v.ok_or(Error::MissingCode {
        speaker: "(layer input)".into(),
        component,
    })
}

fn add_code_bias(pre: Vector, ba: Option<&BiasAdapter>, code: &SpeakerCode) -> Result<Vector> {
    match ba {
        Some(ba) => pre.add(&bias_from_code(ba, code_part("bias", code.bias())?)?),
        None => Ok(pre),
    }
}

pub fn factored_forward(
    l: &DenseLayer,
    sa: Option<&ScalingAdapter>,
    ba: Option<&BiasAdapter>,
    code: &SpeakerCode,
    h: &Vector,
) -> Result<(Vector, LayerCache)> {
    check_input("factored_forward", l.in_dim(), h)?;
    let projected = matvec(&l.weight, h)?;
    let scaling = match sa {
        Some(sa) => Some(scaling_from_code(sa, code_part("scale", code.scale())?)?),
        None => None,
    };
    let scaled = match &scaling {
        Some(s) => s.hadamard(&projected)?,
        None => projected.clone(),
    };
    let pre = add_code_bias(scaled.add(&l.bias)?, ba, code)?;
    let activated = finite("factored_forward", l.activation.apply(&pre))?;
    let cache = LayerCache {
        kind: CacheKind::Factored,
        input: h.clone(),
        pre,
        activated: activated.clone(),
        projected: Some(projected),
        scaling,
    };
    Ok((activated, cache))
}

pub fn bottleneck_forward(
    bl: &BottleneckLayer,
    sa: &ScalingAdapter,
    ba: Option<&BiasAdapter>,
    code: &SpeakerCode,
    h: &Vector,
) -> Result<(Vector, LayerCache)> {
    check_input("bottleneck_forward", bl.down.cols(), h)?;
    if sa.width() != bl.bottleneck() {
        return Err(Error::dims(
            "bottleneck_forward",
            format!("bottleneck width {}", bl.bottleneck()),
            format!("scaling adapter rows {}", sa.width()),
        ));
    }
    let projected = matvec(&bl.down, h)?;
    let scaling = scaling_from_code(sa, code_part("scale", code.scale())?)?;
    let core = matvec(&bl.up, &scaling.hadamard(&projected)?)?;
    let pre = add_code_bias(core.add(&bl.bias)?, ba, code)?.add(h)?;
    let activated = finite("bottleneck_forward", bl.activation.apply(&pre))?;
    let cache = LayerCache {
        kind: CacheKind::Bottleneck,
        input: h.clone(),
        pre,
        activated: activated.clone(),
        projected: Some(projected),
        scaling: Some(scaling),
    };
    Ok((activated, cache))
}

/// A layer together with whatever speaker state its forward pass consumes.
#[derive(Debug, Clone, Copy)]
pub enum LayerRef<'a> {
    Dense(&'a DenseLayer),
    Lhuc {
        layer: &'a DenseLayer,
        scale: &'a Vector,
    },
    Factored {
        layer: &'a DenseLayer,
        scaling: Option<&'a ScalingAdapter>,
        bias: Option<&'a BiasAdapter>,
        code: &'a SpeakerCode,
    },
    Bottleneck {
        layer: &'a BottleneckLayer,
        scaling: &'a ScalingAdapter,
        bias: Option<&'a BiasAdapter>,
        code: &'a SpeakerCode,
    },
}

impl LayerRef<'_> {
    pub fn forward(&self, h: &Vector) -> Result<(Vector, LayerCache)> {
        match *self {
            LayerRef::Dense(l) => dense_forward(l, h),
            LayerRef::Lhuc { layer, scale } => lhuc_forward(layer, scale, h),
            LayerRef::Factored {
                layer,
                scaling,
                bias,
                code,
            } => factored_forward(layer, scaling, bias, code, h),
            LayerRef::Bottleneck {
                layer,
                scaling,
                bias,
                code,
            } => bottleneck_forward(layer, scaling, bias, code, h),
        }
    }

    fn kind(&self) -> CacheKind {
        match self {
            LayerRef::Dense(_) => CacheKind::Dense,
            LayerRef::Lhuc { .. } => CacheKind::Lhuc,
            LayerRef::Factored { .. } => CacheKind::Factored,
            LayerRef::Bottleneck { .. } => CacheKind::Bottleneck,
        }
    }

    fn activation(&self) -> Activation {
        match self {
            LayerRef::Dense(l) | LayerRef::Lhuc { layer: l, .. } | LayerRef::Factored { layer: l, .. } => l.activation,
            LayerRef::Bottleneck { layer, .. } => layer.activation,
        }
    }

    fn in_dim(&self) -> usize {
        match self {
            LayerRef::Dense(l) | LayerRef::Lhuc { layer: l, .. } | LayerRef::Factored { layer: l, .. } => l.in_dim(),
            LayerRef::Bottleneck { layer, .. } => layer.down.cols(),
        }
    }
}

/// Gradients of a scalar objective with respect to everything a layer touches.
/// Fields are `None` when the layer kind has no such parameter.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Option<Matrix>,
    pub bias: Option<Vector>,
    pub up: Option<Matrix>,
    pub down: Option<Matrix>,
    pub scale_proj: Option<Matrix>,
    pub bias_proj: Option<Matrix>,
    pub scale_code: Option<Vector>,
    pub bias_code: Option<Vector>,
    pub lhuc: Option<Vector>,
    pub input: Vector,
}

impl LayerGrads {
    fn new(input: Vector) -> Self {
        LayerGrads {
            weight: None,
            bias: None,
            up: None,
            down: None,
            scale_proj: None,
            bias_proj: None,
            scale_code: None,
            bias_code: None,
            lhuc: None,
            input,
        }
    }
}

/// Reverse-mode pass through one layer given `∂objective/∂output`.
pub fn layer_backward(layer: LayerRef<'_>, cache: &LayerCache, upstream: &Vector) -> Result<LayerGrads> {
    if cache.kind != layer.kind() {
        return Err(Error::CacheMismatch("cache was produced by a different layer kind"));
    }
    if cache.input.len() != layer.in_dim() {
        return Err(Error::CacheMismatch("cached input width differs from layer input width"));
    }
    if upstream.len() != cache.activated.len() {
        return Err(Error::dims(
            "layer_backward",
            format!("output len {}", cache.activated.len()),
            format!("upstream len {}", upstream.len()),
        ));
    }

    let fprime = layer.activation().derivative_from_output(&cache.activated);
    let h = &cache.input;

    let grads = match layer {
        LayerRef::Dense(l) => {
            let delta = upstream.hadamard(&fprime)?;
            let mut g = LayerGrads::new(l.weight.matvec_transposed(&delta)?);
            g.weight = Some(Matrix::outer(&delta, h));
            g.bias = Some(delta);
            g
        }
        LayerRef::Lhuc { layer: l, scale } => {
            let delta = upstream.hadamard(scale)?.hadamard(&fprime)?;
            let mut g = LayerGrads::new(l.weight.matvec_transposed(&delta)?);
            g.lhuc = Some(upstream.hadamard(&cache.activated)?);
            g.weight = Some(Matrix::outer(&delta, h));
            g.bias = Some(delta);
            g
        }
        LayerRef::Factored {
            layer: l,
            scaling,
            bias,
            code,
        } => {
            let delta = upstream.hadamard(&fprime)?;
            let projected = cache
                .projected
                .as_ref()
                .ok_or(Error::CacheMismatch("factored cache lacks W·h"))?;
            // d_lin: gradient w.r.t. W·h before scaling.
            let (d_lin, scale_parts) = match (&cache.scaling, scaling) {
                (Some(s), Some(sa)) => {
                    let d_scaling = delta.hadamard(projected)?;
                    let s_a = code_part("scale", code.scale())?;
                    let code_grad = sa.proj.matvec_transposed(&d_scaling)?;
                    (delta.hadamard(s)?, Some((Matrix::outer(&d_scaling, s_a), code_grad)))
                }
                (None, None) => (delta.clone(), None),
                _ => return Err(Error::CacheMismatch("scaling adapter presence differs from cache")),
            };
            let mut g = LayerGrads::new(l.weight.matvec_transposed(&d_lin)?);
            g.weight = Some(Matrix::outer(&d_lin, h));
            if let Some((proj, code_grad)) = scale_parts {
                g.scale_proj = Some(proj);
                g.scale_code = Some(code_grad);
            }
            if let Some(ba) = bias {
                let s_b = code_part("bias", code.bias())?;
                g.bias_proj = Some(Matrix::outer(&delta, s_b));
                g.bias_code = Some(ba.proj.matvec_transposed(&delta)?);
            }
            g.bias = Some(delta);
            g
        }
        LayerRef::Bottleneck {
            layer: bl,
            scaling: sa,
            bias,
            code,
        } => {
            let delta = upstream.hadamard(&fprime)?;
            let projected = cache
                .projected
                .as_ref()
                .ok_or(Error::CacheMismatch("bottleneck cache lacks V·h"))?;
            let s = cache
                .scaling
                .as_ref()
                .ok_or(Error::CacheMismatch("bottleneck cache lacks scaling"))?;
            let s_a = code_part("scale", code.scale())?;
            let core = s.hadamard(projected)?;
            let d_core = bl.up.matvec_transposed(&delta)?;
            let d_projected = d_core.hadamard(s)?;
            let d_scaling = d_core.hadamard(projected)?;
            let mut input = bl.down.matvec_transposed(&d_projected)?;
            input.add_assign(&delta);
            let mut g = LayerGrads::new(input);
            g.up = Some(Matrix::outer(&delta, &core));
            g.down = Some(Matrix::outer(&d_projected, h));
            g.scale_proj = Some(Matrix::outer(&d_scaling, s_a));
            g.scale_code = Some(sa.proj.matvec_transposed(&d_scaling)?);
            if let Some(ba) = bias {
                let s_b = code_part("bias", code.bias())?;
                g.bias_proj = Some(Matrix::outer(&delta, s_b));
                g.bias_code = Some(ba.proj.matvec_transposed(&delta)?);
            }
            g.bias = Some(delta);
            g
        }
    };
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error};

    fn v(data: &[f64]) -> Vector {
        Vector::from_vec(data.to_vec()).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn assert_close(a: &Vector, b: &Vector, tol: f64) {
        let d = a.max_abs_diff(b).unwrap();
        assert!(d <= tol, "{a:?} vs {b:?} (diff {d:e})");
    }

    #[test]
    fn fmllr_examples() {
        let t = FmllrTransform::identity(2);
        assert_eq!(fmllr_apply(&t, &v(&[1.0, 2.0])).unwrap(), v(&[1.0, 2.0]));

        let mut two = Matrix::identity(2);
        two.set(0, 0, 2.0);
        two.set(1, 1, 2.0);
        let t = FmllrTransform::new(two, v(&[1.0, 1.0])).unwrap();
        assert_eq!(fmllr_apply(&t, &v(&[1.0, 2.0])).unwrap(), v(&[3.0, 5.0]));

        let t = FmllrTransform::new(m(&[&[0.0, 1.0], &[1.0, 0.0]]), Vector::zeros(2)).unwrap();
        assert_eq!(fmllr_apply(&t, &v(&[3.0, 4.0])).unwrap(), v(&[4.0, 3.0]));

        assert!(fmllr_apply(&t, &v(&[1.0, 2.0, 3.0])).is_err());
        assert!(FmllrTransform::new(Matrix::zeros(2, 3), Vector::zeros(2)).is_err());
    }

    #[test]
    fn dense_examples() {
        let l = DenseLayer::new(Matrix::zeros(3, 2), Vector::zeros(3), Activation::Sigmoid).unwrap();
        let (y, _) = dense_forward(&l, &v(&[4.0, -9.0])).unwrap();
        assert_eq!(y, Vector::filled(3, 0.5));

        let l = DenseLayer::new(Matrix::identity(2), Vector::zeros(2), Activation::Linear).unwrap();
        let (y, _) = dense_forward(&l, &v(&[0.25, -3.0])).unwrap();
        assert_eq!(y, v(&[0.25, -3.0]));

        let l = DenseLayer::new(m(&[&[1.0, 2.0], &[0.0, 1.0]]), v(&[0.5, -0.5]), Activation::Linear).unwrap();
        let (y, cache) = dense_forward(&l, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(y, v(&[3.5, 0.5]));
        assert_eq!(cache.input, v(&[1.0, 1.0]));

        assert!(dense_forward(&l, &v(&[1.0])).is_err());
        assert!(DenseLayer::new(Matrix::zeros(2, 2), Vector::zeros(3), Activation::Linear).is_err());
    }

    #[test]
    fn lhuc_examples() {
        let mut rng = Rng::new(5);
        let l = DenseLayer::init(3, 4, Activation::Sigmoid, &mut rng);
        let h = Vector::gaussian(3, 1.0, &mut rng);
        let (plain, _) = dense_forward(&l, &h).unwrap();
        let (ones, _) = lhuc_forward(&l, &Vector::ones(4), &h).unwrap();
        assert_eq!(plain, ones);
        let (zero, _) = lhuc_forward(&l, &Vector::zeros(4), &h).unwrap();
        assert_eq!(zero, Vector::zeros(4));

        let l = DenseLayer::new(m(&[&[0.0]]), v(&[0.0]), Activation::Sigmoid).unwrap();
        let (y, _) = lhuc_forward(&l, &v(&[2.0]), &v(&[5.0])).unwrap();
        assert_eq!(y, v(&[1.0]));

        assert!(lhuc_forward(&l, &v(&[1.0, 1.0]), &v(&[5.0])).is_err());
    }

    #[test]
    fn fold_lhuc_examples() {
        let mut rng = Rng::new(9);
        let w = Matrix::gaussian(3, 3, 1.0, &mut rng);
        assert_eq!(fold_lhuc(&w, &Vector::ones(3)).unwrap(), w);
        assert_eq!(fold_lhuc(&m(&[&[1.5]]), &v(&[2.0])).unwrap(), m(&[&[3.0]]));
        assert!(fold_lhuc(&w, &Vector::ones(2)).is_err());

        // Two-path check: next layer applied to (a ∘ h) vs folded weights on h.
        let a = Vector::gaussian(3, 1.0, &mut rng);
        let h = Vector::gaussian(3, 1.0, &mut rng);
        let c = Vector::gaussian(3, 1.0, &mut rng);
        for act in [Activation::Sigmoid, Activation::Linear] {
            let next = DenseLayer::new(w.clone(), c.clone(), act).unwrap();
            let folded = DenseLayer::new(fold_lhuc(&w, &a).unwrap(), c.clone(), act).unwrap();
            let two_step = dense_forward(&next, &a.hadamard(&h).unwrap()).unwrap().0;
            let one_step = dense_forward(&folded, &h).unwrap().0;
            assert_close(&two_step, &one_step, 1e-12);
        }
    }

    #[test]
    fn scaling_and_bias_from_code() {
        let ones_col = ScalingAdapter {
            proj: Matrix::from_row_major(3, 1, vec![1.0; 3]).unwrap(),
        };
        assert_eq!(scaling_from_code(&ones_col, &v(&[1.0])).unwrap(), Vector::ones(3));
        assert_eq!(scaling_from_code(&ones_col, &v(&[0.0])).unwrap(), Vector::zeros(3));
        assert!(scaling_from_code(&ones_col, &v(&[1.0, 0.0])).is_err());

        let mut rng = Rng::new(1);
        let ba = BiasAdapter::init(4, 3, &mut rng);
        assert_eq!(bias_from_code(&ba, &Vector::zeros(3)).unwrap(), Vector::zeros(4));
        let col1 = bias_from_code(&ba, &Vector::basis(3, 1)).unwrap();
        for r in 0..4 {
            assert_eq!(col1[r], ba.proj.get(r, 1));
        }

        let big_scale = ScalingAdapter::init(1024, 64, &mut rng);
        assert_eq!(scaling_from_code(&big_scale, &Vector::basis(64, 0)).unwrap().len(), 1024);
        let big_bias = BiasAdapter::init(1024, 64, &mut rng);
        assert_eq!(bias_from_code(&big_bias, &Vector::zeros(64)).unwrap().len(), 1024);
    }

    #[test]
    fn scaling_adapter_init_is_identity_for_first_basis_code() {
        let mut rng = Rng::new(2);
        let sa = ScalingAdapter::init(16, 8, &mut rng);
        let code = SpeakerCode::init(Some(8), None, &mut rng).unwrap();
        let s = scaling_from_code(&sa, code.scale().unwrap()).unwrap();
        assert_eq!(s, Vector::ones(16));
    }

    #[test]
    fn factored_examples() {
        let mut rng = Rng::new(3);
        let l = DenseLayer::init(3, 4, Activation::Sigmoid, &mut rng);
        let h = Vector::gaussian(3, 1.0, &mut rng);
        let sa = ScalingAdapter {
            proj: Matrix::from_row_major(4, 1, vec![1.0; 4]).unwrap(),
        };
        let ba = BiasAdapter {
            proj: Matrix::gaussian(4, 2, 1.0, &mut rng),
        };
        let code = SpeakerCode::new(Some(v(&[1.0])), Some(Vector::zeros(2))).unwrap();
        let (neutral, _) = factored_forward(&l, Some(&sa), Some(&ba), &code, &h).unwrap();
        let (plain, _) = dense_forward(&l, &h).unwrap();
        assert_close(&neutral, &plain, 1e-12);

        let l = DenseLayer::new(Matrix::identity(2), Vector::zeros(2), Activation::Linear).unwrap();
        let sa = ScalingAdapter {
            proj: Matrix::from_row_major(2, 1, vec![2.0, 3.0]).unwrap(),
        };
        let code = SpeakerCode::new(Some(v(&[1.0])), None).unwrap();
        let (y, _) = factored_forward(&l, Some(&sa), None, &code, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(y, v(&[2.0, 3.0]));

        let bias_only = SpeakerCode::new(None, Some(v(&[1.0]))).unwrap();
        let err = factored_forward(&l, Some(&sa), None, &bias_only, &v(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::MissingCode { component: "scale", .. }));

        let big = DenseLayer::init(8, 1024, Activation::Sigmoid, &mut rng);
        let sa = ScalingAdapter::init(1024, 32, &mut rng);
        let ba = BiasAdapter::init(1024, 32, &mut rng);
        let code = SpeakerCode::init(Some(32), Some(32), &mut rng).unwrap();
        let (y, _) = factored_forward(&big, Some(&sa), Some(&ba), &code, &Vector::ones(8)).unwrap();
        assert_eq!(y.len(), 1024);
    }

    #[test]
    fn bias_code_equals_shifted_dense_bias() {
        let mut rng = Rng::new(4);
        let l = DenseLayer::init(5, 4, Activation::Sigmoid, &mut rng);
        let ba = BiasAdapter {
            proj: Matrix::gaussian(4, 3, 1.0, &mut rng),
        };
        let code = SpeakerCode::new(None, Some(Vector::gaussian(3, 1.0, &mut rng))).unwrap();
        let h = Vector::gaussian(5, 1.0, &mut rng);
        let (coded, _) = factored_forward(&l, None, Some(&ba), &code, &h).unwrap();
        let shifted = DenseLayer {
            bias: l.bias.add(&bias_from_code(&ba, code.bias().unwrap()).unwrap()).unwrap(),
            ..l
        };
        let (plain, _) = dense_forward(&shifted, &h).unwrap();
        assert_close(&coded, &plain, 1e-12);
    }

    #[test]
    fn bottleneck_examples() {
        let mut rng = Rng::new(6);
        let bl = BottleneckLayer::init(4, 2, Activation::Linear, &mut rng);
        let sa = ScalingAdapter {
            proj: Matrix::from_row_major(2, 1, vec![1.0, 1.0]).unwrap(),
        };
        let zero_code = SpeakerCode::new(Some(v(&[0.0])), None).unwrap();
        let h = Vector::gaussian(4, 1.0, &mut rng);
        let (y, _) = bottleneck_forward(&bl, &sa, None, &zero_code, &h).unwrap();
        assert_eq!(y, h);

        let bl = BottleneckLayer::new(
            Matrix::from_row_major(2, 1, vec![1.0, 0.0]).unwrap(),
            m(&[&[1.0, 0.0]]),
            Vector::zeros(2),
            Activation::Linear,
        )
        .unwrap();
        let sa = ScalingAdapter {
            proj: m(&[&[2.0]]),
        };
        let code = SpeakerCode::new(Some(v(&[1.0])), None).unwrap();
        let (y, _) = bottleneck_forward(&bl, &sa, None, &code, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(y, v(&[3.0, 1.0]));

        // Residual needs a square layer.
        assert!(BottleneckLayer::new(
            Matrix::zeros(2, 1),
            Matrix::zeros(1, 3),
            Vector::zeros(2),
            Activation::Linear
        )
        .is_err());

        let bl = BottleneckLayer::init(1024, 512, Activation::Sigmoid, &mut rng);
        let sa = ScalingAdapter::init(512, 64, &mut rng);
        let ba = BiasAdapter::init(1024, 32, &mut rng);
        let code = SpeakerCode::init(Some(64), Some(32), &mut rng).unwrap();
        let (y, _) = bottleneck_forward(&bl, &sa, Some(&ba), &code, &Vector::zeros(1024)).unwrap();
        assert_eq!(y.len(), 1024);
        let wrong = ScalingAdapter::init(64, 64, &mut rng);
        assert!(bottleneck_forward(&bl, &wrong, Some(&ba), &code, &Vector::zeros(1024)).is_err());
    }

    #[test]
    fn backward_identity_passes_upstream_through() {
        let l = DenseLayer::new(Matrix::identity(3), Vector::zeros(3), Activation::Linear).unwrap();
        let h = v(&[0.1, 0.2, 0.3]);
        let (_, cache) = dense_forward(&l, &h).unwrap();
        let up = v(&[1.0, -2.0, 0.5]);
        let g = layer_backward(LayerRef::Dense(&l), &cache, &up).unwrap();
        assert_eq!(g.input, up);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let mut rng = Rng::new(8);
        let l = DenseLayer::init(3, 3, Activation::Linear, &mut rng);
        let (_, cache) = dense_forward(&l, &Vector::ones(3)).unwrap();
        let a = Vector::ones(3);
        let err = layer_backward(LayerRef::Lhuc { layer: &l, scale: &a }, &cache, &Vector::ones(3)).unwrap_err();
        assert!(matches!(err, Error::CacheMismatch(_)));
        assert!(layer_backward(LayerRef::Dense(&l), &cache, &Vector::ones(2)).is_err());
    }

    #[test]
    fn bias_code_gradient_matches_chain_rule() {
        let mut rng = Rng::new(10);
        let l = DenseLayer::init(4, 4, Activation::Sigmoid, &mut rng);
        let ba = BiasAdapter {
            proj: Matrix::gaussian(4, 3, 1.0, &mut rng),
        };
        let code = SpeakerCode::new(None, Some(Vector::gaussian(3, 1.0, &mut rng))).unwrap();
        let h = Vector::gaussian(4, 1.0, &mut rng);
        let layer = LayerRef::Factored {
            layer: &l,
            scaling: None,
            bias: Some(&ba),
            code: &code,
        };
        let (y, cache) = layer.forward(&h).unwrap();
        let up = Vector::gaussian(4, 1.0, &mut rng);
        let g = layer_backward(layer, &cache, &up).unwrap();
        let fprime = y.map(|t| t * (1.0 - t));
        let expected = ba.proj.matvec_transposed(&up.hadamard(&fprime).unwrap()).unwrap();
        assert_close(g.bias_code.as_ref().unwrap(), &expected, 1e-15);
    }

    /// Everything a layer of any kind may read, owned so tests can perturb it.
    #[derive(Clone)]
    struct Instance {
        dense: DenseLayer,
        bottle: BottleneckLayer,
        scaling: ScalingAdapter,
        bias: BiasAdapter,
        code: SpeakerCode,
        lhuc: Vector,
        h: Vector,
    }

    #[derive(Clone, Copy, Debug)]
    enum Kind {
        Dense,
        Lhuc,
        Factored,
        ScaleOnly,
        BiasOnly,
        Bottleneck,
    }

    impl Instance {
        fn random(rng: &mut Rng, act: Activation) -> Self {
            let mut dense = DenseLayer::init(4, 4, act, rng);
            dense.bias = Vector::gaussian(4, 0.5, rng);
            let mut bottle = BottleneckLayer::init(4, 2, act, rng);
            bottle.bias = Vector::gaussian(4, 0.5, rng);
            Instance {
                dense,
                bottle,
                scaling: ScalingAdapter {
                    proj: Matrix::gaussian(4, 3, 1.0, rng),
                },
                bias: BiasAdapter {
                    proj: Matrix::gaussian(4, 2, 1.0, rng),
                },
                code: SpeakerCode::new(Some(Vector::gaussian(3, 1.0, rng)), Some(Vector::gaussian(2, 1.0, rng)))
                    .unwrap(),
                lhuc: Vector::gaussian(4, 1.0, rng),
                h: Vector::gaussian(4, 1.0, rng),
            }
        }

        fn with_bottleneck_scaling(mut self, rng: &mut Rng) -> Self {
            self.scaling = ScalingAdapter {
                proj: Matrix::gaussian(2, 3, 1.0, rng),
            };
            self
        }

        fn layer(&self, kind: Kind) -> LayerRef<'_> {
            match kind {
                Kind::Dense => LayerRef::Dense(&self.dense),
                Kind::Lhuc => LayerRef::Lhuc {
                    layer: &self.dense,
                    scale: &self.lhuc,
                },
                Kind::Factored => LayerRef::Factored {
                    layer: &self.dense,
                    scaling: Some(&self.scaling),
                    bias: Some(&self.bias),
                    code: &self.code,
                },
                Kind::ScaleOnly => LayerRef::Factored {
                    layer: &self.dense,
                    scaling: Some(&self.scaling),
                    bias: None,
                    code: &self.code,
                },
                Kind::BiasOnly => LayerRef::Factored {
                    layer: &self.dense,
                    scaling: None,
                    bias: Some(&self.bias),
                    code: &self.code,
                },
                Kind::Bottleneck => LayerRef::Bottleneck {
                    layer: &self.bottle,
                    scaling: &self.scaling,
                    bias: Some(&self.bias),
                    code: &self.code,
                },
            }
        }

        fn objective(&self, kind: Kind, up: &Vector) -> f64 {
            let (y, _) = self.layer(kind).forward(&self.h).unwrap();
            y.dot(up).unwrap()
        }
    }

    type Access = fn(&mut Instance) -> &mut [f64];

    fn groups(kind: Kind) -> Vec<(&'static str, Access, fn(&LayerGrads) -> Option<Vec<f64>>)> {
        let mut out: Vec<(&'static str, Access, fn(&LayerGrads) -> Option<Vec<f64>>)> = vec![(
            "input",
            |i| i.h.as_mut_slice(),
            |g| Some(g.input.as_slice().to_vec()),
        )];
        let dense_like = !matches!(kind, Kind::Bottleneck);
        if dense_like {
            out.push(("weight", |i| i.dense.weight.as_mut_slice(), |g| g.weight.as_ref().map(|m| m.as_slice().to_vec())));
            out.push(("bias", |i| i.dense.bias.as_mut_slice(), |g| g.bias.as_ref().map(|v| v.as_slice().to_vec())));
        } else {
            out.push(("up", |i| i.bottle.up.as_mut_slice(), |g| g.up.as_ref().map(|m| m.as_slice().to_vec())));
            out.push(("down", |i| i.bottle.down.as_mut_slice(), |g| g.down.as_ref().map(|m| m.as_slice().to_vec())));
            out.push(("bias", |i| i.bottle.bias.as_mut_slice(), |g| g.bias.as_ref().map(|v| v.as_slice().to_vec())));
        }
        if matches!(kind, Kind::Lhuc) {
            out.push(("lhuc", |i| i.lhuc.as_mut_slice(), |g| g.lhuc.as_ref().map(|v| v.as_slice().to_vec())));
        }
        if matches!(kind, Kind::Factored | Kind::ScaleOnly | Kind::Bottleneck) {
            out.push(("scale_proj", |i| i.scaling.proj.as_mut_slice(), |g| g.scale_proj.as_ref().map(|m| m.as_slice().to_vec())));
            out.push(("scale_code", |i| i.code.scale_mut().unwrap().as_mut_slice(), |g| g.scale_code.as_ref().map(|v| v.as_slice().to_vec())));
        }
        if matches!(kind, Kind::Factored | Kind::BiasOnly | Kind::Bottleneck) {
            out.push(("bias_proj", |i| i.bias.proj.as_mut_slice(), |g| g.bias_proj.as_ref().map(|m| m.as_slice().to_vec())));
            out.push(("bias_code", |i| i.code.bias_mut().unwrap().as_mut_slice(), |g| g.bias_code.as_ref().map(|v| v.as_slice().to_vec())));
        }
        out
    }

    #[test]
    fn every_backward_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let kinds = [Kind::Dense, Kind::Lhuc, Kind::Factored, Kind::ScaleOnly, Kind::BiasOnly, Kind::Bottleneck];
        for trial in 0..5 {
            for act in [Activation::Sigmoid, Activation::Linear] {
                for kind in kinds {
                    let mut inst = Instance::random(&mut rng, act);
                    if matches!(kind, Kind::Bottleneck) {
                        inst = inst.with_bottleneck_scaling(&mut rng);
                    }
                    let up = Vector::gaussian(4, 1.0, &mut rng);
                    let (_, cache) = inst.layer(kind).forward(&inst.h).unwrap();
                    let analytic = layer_backward(inst.layer(kind), &cache, &up).unwrap();
                    for (name, access, read) in groups(kind) {
                        let mut base = inst.clone();
                        let x = Vector::from_vec(access(&mut base).to_vec()).unwrap();
                        let numeric = finite_diff_grad(
                            |p| {
                                let mut probe = inst.clone();
                                access(&mut probe).copy_from_slice(p.as_slice());
                                probe.objective(kind, &up)
                            },
                            &x,
                            1e-6,
                        )
                        .unwrap();
                        let got = read(&analytic).unwrap_or_else(|| panic!("{kind:?} missing {name}"));
                        for (a, n) in got.iter().zip(numeric.iter()) {
                            let err = relative_error(*a, *n);
                            assert!(err < 1e-5, "trial {trial} {kind:?} {act:?} {name}: {a} vs {n} ({err:e})");
                        }
                    }
                }
            }
        }
    }
}
