//! Differentiable representation encoders.
//!
//! Three encoder families map a `window_len x n_features` window (row-major,
//! index `t * n_features + f`) to a single `repr_dim` vector:
//!
//! * `Linear`: affine map of the flattened window.
//! * `Mlp`: flattened window through tanh hidden layers, then an affine head.
//! * `DilatedConv`: a stack of causal dilated 1-D convolutions with tanh,
//!   layer `k` using dilation `dilation_base^k`, mean-pooled over time and
//!   projected to `repr_dim`.
//!
//! All parameters live in one flat vector; [`LayerSlot`] records where each
//! tensor sits. Gradients are computed analytically for both the parameters
//! and the input window.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, TtsoError};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    Mlp,
    DilatedConv,
}

fn default_n_layers() -> usize {
    4
}
fn default_kernel_size() -> usize {
    3
}
fn default_dilation_base() -> usize {
    2
}
fn default_conv_channels() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: EncoderKind,
    pub window_len: usize,
    pub n_features: usize,
    pub repr_dim: usize,
    /// Hidden widths for `Mlp`.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_dilation_base")]
    pub dilation_base: usize,
    /// Channel width of every convolution layer.
    #[serde(default = "default_conv_channels")]
    pub conv_channels: usize,
}

impl Architecture {
    pub fn linear(window_len: usize, n_features: usize, repr_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Linear,
            window_len,
            n_features,
            repr_dim,
            hidden_dims: Vec::new(),
            n_layers: default_n_layers(),
            kernel_size: default_kernel_size(),
            dilation_base: default_dilation_base(),
            conv_channels: default_conv_channels(),
        }
    }

    pub fn mlp(window_len: usize, n_features: usize, repr_dim: usize, hidden: &[usize]) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            hidden_dims: hidden.to_vec(),
            ..Self::linear(window_len, n_features, repr_dim)
        }
    }

    pub fn dilated_conv(
        window_len: usize,
        n_features: usize,
        repr_dim: usize,
        n_layers: usize,
        conv_channels: usize,
    ) -> Self {
        Self {
            kind: EncoderKind::DilatedConv,
            n_layers,
            conv_channels,
            ..Self::linear(window_len, n_features, repr_dim)
        }
    }

    /// Flattened input size `window_len * n_features`.
    pub fn input_len(&self) -> usize {
        self.window_len * self.n_features
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_base.pow(layer as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TtsoError::Config(format!("architecture: {what}")));
        if self.window_len == 0 || self.n_features == 0 || self.repr_dim == 0 {
            return bad("window_len, n_features and repr_dim must be positive");
        }
        match self.kind {
            EncoderKind::Linear => {}
            EncoderKind::Mlp => {
                if self.hidden_dims.is_empty() {
                    return bad("mlp needs at least one entry in hidden_dims");
                }
                if self.hidden_dims.contains(&0) {
                    return bad("hidden_dims entries must be positive");
                }
            }
            EncoderKind::DilatedConv => {
                if self.n_layers == 0 || self.kernel_size == 0 || self.conv_channels == 0 {
                    return bad("n_layers, kernel_size and conv_channels must be positive");
                }
                if self.dilation_base == 0 {
                    return bad("dilation_base must be positive");
                }
                if self
                    .dilation_base
                    .checked_pow(self.n_layers.saturating_sub(1) as u32)
                    .is_none()
                {
                    return bad("dilation_base^(n_layers-1) overflows");
                }
            }
        }
        Ok(())
    }

    /// Offset table for this architecture.
    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize, is_bias: bool| {
            slots.push(LayerSlot {
                name,
                offset,
                rows,
                cols,
                is_bias,
            });
            offset += rows * cols;
        };
        match self.kind {
            EncoderKind::Linear => {
                push("linear.weight".into(), self.repr_dim, self.input_len(), false);
                push("linear.bias".into(), self.repr_dim, 1, true);
            }
            EncoderKind::Mlp => {
                let mut fan_in = self.input_len();
                for (l, &h) in self.hidden_dims.iter().enumerate() {
                    push(format!("mlp.{l}.weight"), h, fan_in, false);
                    push(format!("mlp.{l}.bias"), h, 1, true);
                    fan_in = h;
                }
                push("head.weight".into(), self.repr_dim, fan_in, false);
                push("head.bias".into(), self.repr_dim, 1, true);
            }
            EncoderKind::DilatedConv => {
                let c = self.conv_channels;
                let mut c_in = self.n_features;
                for l in 0..self.n_layers {
                    // weight stored as [out][in][tap]
                    push(format!("conv.{l}.weight"), c, c_in * self.kernel_size, false);
                    push(format!("conv.{l}.bias"), c, 1, true);
                    c_in = c;
                }
                push("proj.weight".into(), self.repr_dim, c, false);
                push("proj.bias".into(), self.repr_dim, 1, true);
            }
        }
        slots
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(LayerSlot::len).sum()
    }
}

/// One tensor inside the flat parameter vector (row-major `rows x cols`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub is_bias: bool,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub theta: Vec<f64>,
    pub arch: Architecture,
    pub layout: Vec<LayerSlot>,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    /// Post-activation output of every hidden layer, in order.
    hidden: Vec<Vec<f64>>,
    /// Time-pooled last conv layer (DilatedConv only).
    pooled: Vec<f64>,
}

/// Draw parameters: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// biases zero.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<EncoderParams> {
    arch.validate()?;
    let layout = arch.layout();
    let n = layout.iter().map(LayerSlot::len).sum();
    let mut theta = vec![0.0; n];
    let mut r = rng::stream(seed, "encoder-init", &[]);
    for slot in layout.iter().filter(|s| !s.is_bias) {
        let scale = 1.0 / (slot.cols as f64).sqrt();
        for v in &mut theta[slot.range()] {
            *v = r.random_range(-scale..scale);
        }
    }
    Ok(EncoderParams {
        theta,
        arch: arch.clone(),
        layout,
    })
}

impl EncoderParams {
    pub fn from_theta(arch: &Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        check_len("encoder parameter vector", arch.n_params(), theta.len())?;
        if !crate::linalg::all_finite(&theta) {
            return Err(TtsoError::Input("parameter vector has non-finite entries".into()));
        }
        Ok(Self {
            theta,
            arch: arch.clone(),
            layout,
        })
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        debug_assert_eq!(theta.len(), self.theta.len());
        Self {
            theta: theta.to_vec(),
            arch: self.arch.clone(),
            layout: self.layout.clone(),
        }
    }

    fn slot(&self, i: usize) -> &[f64] {
        &self.theta[self.layout[i].range()]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len("encoder input window", self.arch.input_len(), x.len())?;
        if !crate::linalg::all_finite(x) {
            return Err(TtsoError::Input("encoder input has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Returns `(d(u.r(x))/dtheta, d(u.r(x))/dx)`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        check_len("backward upstream", self.arch.repr_dim, upstream.len())?;
        let (_, cache) = self.forward_cached(x);
        let mut g_theta = vec![0.0; self.n_params()];
        let mut g_x = vec![0.0; x.len()];
        self.backward_cached(x, &cache, upstream, &mut g_theta, Some(&mut g_x));
        Ok((g_theta, g_x))
    }

    /// Unchecked forward pass that also returns the activations needed by
    /// [`Self::backward_cached`]. Callers validate shapes.
    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, ForwardCache) {
        match self.arch.kind {
            EncoderKind::Linear => {
                let out = affine(self.slot(0), self.slot(1), x);
                (out, ForwardCache::default())
            }
            EncoderKind::Mlp => {
                let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(self.arch.hidden_dims.len());
                for l in 0..self.arch.hidden_dims.len() {
                    let input = if l == 0 { x } else { hidden[l - 1].as_slice() };
                    let mut h = affine(self.slot(2 * l), self.slot(2 * l + 1), input);
                    h.iter_mut().for_each(|v| *v = v.tanh());
                    hidden.push(h);
                }
                let last = 2 * self.arch.hidden_dims.len();
                let out = affine(self.slot(last), self.slot(last + 1), hidden.last().unwrap());
                (
                    out,
                    ForwardCache {
                        hidden,
                        pooled: Vec::new(),
                    },
                )
            }
            EncoderKind::DilatedConv => {
                let a = &self.arch;
                let (t_len, ch) = (a.window_len, a.conv_channels);
                let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(a.n_layers);
                for l in 0..a.n_layers {
                    let (input, c_in) = if l == 0 {
                        (x, a.n_features)
                    } else {
                        (hidden[l - 1].as_slice(), ch)
                    };
                    let y = conv_layer(
                        self.slot(2 * l),
                        self.slot(2 * l + 1),
                        input,
                        t_len,
                        c_in,
                        ch,
                        a.kernel_size,
                        a.dilation(l),
                    );
                    hidden.push(y);
                }
                let last = hidden.last().unwrap();
                let mut pooled = vec![0.0; ch];
                for t in 0..t_len {
                    for c in 0..ch {
                        pooled[c] += last[t * ch + c];
                    }
                }
                pooled.iter_mut().for_each(|v| *v /= t_len as f64);
                let p = 2 * a.n_layers;
                let out = affine(self.slot(p), self.slot(p + 1), &pooled);
                (out, ForwardCache { hidden, pooled })
            }
        }
    }

    /// Accumulates `d(u.r(x))/dtheta` into `g_theta` and, when given,
    /// `d(u.r(x))/dx` into `g_x`. Both buffers are added to, not overwritten.
    pub fn backward_cached(
        &self,
        x: &[f64],
        cache: &ForwardCache,
        upstream: &[f64],
        g_theta: &mut [f64],
        g_x: Option<&mut [f64]>,
    ) {
        match self.arch.kind {
            EncoderKind::Linear => {
                let g = affine_backward(&self.layout[0], &self.layout[1], &self.theta, x, upstream, g_theta);
                if let Some(gx) = g_x {
                    crate::linalg::axpy(1.0, &g, gx);
                }
            }
            EncoderKind::Mlp => {
                let n_hidden = self.arch.hidden_dims.len();
                let last = 2 * n_hidden;
                let mut g = affine_backward(
                    &self.layout[last],
                    &self.layout[last + 1],
                    &self.theta,
                    &cache.hidden[n_hidden - 1],
                    upstream,
                    g_theta,
                );
                for l in (0..n_hidden).rev() {
                    let h = &cache.hidden[l];
                    for (gi, hi) in g.iter_mut().zip(h) {
                        *gi *= 1.0 - hi * hi;
                    }
                    let input = if l == 0 { x } else { cache.hidden[l - 1].as_slice() };
                    g = affine_backward(
                        &self.layout[2 * l],
                        &self.layout[2 * l + 1],
                        &self.theta,
                        input,
                        &g,
                        g_theta,
                    );
                }
                if let Some(gx) = g_x {
                    crate::linalg::axpy(1.0, &g, gx);
                }
            }
            EncoderKind::DilatedConv => {
                let a = &self.arch;
                let (t_len, ch, ks) = (a.window_len, a.conv_channels, a.kernel_size);
                let p = 2 * a.n_layers;
                let g_pooled = affine_backward(
                    &self.layout[p],
                    &self.layout[p + 1],
                    &self.theta,
                    &cache.pooled,
                    upstream,
                    g_theta,
                );
                let inv_t = 1.0 / t_len as f64;
                let mut g_y: Vec<f64> = (0..t_len * ch).map(|i| g_pooled[i % ch] * inv_t).collect();
                for l in (0..a.n_layers).rev() {
                    let y = &cache.hidden[l];
                    for (gi, yi) in g_y.iter_mut().zip(y) {
                        *gi *= 1.0 - yi * yi;
                    }
                    let (input, c_in) = if l == 0 {
                        (x, a.n_features)
                    } else {
                        (cache.hidden[l - 1].as_slice(), ch)
                    };
                    let w_slot = &self.layout[2 * l];
                    let b_slot = &self.layout[2 * l + 1];
                    let w = &self.theta[w_slot.range()];
                    let need_input_grad = l > 0 || g_x.is_some();
                    let mut g_in = if need_input_grad {
                        vec![0.0; t_len * c_in]
                    } else {
                        Vec::new()
                    };
                    let d = a.dilation(l);
                    for t in 0..t_len {
                        for o in 0..ch {
                            let go = g_y[t * ch + o];
                            if go == 0.0 {
                                continue;
                            }
                            g_theta[b_slot.offset + o] += go;
                            for j in 0..ks {
                                let lag = (ks - 1 - j) * d;
                                if lag > t {
                                    continue;
                                }
                                let src = (t - lag) * c_in;
                                for i in 0..c_in {
                                    let widx = (o * c_in + i) * ks + j;
                                    g_theta[w_slot.offset + widx] += go * input[src + i];
                                    if need_input_grad {
                                        g_in[src + i] += go * w[widx];
                                    }
                                }
                            }
                        }
                    }
                    if l == 0 {
                        if let Some(gx) = g_x {
                            crate::linalg::axpy(1.0, &g_in, gx);
                        }
                        break;
                    }
                    g_y = g_in;
                }
            }
        }
    }

    /// Writes `<stem>.f64` (little-endian parameters) and `<stem>.json`
    /// (architecture and layout table).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let bin = stem.with_extension("f64");
        let side = stem.with_extension("json");
        let bytes: Vec<u8> = self.theta.iter().flat_map(|v| v.to_le_bytes()).collect();
        crate::report::write_atomic(&bin, &bytes)?;
        let meta = CheckpointMeta {
            arch: self.arch.clone(),
            n_params: self.theta.len(),
            layout: self.layout.clone(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("checkpoint metadata serializes");
        crate::report::write_atomic(&side, json.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("f64");
        let side = stem.with_extension("json");
        let json = fs::read_to_string(&side).map_err(|e| TtsoError::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&json).map_err(|e| TtsoError::Parse {
            file: side.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let bytes = fs::read(&bin).map_err(|e| TtsoError::io(&bin, e))?;
        if bytes.len() != meta.n_params * 8 {
            return Err(TtsoError::dim("checkpoint byte length", meta.n_params * 8, bytes.len()));
        }
        let theta = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let params = Self::from_theta(&meta.arch, theta)?;
        if params.layout != meta.layout {
            return Err(TtsoError::Input(format!(
                "layout table in {} does not match its architecture",
                side.display()
            )));
        }
        Ok(params)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: Architecture,
    n_params: usize,
    layout: Vec<LayerSlot>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bi)| bi + crate::linalg::dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

/// Accumulates weight/bias gradients and returns the gradient w.r.t. `x`.
fn affine_backward(
    w_slot: &LayerSlot,
    b_slot: &LayerSlot,
    theta: &[f64],
    x: &[f64],
    g: &[f64],
    g_theta: &mut [f64],
) -> Vec<f64> {
    let cols = w_slot.cols;
    let w = &theta[w_slot.range()];
    let mut g_x = vec![0.0; cols];
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        g_theta[b_slot.offset + r] += gr;
        let row = w_slot.offset + r * cols;
        for c in 0..cols {
            g_theta[row + c] += gr * x[c];
            g_x[c] += gr * w[r * cols + c];
        }
    }
    g_x
}

#[allow(clippy::too_many_arguments)]
fn conv_layer(
    w: &[f64],
    b: &[f64],
    input: &[f64],
    t_len: usize,
    c_in: usize,
    c_out: usize,
    ks: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; t_len * c_out];
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = b[o];
            for j in 0..ks {
                let lag = (ks - 1 - j) * dilation;
                if lag > t {
                    continue;
                }
                let src = (t - lag) * c_in;
                for i in 0..c_in {
                    acc += w[(o * c_in + i) * ks + j] * input[src + i];
                }
            }
            y[t * c_out + o] = acc.tanh();
        }
    }
    y
}
