//! Spectral (Fourier-layer) score network.
//!
//! Layout: the input field plus a constant time channel is lifted pointwise
//! to `width` channels, passed through `depth` blocks
//! `v ↦ act(K v + W v + b)` with `K` a truncated Fourier mode mixer, then
//! projected pointwise `width → width → out_channels` with an activation in
//! between.
//!
//! All parameters live in one flat vector in canonical order:
//! `lift.weight [width, in+1]`, `lift.bias [width]`, then per block
//! `spectral.re [width, width, modes]`, `spectral.im`, `skip.weight
//! [width, width]`, `skip.bias [width]`, then `proj1.weight [width, width]`,
//! `proj1.bias`, `proj2.weight [out, width]`, `proj2.bias [out]`.

use std::io::Read;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spectral::SpectralPlan;
use super::{Graph, Tensor, Var};
use crate::error::{check_len, Error, Result};
use crate::field::FieldShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Gelu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Gelu),
            2 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" | "swish" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parameter(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetProfile {
    /// width 32, 10 blocks, 17 modes
    Default,
    /// width 16, 4 blocks, 8 modes
    Reduced,
}

impl FromStr for NetProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(NetProfile::Default),
            "reduced" => Ok(NetProfile::Reduced),
            other => Err(Error::Parameter(format!(
                "unknown network profile {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub width: usize,
    pub depth: usize,
    pub n_modes: usize,
    /// Field channels, not counting the time channel.
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub grid_width: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn profile(profile: NetProfile, shape: FieldShape) -> Self {
        let (width, depth, n_modes) = match profile {
            NetProfile::Default => (32, 10, 17),
            NetProfile::Reduced => (16, 4, 8),
        };
        Self {
            width,
            depth,
            n_modes,
            in_channels: shape.channels,
            out_channels: shape.channels,
            height: shape.height,
            grid_width: shape.width,
            activation: Activation::Silu,
        }
    }

    pub fn input_shape(&self) -> FieldShape {
        FieldShape::new(self.in_channels, self.height, self.grid_width)
    }

    pub fn output_shape(&self) -> FieldShape {
        FieldShape::new(self.out_channels, self.height, self.grid_width)
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.width,
            self.depth,
            self.n_modes,
            self.in_channels,
            self.out_channels,
            self.height,
            self.grid_width,
        ];
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::Parameter(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
pub struct ScoreNetwork {
    cfg: NetConfig,
    params: Vec<f64>,
    slots: Vec<ParamSlot>,
    plan: Arc<SpectralPlan>,
}

/// Slot indices of one spectral block.
struct BlockSlots {
    re: usize,
    im: usize,
    skip_w: usize,
    skip_b: usize,
}

impl ScoreNetwork {
    /// Builds a network with initial weights drawn from `rng`: affine layers
    /// uniform on `±1/√fan_in`, spectral weights Gaussian with standard
    /// deviation `1/(width·n_modes)`.
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let spec_sd = 1.0 / (cfg.width * cfg.n_modes) as f64;
        for k in 0..net.slots.len() {
            let slot = net.slots[k].clone();
            let chunk = &mut net.params[slot.range()];
            if slot.name.contains("spectral") {
                for v in chunk.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = spec_sd * z;
                }
            } else {
                let fan_in = if slot.name.ends_with("weight") {
                    slot.shape[1]
                } else {
                    // bias shares its layer's fan-in
                    net.slots[k - 1].shape[1]
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in chunk.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = Arc::new(SpectralPlan::new(
            cfg.width,
            cfg.width,
            cfg.height,
            cfg.grid_width,
            cfg.n_modes,
        ));
        let modes = plan.modes.len();
        let (w, cin, cout) = (cfg.width, cfg.in_channels + 1, cfg.out_channels);
        let mut layout: Vec<(String, Vec<usize>)> = vec![
            ("lift.weight".into(), vec![w, cin]),
            ("lift.bias".into(), vec![w]),
        ];
        for l in 0..cfg.depth {
            layout.push((format!("blocks.{l}.spectral.re"), vec![w, w, modes]));
            layout.push((format!("blocks.{l}.spectral.im"), vec![w, w, modes]));
            layout.push((format!("blocks.{l}.skip.weight"), vec![w, w]));
            layout.push((format!("blocks.{l}.skip.bias"), vec![w]));
        }
        layout.push(("proj1.weight".into(), vec![w, w]));
        layout.push(("proj1.bias".into(), vec![w]));
        layout.push(("proj2.weight".into(), vec![cout, w]));
        layout.push(("proj2.bias".into(), vec![cout]));
        let mut offset = 0;
        let slots: Vec<ParamSlot> = layout
            .into_iter()
            .map(|(name, shape)| {
                let s = ParamSlot {
                    name,
                    shape,
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        Ok(Self {
            cfg,
            params: vec![0.0; offset],
            slots,
            plan,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Zeroes the final projection, making the network output identically 0.
    pub fn zero_output_layer(&mut self) {
        let n = self.slots.len();
        for k in [n - 2, n - 1] {
            let r = self.slots[k].range();
            self.params[r].fill(0.0);
        }
    }

    fn block_slots(&self, l: usize) -> BlockSlots {
        let base = 2 + 4 * l;
        BlockSlots {
            re: base,
            im: base + 1,
            skip_w: base + 2,
            skip_b: base + 3,
        }
    }

    /// Network input: field channels followed by a constant `t` channel.
    pub fn input_tensor(&self, x: &[f64], t: f64) -> Result<Tensor> {
        let shape = self.cfg.input_shape();
        check_len("network input", shape.len(), x.len())?;
        let mut v = Vec::with_capacity(shape.len() + shape.pixels());
        v.extend_from_slice(x);
        v.extend(std::iter::repeat_n(t, shape.pixels()));
        Tensor::new(vec![shape.channels + 1, shape.height, shape.width], v)
    }

    /// Records the forward pass on `g`. Returns the output node and the
    /// parameter leaves (in slot order).
    pub fn record(&self, g: &mut Graph, input: Var, param_grad: bool) -> Result<(Var, Vec<Var>)> {
        let pv: Vec<Var> = self
            .slots
            .iter()
            .map(|s| {
                g.leaf(
                    Tensor {
                        shape: s.shape.clone(),
                        values: self.params[s.range()].to_vec(),
                        grad: None,
                    },
                    param_grad,
                )
            })
            .collect();
        let act = self.cfg.activation;
        let mut v = g.channel_mix(input, pv[0], pv[1])?;
        for l in 0..self.cfg.depth {
            let b = self.block_slots(l);
            let k = g.spectral(v, pv[b.re], pv[b.im], self.plan.clone())?;
            let skip = g.channel_mix(v, pv[b.skip_w], pv[b.skip_b])?;
            let sum = g.add(k, skip)?;
            v = g.act(sum, act);
        }
        let n = pv.len();
        let h = g.channel_mix(v, pv[n - 4], pv[n - 3])?;
        let h = g.act(h, act);
        let out = g.channel_mix(h, pv[n - 2], pv[n - 1])?;
        Ok((out, pv))
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = g.leaf(self.input_tensor(x, t)?, false);
        let (out, _) = self.record(&mut g, input, false)?;
        Ok(g.value(out).values.clone())
    }

    /// Output at `(x, t)` together with `J_xᵀ v`, the vector-Jacobian product
    /// with respect to the field input.
    pub fn vjp_input(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let input = g.leaf(self.input_tensor(x, t)?, true);
        let (out, _) = self.record(&mut g, input, false)?;
        g.backward_with(out, v)?;
        let gx = g.grad(input).expect("input requires grad")[..x.len()].to_vec();
        Ok((g.value(out).values.clone(), gx))
    }

    /// `weight · ‖net(x, t) - target‖² / len` and its parameter gradient.
    pub fn loss_grad(
        &self,
        x: &[f64],
        t: f64,
        target: &[f64],
        weight: f64,
    ) -> Result<(f64, Vec<f64>)> {
        check_len(
            "training target",
            self.cfg.output_shape().len(),
            target.len(),
        )?;
        let mut g = Graph::new();
        let input = g.leaf(self.input_tensor(x, t)?, false);
        let (out, pv) = self.record(&mut g, input, true)?;
        let shape = g.value(out).shape.clone();
        let tgt = g.leaf(Tensor::new(shape, target.to_vec())?, false);
        let diff = g.sub(out, tgt)?;
        let ss = g.sum_squares(diff);
        let loss = g.scale(ss, weight / target.len() as f64);
        g.backward(loss)?;
        let mut grad = vec![0.0; self.params.len()];
        for (slot, var) in self.slots.iter().zip(&pv) {
            if let Some(gv) = g.grad(*var) {
                grad[slot.range()].copy_from_slice(gv);
            }
        }
        Ok((g.value(loss).values[0], grad))
    }

    // -----------------------------------------------------------------------
    // checkpoints
    // -----------------------------------------------------------------------

    /// `SPNET1\0`, version byte, eight `u32` header fields (width, depth,
    /// n_modes, in_channels, out_channels, height, grid width, activation),
    /// then the flat parameter vector as `f64`, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let c = &self.cfg;
        let mut buf = Vec::with_capacity(8 + 32 + 8 * self.params.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        for v in [
            c.width,
            c.depth,
            c.n_modes,
            c.in_channels,
            c.out_channels,
            c.height,
            c.grid_width,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.activation.code().to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)
            .map_err(|_| Error::Format("checkpoint too short".into()))?;
        if ver[0] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ver[0]
            )));
        }
        let mut h = [0u32; 8];
        for v in &mut h {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
            *v = u32::from_le_bytes(b);
        }
        let cfg = NetConfig {
            width: h[0] as usize,
            depth: h[1] as usize,
            n_modes: h[2] as usize,
            in_channels: h[3] as usize,
            out_channels: h[4] as usize,
            height: h[5] as usize,
            grid_width: h[6] as usize,
            activation: Activation::from_code(h[7])?,
        };
        let mut net = Self::zeros(cfg).map_err(|e| Error::Format(e.to_string()))?;
        if r.len() != 8 * net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} bytes of parameters, expected {}",
                r.len(),
                8 * net.params.len()
            )));
        }
        for (p, c) in net.params.iter_mut().zip(r.chunks_exact(8)) {
            *p = f64::from_le_bytes(c.try_into().unwrap());
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("checkpoint has non-finite parameters".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SPNET1\0";
pub const CHECKPOINT_VERSION: u8 = 1;
