//! A small reverse-mode differentiation engine over dense tensors.
//!
//! A [`Graph`] records values as operations are applied; [`Graph::backward`]
//! walks the record in reverse and stores gradients on every node that
//! depends on a leaf created with `requires_grad`.

pub mod nn;
pub mod optim;
pub mod spectral;
pub mod train;

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{check_len, Error, Result};
use spectral::SpectralPlan;

pub use nn::{Activation, NetConfig, NetProfile, ScoreNetwork};
pub use optim::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_len("tensor values", shape.iter().product(), values.len())?;
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// `y[o, p] = Σ_i w[o, i] x[i, p] + b[o]`
    ChannelMix {
        x: Var,
        w: Var,
        b: Var,
    },
    Spectral {
        x: Var,
        wre: Var,
        wim: Var,
        plan: Arc<SpectralPlan>,
        xm: Vec<Complex64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient stored by the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn channel_mix(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            &self.value(x).shape,
            &self.value(w).shape,
            &self.value(b).shape,
        );
        if xs.len() != 3 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Usage(
                "channel_mix expects [c,h,w], [o,c], [o]".into(),
            ));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let co = ws[0];
        check_len("channel_mix input channels", ws[1], ci)?;
        check_len("channel_mix bias", co, bs[0])?;
        let p = h * wd;
        let xv = &self.value(x).values;
        let wv = &self.value(w).values;
        let bv = &self.value(b).values;
        let mut y = vec![0.0; co * p];
        for o in 0..co {
            let yo = &mut y[o * p..(o + 1) * p];
            yo.fill(bv[o]);
            for i in 0..ci {
                let a = wv[o * ci + i];
                for (yv, xv) in yo.iter_mut().zip(&xv[i * p..(i + 1) * p]) {
                    *yv += a * xv;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![co, h, wd], y)?,
            Op::ChannelMix { x, w, b },
            rg,
        ))
    }

    pub fn spectral(&mut self, x: Var, wre: Var, wim: Var, plan: Arc<SpectralPlan>) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 || xs[1] != plan.modes.h || xs[2] != plan.modes.w {
            return Err(Error::Usage(format!(
                "spectral layer planned for {}x{} got shape {xs:?}",
                plan.modes.h, plan.modes.w
            )));
        }
        check_len("spectral input channels", plan.c_in, xs[0])?;
        check_len("spectral weights", plan.weight_len(), self.value(wre).len())?;
        check_len("spectral weights", plan.weight_len(), self.value(wim).len())?;
        let (y, xm) = plan.forward(
            &self.value(x).values,
            &self.value(wre).values,
            &self.value(wim).values,
        );
        let rg = self.rg(&[x, wre, wim]);
        let shape = vec![plan.c_out, xs[1], xs[2]];
        Ok(self.push(
            Tensor::new(shape, y)?,
            Op::Spectral {
                x,
                wre,
                wim,
                plan,
                xm,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::dim(
                format!(
                    "elementwise op on {:?} and {:?}",
                    self.value(a).shape,
                    self.value(b).shape
                ),
                self.value(a).len(),
                self.value(b).len(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v: Vec<f64> = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, v)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let v: Vec<f64> = self
            .value(a)
            .values
            .iter()
            .zip(&self.value(b).values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, v)?, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v: Vec<f64> = self.value(a).values.iter().map(|x| c * x).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a]);
        self.push(
            Tensor {
                shape,
                values: v,
                grad: None,
            },
            Op::Scale(a, c),
            rg,
        )
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let v: Vec<f64> = self.value(a).values.iter().map(|x| kind.eval(*x)).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.rg(&[a]);
        self.push(
            Tensor {
                shape,
                values: v,
                grad: None,
            },
            Op::Act(a, kind),
            rg,
        )
    }

    /// `Σ a²` as a scalar.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Reverse pass seeded with `cotangent` at `out` (a vector-Jacobian product).
    pub fn backward_with(&mut self, out: Var, cotangent: &[f64]) -> Result<()> {
        if !self.nodes[out.0].requires_grad {
            return Err(Error::Usage(
                "backward on a value that does not depend on any differentiable leaf".into(),
            ));
        }
        check_len("cotangent", self.value(out).len(), cotangent.len())?;
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(cotangent.to_vec());

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| match &mut grads[v.0]
        {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::ChannelMix { x, w, b } => {
                let xs = &self.value(*x).shape;
                let (ci, p) = (xs[0], xs[1] * xs[2]);
                let co = self.value(*w).shape[0];
                let xv = &self.value(*x).values;
                let wv = &self.value(*w).values;
                if wants(*b) {
                    let gb = (0..co)
                        .map(|o| g[o * p..(o + 1) * p].iter().sum())
                        .collect();
                    acc(*b, gb, grads);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; co * ci];
                    for o in 0..co {
                        let go = &g[o * p..(o + 1) * p];
                        for i in 0..ci {
                            gw[o * ci + i] = crate::field::dot(go, &xv[i * p..(i + 1) * p]);
                        }
                    }
                    acc(*w, gw, grads);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; ci * p];
                    for o in 0..co {
                        let go = &g[o * p..(o + 1) * p];
                        for i in 0..ci {
                            let a = wv[o * ci + i];
                            for (t, s) in gx[i * p..(i + 1) * p].iter_mut().zip(go) {
                                *t += a * s;
                            }
                        }
                    }
                    acc(*x, gx, grads);
                }
            }
            Op::Spectral {
                x,
                wre,
                wim,
                plan,
                xm,
            } => {
                let wl = plan.weight_len();
                let (mut gr, mut gi) = (vec![0.0; wl], vec![0.0; wl]);
                let gx = plan.backward(
                    g,
                    xm,
                    &self.value(*wre).values,
                    &self.value(*wim).values,
                    &mut gr,
                    &mut gi,
                );
                if wants(*wre) {
                    acc(*wre, gr, grads);
                }
                if wants(*wim) {
                    acc(*wim, gi, grads);
                }
                if wants(*x) {
                    acc(*x, gx, grads);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if wants(*b) {
                    acc(*b, g.to_vec(), grads);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec(), grads);
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect(), grads);
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    acc(*a, g.iter().map(|v| c * v).collect(), grads);
                }
            }
            Op::Act(a, kind) => {
                if wants(*a) {
                    let xv = &self.value(*a).values;
                    let ga = xv
                        .iter()
                        .zip(g)
                        .map(|(x, gi)| kind.derivative(*x) * gi)
                        .collect();
                    acc(*a, ga, grads);
                }
            }
            Op::SumSquares(a) => {
                if wants(*a) {
                    let ga = self
                        .value(*a)
                        .values
                        .iter()
                        .map(|x| 2.0 * x * g[0])
                        .collect();
                    acc(*a, ga, grads);
                }
            }
        }
    }
}
