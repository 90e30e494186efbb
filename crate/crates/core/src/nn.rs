//! Parameterized layers shared by the convolutional and transformer halves.
//!
//! Every layer declares its parameters as [`ParamSpec`]s so that parameter
//! counts come straight from the declarations and initialization happens in
//! one deterministic pass.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{init, Bound, Element, ParameterStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<F: Element, R: Rng>(&self, rng: &mut R) -> Tensor<F> {
        match self.init {
            Init::TruncNormal(std) => init::trunc_normal(&self.shape, std, rng),
            Init::Kaiming(fan_in) => init::kaiming_normal(&self.shape, fan_in, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::full(&self.shape, F::one()),
            Init::Constant(v) => Tensor::full(&self.shape, F::c(v)),
        }
    }
}

/// Initializes `specs` in declaration order into a fresh store.
pub fn materialize_all<F: Element, R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<ParameterStore<F>> {
    let mut store = ParameterStore::new();
    for s in specs {
        store.insert(s.name.clone(), s.materialize(rng))?;
    }
    Ok(store)
}

pub const TRANSFORMER_INIT_STD: f64 = 0.02;

/// Dense map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.din, self.dout],
            Init::TruncNormal(TRANSFORMER_INIT_STD),
        ));
        if self.bias {
            out.push(ParamSpec::new(format!("{}.bias", self.name), &[self.dout], Init::Zeros));
        }
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(p.get(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        x.affine(w, b)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.din * self.dout) as u64
    }
}

/// Square-kernel 2-d convolution on `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub init: Init,
}

impl Conv {
    /// Stride-1 "same" convolution with an odd kernel.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        debug_assert!(k % 2 == 1);
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride: 1,
            pad: (k - 1) / 2,
            init: Init::Kaiming(cin * k * k),
        }
    }

    pub fn strided(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            stride,
            pad: 0,
            init: Init::Kaiming(cin * k * k),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(
            format!("{}.weight", self.name),
            &[self.cout, self.cin, self.k, self.k],
            self.init,
        ));
        out.push(ParamSpec::new(format!("{}.bias", self.name), &[self.cout], Init::Zeros));
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let w = p.get(&format!("{}.weight", self.name))?;
        let b = p.get(&format!("{}.bias", self.name))?;
        x.conv2d(w, Some(b), self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// FLOPs for `n` images of `h x w` input.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        2 * (n * self.cout * ho * wo * self.cin * self.k * self.k) as u64
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct Norm {
    pub name: String,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Norm {
            name: name.into(),
            dim,
        }
    }

    pub fn specs(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec::new(format!("{}.gamma", self.name), &[self.dim], Init::Ones));
        out.push(ParamSpec::new(format!("{}.beta", self.name), &[self.dim], Init::Zeros));
    }

    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.layer_norm(
            p.get(&format!("{}.gamma", self.name))?,
            p.get(&format!("{}.beta", self.name))?,
            LN_EPS,
        )
    }
}

/// `[N, T, H, W, C]` (channel-last tokens) to `[N*T, C, H, W]`.
pub fn tokens_to_frames<'g, F: Element>(x: Var<'g, F>) -> Result<Var<'g, F>> {
    let s = x.shape();
    x.permute(&[0, 1, 4, 2, 3])?.reshape(&[s[0] * s[1], s[4], s[2], s[3]])
}

/// `[N*T, C, H, W]` to `[N, T, H, W, C]`.
pub fn frames_to_tokens<'g, F: Element>(x: Var<'g, F>, n: usize) -> Result<Var<'g, F>> {
    let s = x.shape();
    x.reshape(&[n, s[0] / n, s[1], s[2], s[3]])?.permute(&[0, 1, 3, 4, 2])
}
