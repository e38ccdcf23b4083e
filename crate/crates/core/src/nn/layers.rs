use alloc::format;

use super::{Ctx, Group, Init, ParamId, ParamStore};
use crate::autograd::Var;
use crate::real::Real;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        group: Group,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), &[fan_out, fan_in], init, group, rng);
        let bias = bias.then(|| store.init(format!("{name}.bias"), &[fan_out], Init::Zeros, group, rng));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        group: Group,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], init, group, rng);
        let bias = Some(store.init(format!("{name}.bias"), &[out_ch], Init::Zeros, group, rng));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Affine normalization; applied over the last axis or across NCHW channels.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize, eps: f64, group: Group, rng: &mut Rng) -> Self {
        let gamma = store.init(format!("{name}.weight"), &[dim], Init::Constant(1.0), group, rng);
        let beta = store.init(format!("{name}.bias"), &[dim], Init::Zeros, group, rng);
        Self { gamma, beta, eps }
    }

    pub fn last_axis<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Var {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.tape.layer_norm(x, g, b, self.eps)
    }

    pub fn channels<R: Real>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Var {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.tape.channel_norm(x, g, b, self.eps)
    }
}
