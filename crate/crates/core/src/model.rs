//! LVNet assembly: conv encoder, video transformer U-Net, conv decoder and a
//! 1x1 segmentation head, plus the training losses and analytic counters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv_frontend::{ConvUNet, ConvUNetConfig, PATCH};
use crate::error::{config_err, Error, Result};
use crate::nn::{frames_to_tokens, materialize_all, tokens_to_frames, Conv, Init, ParamSpec};
use crate::numerics::{Activation, Bound, Element, Graph, ParameterStore, Tensor, Var};
use crate::vst::{VstConfig, VstUnet};

pub mod ablation;

/// Prior foreground probability the head bias starts at.
pub const HEAD_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LVNetConfig {
    pub conv: ConvUNetConfig,
    pub vst: VstConfig,
    /// Frames per clip (`T`).
    pub clip_len: usize,
    pub input_channels: usize,
    pub threshold: f64,
}

impl Default for LVNetConfig {
    fn default() -> Self {
        LVNetConfig {
            conv: ConvUNetConfig::default(),
            vst: VstConfig::default(),
            clip_len: 2,
            input_channels: 1,
            threshold: 0.5,
        }
    }
}

impl LVNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.vst.validate()?;
        if self.input_channels != 1 {
            return Err(config_err!("only single-channel input is supported, got {}", self.input_channels));
        }
        if self.clip_len == 0 || !self.clip_len.is_multiple_of(self.vst.window[0]) {
            return Err(config_err!(
                "clip_len {} must be a positive multiple of the temporal window {}",
                self.clip_len,
                self.vst.window[0]
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(config_err!("threshold {} is outside [0, 1]", self.threshold));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LVNetConfig = serde_json::from_str(text).map_err(|e| config_err!("invalid model config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Token-grid multiple that the transformer needs in `H/4` and `W/4`.
    fn token_multiple(&self) -> usize {
        self.vst.spatial_multiple()
    }
}

/// Logits and probabilities `[N, T, H, W]`.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Tensor<f32>,
    pub probabilities: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct LVNet {
    pub cfg: LVNetConfig,
    conv: ConvUNet,
    vst: VstUnet,
    head: Conv,
}

impl LVNet {
    pub fn new(cfg: &LVNetConfig) -> Result<Self> {
        cfg.validate()?;
        let conv = ConvUNet::new(&cfg.conv, cfg.vst.embed_dim)?;
        let head = Conv::same("head", conv.out_channels(), 1, 1).with_init(Init::TruncNormal(0.02));
        Ok(LVNet {
            vst: VstUnet::new(&cfg.vst)?,
            conv,
            head,
            cfg: cfg.clone(),
        })
    }

    /// Builds the network and a parameter store initialized from `seed`.
    pub fn build<F: Element>(cfg: &LVNetConfig, seed: u64) -> Result<(ParameterStore<F>, LVNet)> {
        let net = LVNet::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = materialize_all(&net.specs(), &mut rng)?;
        let prior = -((1.0 - HEAD_PRIOR) / HEAD_PRIOR).ln();
        if let Some(b) = store.get_mut("head.bias") {
            b.data_mut().iter_mut().for_each(|v| *v = F::c(prior));
        }
        Ok((store, net))
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut out = self.conv.specs();
        out.extend(self.vst.specs());
        self.head.specs(&mut out);
        out
    }

    /// Exact parameter count from the layer declarations.
    pub fn count_params(&self) -> usize {
        self.specs().iter().map(ParamSpec::numel).sum()
    }

    fn padded_tokens(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.cfg.token_multiple();
        ((h / PATCH).div_ceil(m) * m, (w / PATCH).div_ceil(m) * m)
    }

    fn check_clip(&self, s: &[usize]) -> Result<()> {
        if s.len() != 5 || s[1] != 1 || s[2] == 0 || !s[3].is_multiple_of(PATCH) || !s[4].is_multiple_of(PATCH) || s[3] == 0 || s[4] == 0 {
            return Err(config_err!("clip must be [N, 1, T, H, W] with H, W divisible by {PATCH}, got {s:?}"));
        }
        Ok(())
    }

    /// Logits `[N, T, H, W]` for a clip `[N, 1, T, H, W]` of values in `[0, 1]`.
    pub fn forward<'g, F: Element>(&self, p: &Bound<'g, F>, clip: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = clip.shape();
        self.check_clip(&s)?;
        let (n, t, h, w) = (s[0], s[2], s[3], s[4]);
        let frames = clip.reshape(&[n * t, 1, h, w])?;
        let (emb, skips) = self.conv.encode(p, frames)?;
        let mut tokens = frames_to_tokens(emb, n)?;
        let (th, tw) = (h / PATCH, w / PATCH);
        let (ph, pw) = self.padded_tokens(h, w);
        if (ph, pw) != (th, tw) {
            tokens = tokens.pad(&[(2, 0, ph - th), (3, 0, pw - tw)])?;
        }
        let mut y = self.vst.forward(p, tokens)?;
        if (ph, pw) != (th, tw) {
            y = y.narrow(2, 0, th)?.narrow(3, 0, tw)?;
        }
        let feats = self.conv.decode(p, tokens_to_frames(y)?, skips)?;
        self.head.forward(p, feats)?.reshape(&[n, t, h, w])
    }

    /// Inference on a tensor clip; rejects values outside `[0, 1]`.
    pub fn predict(&self, store: &ParameterStore<f32>, clip: &Tensor<f32>) -> Result<ModelOutput> {
        if let Some(v) = clip.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("clip value {v} is outside [0, 1]")));
        }
        let g = Graph::new();
        let p = store.bind_frozen(&g)?;
        let logits = self.forward(&p, g.constant(clip)?)?.value();
        let probabilities = logits.map(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(ModelOutput { logits, probabilities })
    }

    /// Analytic FLOPs (2 per multiply-accumulate) for one `T x H x W` clip.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<u64> {
        self.check_clip(&[1, 1, self.cfg.clip_len, h, w])?;
        let t = self.cfg.clip_len;
        let (ph, pw) = self.padded_tokens(h, w);
        Ok(self.conv.flops(t, h, w) + self.vst.flops(1, [t, ph, pw])? + self.head.flops(t, h, w))
    }
}

/// `1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)` over every element.
pub fn soft_iou_loss<'g, F: Element>(probabilities: Var<'g, F>, target: Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
    if probabilities.shape() != target.shape() {
        return Err(config_err!(
            "loss shapes differ: {:?} vs {:?}",
            probabilities.shape(),
            target.shape()
        ));
    }
    let inter = probabilities.mul(target)?.sum()?;
    let union = probabilities.sum()?.add(target.sum()?)?.sub(inter)?;
    inter
        .add_scalar(F::c(eps))?
        .div(union.add_scalar(F::c(eps))?)?
        .scale(-F::one())?
        .add_scalar(F::one())
}

/// Mean binary cross-entropy on logits plus soft Dice loss.
pub fn bce_dice_loss<'g, F: Element>(logits: Var<'g, F>, target: Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
    if logits.shape() != target.shape() {
        return Err(config_err!("loss shapes differ: {:?} vs {:?}", logits.shape(), target.shape()));
    }
    let n = logits.numel() as f64;
    // softplus(z) - g*z is the numerically stable BCE on logits
    let bce = logits.activation(Activation::Softplus)?.sub(logits.mul(target)?)?.sum()?.scale(F::c(1.0 / n))?;
    let p = logits.sigmoid()?;
    let inter = p.mul(target)?.sum()?;
    let denom = p.sum()?.add(target.sum()?)?.add_scalar(F::c(eps))?;
    let dice = inter.scale(F::c(2.0))?.add_scalar(F::c(eps))?.div(denom)?;
    bce.add(dice.scale(-F::one())?.add_scalar(F::one())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftIou,
    BceDice,
}

pub const LOSS_EPS: f64 = 1.0;

/// Loss for `logits` against a binary `target` of the same shape.
pub fn loss<'g, F: Element>(kind: LossKind, logits: Var<'g, F>, target: Var<'g, F>) -> Result<Var<'g, F>> {
    match kind {
        LossKind::SoftIou => soft_iou_loss(logits.sigmoid()?, target, LOSS_EPS),
        LossKind::BceDice => bce_dice_loss(logits, target, LOSS_EPS),
    }
}

#[cfg(test)]
mod tests;
