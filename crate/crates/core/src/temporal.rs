//! Multi-scale temporal stream over frame differences.
//!
//! Each scale looks at the trailing `w` differences of the input clip,
//! embeds them at the finest patch size, adds a sinusoidal time encoding and
//! scans every spatial token along time with its own temporal blocks. Scales
//! are resampled to the clip length and mixed by softmax attention.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::mix::RowMix;
use crate::nn::{Mlp, ParamStore, Session};
use crate::spatial::PatchEmbed;
use crate::ssm::{BlockConfig, Tmb};
use crate::tensor::Tensor;

/// Successive frame differences `d_t = V_{t+1} - V_t`, `[w, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionDifference {
    pub d: Tensor,
    pub window: usize,
}

/// Differences over the trailing window: uses the last `w + 1` frames of
/// `frames [T, H, W, C]`.
pub fn frame_difference(frames: &Tensor, w: usize) -> Result<MotionDifference> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("frames {:?}, expected [T, H, W, C]", s)));
    }
    if w == 0 || s[0] < w + 1 {
        return Err(Error::Contract(format!(
            "window {w} needs {} frames, clip has {}",
            w + 1,
            s[0]
        )));
    }
    let inner: usize = s[1..].iter().product();
    let start = s[0] - w - 1;
    let src = frames.data();
    let mut d = Vec::with_capacity(w * inner);
    for t in 0..w {
        let a = (start + t) * inner;
        let b = a + inner;
        d.extend((0..inner).map(|i| src[b + i] - src[a + i]));
    }
    let mut shape = s.to_vec();
    shape[0] = w;
    Ok(MotionDifference {
        d: Tensor::new(&shape, d)?,
        window: w,
    })
}

/// Fixed sinusoidal encoding `[len, d]`: even channels `sin`, odd `cos`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], pe).unwrap()
}

/// Per-scale temporal encoder.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub window: usize,
    embed: PatchEmbed,
    blocks: Vec<Tmb>,
    d_model: usize,
}

impl TemporalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        window: usize,
        patch: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Self {
        TemporalEncoder {
            window,
            embed: PatchEmbed::new(store, &format!("{name}.embed"), patch, 3, cfg.d_model, rng),
            blocks: (0..cfg.n_blocks)
                .map(|b| Tmb::new(store, &format!("{name}.block{b}"), cfg, rng))
                .collect(),
            d_model: cfg.d_model,
        }
    }

    /// Add the time encoding to `tokens [w, N, D]` and scan every token along
    /// time. Returns `[w, N, D]`.
    pub fn encode_tokens(&self, s: &mut Session, tokens: Var) -> Var {
        let sh = s.g.shape(tokens).to_vec();
        let (w, n, d) = (sh[0], sh[1], sh[2]);
        let pe = sinusoidal_encoding(w, d);
        let mut full = Vec::with_capacity(w * n * d);
        for t in 0..w {
            let row = &pe.data()[t * d..(t + 1) * d];
            for _ in 0..n {
                full.extend_from_slice(row);
            }
        }
        let pe = s.g.constant(Tensor::new(&[w, n, d], full).unwrap());
        let x = s.g.add(tokens, pe);
        // [w, N, D] -> [N, w, D]: one sequence per spatial token.
        let mut x = s.g.swap_outer(x);
        for b in &self.blocks {
            x = s.scoped(|s| b.forward(s, x));
        }
        s.g.swap_outer(x)
    }

    /// `diffs [w, H, W, 3] -> [w, N_1, D]`.
    pub fn forward(&self, s: &mut Session, diffs: Var) -> Var {
        let e = self.embed.forward(s, diffs);
        let sh = s.g.shape(e).to_vec();
        let tokens = s.g.reshape(e, &[sh[0], sh[1] * sh[2], self.d_model]);
        self.encode_tokens(s, tokens)
    }

    pub fn blocks(&self) -> &[Tmb] {
        &self.blocks
    }

    pub fn embed(&self) -> &PatchEmbed {
        &self.embed
    }

    /// Encode a difference window with frozen parameters.
    pub fn encode(&self, store: &ParamStore, d: &MotionDifference) -> Result<Tensor> {
        let sh = d.d.shape();
        if sh.len() != 4 || sh[3] != 3 {
            return Err(Error::shape(format!("differences {:?}, expected [w, H, W, 3]", sh)));
        }
        let mut s = Session::inference(store);
        let x = s.g.constant(d.d.clone());
        let y = self.forward(&mut s, x);
        Ok(s.g.value(y).clone())
    }
}

/// Softmax attention over temporal scales. Each scale's time axis is
/// linearly resampled to the clip length; its logit is an MLP of its mean.
#[derive(Clone, Debug)]
pub struct ScaleAttention {
    mlp: Mlp,
}

impl ScaleAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        ScaleAttention {
            mlp: Mlp::new(store, name, d, (d / 4).max(1), 1, rng),
        }
    }

    pub fn logits(&self, s: &mut Session, per_scale: &[Var]) -> Var {
        let mut acc: Option<Var> = None;
        for &f in per_scale {
            let pooled = s.g.mean_rows(f);
            let l = self.mlp.forward(s, pooled);
            acc = Some(match acc {
                Some(a) => s.g.concat(a, l),
                None => l,
            });
        }
        acc.expect("at least one temporal scale")
    }

    /// Returns the aggregated `[k, N, D]` features and the scale weights.
    pub fn forward(&self, s: &mut Session, per_scale: &[Var], k: usize) -> (Var, Var) {
        let logits = self.logits(s, per_scale);
        let weights = s.g.softmax(logits);
        (weighted_time_sum(s, per_scale, weights, k), weights)
    }
}

/// Resample `[w, N, D]` to `[k, N, D]` along time (end points aligned).
pub fn resample_time(s: &mut Session, x: Var, k: usize) -> Var {
    let w = s.g.shape(x)[0];
    if w == k {
        return x;
    }
    let mix = Rc::new(RowMix::linear_aligned(w, k));
    s.g.row_mix(x, mix, 0)
}

fn weighted_time_sum(s: &mut Session, per_scale: &[Var], weights: Var, k: usize) -> Var {
    let mut acc: Option<Var> = None;
    for (i, &f) in per_scale.iter().enumerate() {
        let r = resample_time(s, f, k);
        let w = s.g.mul_scalar_var(r, weights, i);
        acc = Some(match acc {
            Some(a) => s.g.add(a, w),
            None => w,
        });
    }
    acc.expect("at least one temporal scale")
}

/// Aggregate three per-scale tensors `[w_j, N, D]` with explicit logits.
pub fn aggregate_with_logits(per_scale: &[Tensor], logits: &[f64], k: usize) -> Result<(Tensor, Vec<f64>)> {
    if per_scale.len() != 3 || logits.len() != 3 {
        return Err(Error::config(format!(
            "temporal aggregation needs three scales, got {}",
            per_scale.len()
        )));
    }
    let n = per_scale[0].shape()[1..].to_vec();
    if per_scale.iter().any(|t| t.shape().len() != 3 || t.shape()[1..] != n[..]) {
        return Err(Error::shape("temporal scales disagree on token/channel dims"));
    }
    let store = ParamStore::new();
    let mut s = Session::inference(&store);
    let vars: Vec<Var> = per_scale.iter().map(|t| s.g.constant(t.clone())).collect();
    let l = s.g.constant(Tensor::new(&[3], logits.to_vec())?);
    let w = s.g.softmax(l);
    let out = weighted_time_sum(&mut s, &vars, w, k);
    Ok((s.g.value(out).clone(), s.g.value(w).data().to_vec()))
}

/// Per-scale encoders plus attention aggregation.
#[derive(Clone, Debug)]
pub struct TemporalStream {
    encoders: Vec<TemporalEncoder>,
    attention: Option<ScaleAttention>,
}

pub struct TemporalOutput {
    /// `[k, N_1, D]`.
    pub aggregated: Var,
    pub per_scale: Vec<Var>,
    pub weights: Option<Var>,
}

impl TemporalStream {
    /// `windows` are the effective difference counts per scale.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        windows: &[usize],
        patch: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if windows.len() != 1 && windows.len() != 3 {
            return Err(Error::config(format!(
                "temporal stream needs one or exactly three windows, got {}",
                windows.len()
            )));
        }
        if windows.iter().any(|&w| w == 0) {
            return Err(Error::config("temporal windows must be positive"));
        }
        let encoders = windows
            .iter()
            .enumerate()
            .map(|(j, &w)| TemporalEncoder::new(store, &format!("{name}.scale{j}"), w, patch, cfg, rng))
            .collect::<Vec<_>>();
        let attention = (encoders.len() > 1)
            .then(|| ScaleAttention::new(store, &format!("{name}.attention"), cfg.d_model, rng));
        Ok(TemporalStream { encoders, attention })
    }

    pub fn encoders(&self) -> &[TemporalEncoder] {
        &self.encoders
    }

    pub fn attention(&self) -> Option<&ScaleAttention> {
        self.attention.as_ref()
    }

    /// `clip [k, H, W, 3] -> [k, N_1, D]`. Requires `k > max window`.
    pub fn forward(&self, s: &mut Session, clip: Var) -> TemporalOutput {
        let k = s.g.shape(clip)[0];
        let per_scale: Vec<Var> = self
            .encoders
            .iter()
            .map(|enc| {
                let w = enc.window;
                assert!(k > w, "clip of {k} frames cannot provide {w} differences");
                let later = s.g.slice_outer(clip, k - w, k);
                let earlier = s.g.slice_outer(clip, k - w - 1, k - 1);
                let d = s.g.sub(later, earlier);
                enc.forward(s, d)
            })
            .collect();
        let (aggregated, weights) = match &self.attention {
            Some(a) => {
                let (x, w) = a.forward(s, &per_scale, k);
                (x, Some(w))
            }
            None => (resample_time(s, per_scale[0], k), None),
        };
        TemporalOutput {
            aggregated,
            per_scale,
            weights,
        }
    }
}
