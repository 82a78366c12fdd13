//! Multi-scale spatial stream: patch partition at several granularities,
//! per-scale multi-scale visual blocks, and softmax-weighted fusion onto the
//! finest token grid.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::mix::RowMix;
use crate::nn::{Linear, Mlp, ParamStore, Session};
use crate::ssm::{BlockConfig, MsVssb};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    /// Patch side lengths in pixels, finest first.
    pub resolutions: Vec<usize>,
    pub embed_dim: usize,
    pub frame_hw: (usize, usize),
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::config("at least one patch resolution is required"));
        }
        if self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "patch resolutions must be strictly increasing, got {:?}",
                self.resolutions
            )));
        }
        let (h, w) = self.frame_hw;
        for &r in &self.resolutions {
            if r == 0 || h % r != 0 || w % r != 0 {
                return Err(Error::config(format!(
                    "patch size {r} does not divide the {h}x{w} frame"
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self, scale: usize) -> (usize, usize) {
        let r = self.resolutions[scale];
        (self.frame_hw.0 / r, self.frame_hw.1 / r)
    }

    pub fn n_tokens(&self, scale: usize) -> usize {
        let (a, b) = self.grid(scale);
        a * b
    }
}

/// Flat source indices taking `[k, H, W, C]` frames to
/// `[k, H/r, W/r, r*r*C]` patches (row-major inside each patch).
pub fn patch_index(frames: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (nh, nw) = (h / r, w / r);
    let mut idx = Vec::with_capacity(frames * h * w * c);
    for t in 0..frames {
        for py in 0..nh {
            for px in 0..nw {
                for iy in 0..r {
                    for ix in 0..r {
                        let base = ((t * h + py * r + iy) * w + px * r + ix) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Non-overlapping `r x r` patches of `clip [k, H, W, C]`, flattened to
/// `[k, (H/r)(W/r), r*r*C]` before embedding.
pub fn patch_partition(clip: &Tensor, r: usize) -> Result<Tensor> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("clip {:?}, expected [k, H, W, C]", s)));
    }
    let (k, h, w, c) = (s[0], s[1], s[2], s[3]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::config(format!("patch size {r} does not divide {h}x{w}")));
    }
    let idx = patch_index(k, h, w, c, r);
    let data = idx.iter().map(|&i| clip.data()[i]).collect();
    Tensor::new(&[k, (h / r) * (w / r), r * r * c], data)
}

/// Patch partition followed by a linear embedding to `D` channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    proj: Linear,
}

impl PatchEmbed {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        patch: usize,
        channels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        PatchEmbed {
            patch,
            proj: Linear::new(store, name, patch * patch * channels, dim, true, rng),
        }
    }

    /// `[k, H, W, C] -> [k, H/r, W/r, D]`.
    pub fn forward(&self, s: &mut Session, frames: Var) -> Var {
        let sh = s.g.shape(frames).to_vec();
        let (k, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let r = self.patch;
        let idx = Rc::new(patch_index(k, h, w, c, r));
        let p = s.g.gather(frames, idx, &[k, h / r, w / r, r * r * c]);
        self.proj.forward(s, p)
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }
}

/// Encoded features of one spatial scale, `g [k, N, D]` on an `nh x nw` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleFeatures {
    pub g: Tensor,
    pub scale_index: usize,
    pub grid: (usize, usize),
}

impl ScaleFeatures {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Patch embedding plus a stack of multi-scale visual blocks. Frames are
/// encoded independently (the frame axis is the block batch axis).
#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    pub scale_index: usize,
    embed: PatchEmbed,
    blocks: Vec<MsVssb>,
}

impl SpatialEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        scale_index: usize,
        patch: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Self {
        let embed = PatchEmbed::new(store, &format!("{name}.embed"), patch, 3, cfg.d_model, rng);
        let blocks = (0..cfg.n_blocks)
            .map(|b| MsVssb::new(store, &format!("{name}.block{b}"), cfg, rng))
            .collect();
        SpatialEncoder {
            scale_index,
            embed,
            blocks,
        }
    }

    /// `[k, H, W, 3] -> [k, H/r, W/r, D]`.
    pub fn forward(&self, s: &mut Session, clip: Var) -> Var {
        let mut x = self.embed.forward(s, clip);
        for b in &self.blocks {
            x = s.scoped(|s| b.forward(s, x));
        }
        x
    }

    pub fn blocks(&self) -> &[MsVssb] {
        &self.blocks
    }

    pub fn embed(&self) -> &PatchEmbed {
        &self.embed
    }

    /// Encode a clip `[k, H, W, 3]` with frozen parameters.
    pub fn encode(&self, store: &ParamStore, clip: &Tensor) -> Result<ScaleFeatures> {
        let s4 = clip.shape();
        if s4.len() != 4 || s4[3] != 3 {
            return Err(Error::shape(format!("clip {:?}, expected [k, H, W, 3]", s4)));
        }
        let r = self.embed.patch;
        if s4[1] % r != 0 || s4[2] % r != 0 {
            return Err(Error::config(format!("patch size {r} does not divide {}x{}", s4[1], s4[2])));
        }
        let mut s = Session::inference(store);
        let x = s.g.constant(clip.clone());
        let y = self.forward(&mut s, x);
        let sh = s.g.shape(y).to_vec();
        let g = s.g.value(y).clone().reshape(&[sh[0], sh[1] * sh[2], sh[3]])?;
        Ok(ScaleFeatures {
            g,
            scale_index: self.scale_index,
            grid: (sh[1], sh[2]),
        })
    }
}

/// Softmax importance weighting across scales with bilinear resizing to the
/// finest grid. The logit of each scale is an MLP of its global mean.
#[derive(Clone, Debug)]
pub struct ScaleFusion {
    mlp: Mlp,
}

impl ScaleFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        ScaleFusion {
            mlp: Mlp::new(store, name, d, (d / 4).max(1), 1, rng),
        }
    }

    /// Importance logits `[n]`, one per scale, from features `[k, .., D]`.
    pub fn logits(&self, s: &mut Session, feats: &[Var]) -> Var {
        let mut acc: Option<Var> = None;
        for &f in feats {
            let pooled = s.g.mean_rows(f);
            let beta = self.mlp.forward(s, pooled);
            acc = Some(match acc {
                Some(a) => s.g.concat(a, beta),
                None => beta,
            });
        }
        acc.expect("at least one scale")
    }

    /// Fuse `[k, nh_i, nw_i, D]` features onto `target` grid. Returns the
    /// fused `[k, th, tw, D]` tensor and the softmax weights.
    pub fn forward(&self, s: &mut Session, feats: &[Var], target: (usize, usize)) -> (Var, Var) {
        let logits = self.logits(s, feats);
        let weights = s.g.softmax(logits);
        let fused = weighted_resize_sum(s, feats, weights, target);
        (fused, weights)
    }
}

/// `sum_i weights[i] * Resize(feats[i], target)`.
pub(crate) fn weighted_resize_sum(
    s: &mut Session,
    feats: &[Var],
    weights: Var,
    target: (usize, usize),
) -> Var {
    let mut acc: Option<Var> = None;
    for (i, &f) in feats.iter().enumerate() {
        let r = resize_grid(s, f, target);
        let w = s.g.mul_scalar_var(r, weights, i);
        acc = Some(match acc {
            Some(a) => s.g.add(a, w),
            None => w,
        });
    }
    acc.expect("at least one scale")
}

/// Bilinear resize of `[k, nh, nw, D]` to `[k, th, tw, D]`.
pub fn resize_grid(s: &mut Session, f: Var, target: (usize, usize)) -> Var {
    let sh = s.g.shape(f).to_vec();
    let (k, nh, nw, d) = (sh[0], sh[1], sh[2], sh[3]);
    if (nh, nw) == target {
        return f;
    }
    let mix = Rc::new(RowMix::bilinear(nh, nw, target.0, target.1));
    let flat = s.g.reshape(f, &[k, nh * nw, d]);
    let r = s.g.row_mix(flat, mix, 1);
    s.g.reshape(r, &[k, target.0, target.1, d])
}

/// Combine per-scale features with explicit importance logits, resizing onto
/// the first (finest) scale's grid. Exactly three scales are required.
pub fn combine_scales(feats: &[ScaleFeatures], logits: &[f64]) -> Result<(Tensor, Vec<f64>)> {
    if feats.len() != 3 || logits.len() != 3 {
        return Err(Error::config(format!(
            "scale fusion needs exactly three scales, got {}",
            feats.len()
        )));
    }
    let store = ParamStore::new();
    let mut s = Session::inference(&store);
    let vars: Vec<Var> = feats
        .iter()
        .map(|f| {
            let sh = f.g.shape();
            let t = f.g.clone().reshape(&[sh[0], f.grid.0, f.grid.1, sh[2]]).unwrap();
            s.g.constant(t)
        })
        .collect();
    let l = s.g.constant(Tensor::new(&[3], logits.to_vec())?);
    let w = s.g.softmax(l);
    let fused = weighted_resize_sum(&mut s, &vars, w, feats[0].grid);
    let sh = s.g.shape(fused).to_vec();
    let out = s.g.value(fused).clone().reshape(&[sh[0], sh[1] * sh[2], sh[3]])?;
    Ok((out, s.g.value(w).data().to_vec()))
}

/// All spatial encoders plus fusion. With a single scale the fusion step is
/// skipped and the encoder output is returned as is.
#[derive(Clone, Debug)]
pub struct SpatialStream {
    pub patch: PatchConfig,
    encoders: Vec<SpatialEncoder>,
    fusion: Option<ScaleFusion>,
}

pub struct SpatialOutput {
    /// `[k, N_1, D]` on the finest grid.
    pub fused: Var,
    pub per_scale: Vec<Var>,
    pub weights: Option<Var>,
}

impl SpatialStream {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        patch: PatchConfig,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        patch.validate()?;
        if patch.embed_dim != cfg.d_model {
            return Err(Error::config("patch embedding width must equal d_model"));
        }
        if patch.resolutions.len() != 1 && patch.resolutions.len() != 3 {
            return Err(Error::config(format!(
                "spatial stream needs one or exactly three scales, got {}",
                patch.resolutions.len()
            )));
        }
        let encoders = patch
            .resolutions
            .iter()
            .enumerate()
            .map(|(i, &r)| SpatialEncoder::new(store, &format!("{name}.scale{i}"), i, r, cfg, rng))
            .collect::<Vec<_>>();
        let fusion = (encoders.len() > 1)
            .then(|| ScaleFusion::new(store, &format!("{name}.fusion"), cfg.d_model, rng));
        Ok(SpatialStream {
            patch,
            encoders,
            fusion,
        })
    }

    pub fn encoders(&self) -> &[SpatialEncoder] {
        &self.encoders
    }

    pub fn fusion(&self) -> Option<&ScaleFusion> {
        self.fusion.as_ref()
    }

    /// `clip [k, H, W, 3] -> [k, N_1, D]`.
    pub fn forward(&self, s: &mut Session, clip: Var) -> SpatialOutput {
        let per_scale: Vec<Var> = self.encoders.iter().map(|e| e.forward(s, clip)).collect();
        let target = self.patch.grid(0);
        let (fused, weights) = match &self.fusion {
            Some(f) => {
                let (x, w) = f.forward(s, &per_scale, target);
                (x, Some(w))
            }
            None => (per_scale[0], None),
        };
        let sh = s.g.shape(fused).to_vec();
        let fused = s.g.reshape(fused, &[sh[0], sh[1] * sh[2], sh[3]]);
        SpatialOutput {
            fused,
            per_scale,
            weights,
        }
    }
}
