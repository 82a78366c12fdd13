//! Stream fusion, feature decomposition, prototype memories and decoders.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, ParamId, ParamStore, Session, LN_EPS};
use crate::tensor::Tensor;

/// Norm regulariser for cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

/// `LN(g + h)` over the channel axis, without the learned affine.
pub fn fuse(g: &Tensor, h: &Tensor) -> Result<Tensor> {
    if g.shape() != h.shape() {
        return Err(Error::Contract(format!(
            "spatial {:?} and temporal {:?} features differ in shape",
            g.shape(),
            h.shape()
        )));
    }
    let mut s = Session::inference(&ParamStore::new());
    let (a, b) = (s.g.constant(g.clone()), s.g.constant(h.clone()));
    let sum = s.g.add(a, b);
    let out = s.g.layer_norm(sum, LN_EPS);
    Ok(s.g.value(out).clone())
}

/// Learned-affine variant of [`fuse`] used inside the model.
#[derive(Clone, Debug)]
pub struct FeatureFuser {
    ln: LayerNorm,
}

impl FeatureFuser {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        FeatureFuser {
            ln: LayerNorm::new(store, name, d),
        }
    }

    pub fn forward(&self, s: &mut Session, g: Var, h: Var) -> Var {
        assert_eq!(s.g.shape(g), s.g.shape(h), "fusion inputs differ in shape");
        let x = s.g.add(g, h);
        self.ln.forward(s, x)
    }
}

/// Fused features and their three components, each `[k, N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub f_fused: Tensor,
    pub f_common: Tensor,
    pub f_app: Tensor,
    pub f_motion: Tensor,
}

/// Graph handles produced by [`Decomposer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub gate: Var,
    pub common: Var,
    pub residual: Var,
    pub app: Var,
    pub motion: Var,
}

/// Gated split into a common part and residual-derived task features.
#[derive(Clone, Debug)]
pub struct Decomposer {
    pub common: Mlp,
    pub app: Mlp,
    pub motion: Mlp,
}

impl Decomposer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Decomposer {
            common: Mlp::new(store, &format!("{name}.common"), d, d, d, rng),
            app: Mlp::new(store, &format!("{name}.app"), d, d, d, rng),
            motion: Mlp::new(store, &format!("{name}.motion"), d, d, d, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, f: Var) -> Decomposition {
        let logits = self.common.forward(s, f);
        let gate = s.g.sigmoid(logits);
        let common = s.g.mul(gate, f);
        let residual = s.g.sub(f, common);
        let app = self.app.forward(s, residual);
        let motion = self.motion.forward(s, residual);
        Decomposition {
            gate,
            common,
            residual,
            app,
            motion,
        }
    }

    /// Decompose `f [.., D]` with frozen parameters.
    pub fn apply(&self, store: &ParamStore, f: &Tensor) -> Result<FusedFeatures> {
        if !f.is_finite() {
            return Err(Error::Domain("fused features must be finite".into()));
        }
        let mut s = Session::inference(store);
        let x = s.g.constant(f.clone());
        let d = self.forward(&mut s, x);
        Ok(FusedFeatures {
            f_fused: f.clone(),
            f_common: s.g.value(d.common).clone(),
            f_app: s.g.value(d.app).clone(),
            f_motion: s.g.value(d.motion).clone(),
        })
    }
}

/// Whether the caller may mutate memory banks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Training,
    Inference,
}

/// `M x D` prototype matrix read by cosine-softmax addressing.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    slots: Tensor,
    pub temperature: f64,
}

pub const DEFAULT_SLOTS: usize = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn normalized_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = (row.iter().map(|x| x * x).sum::<f64>() + COSINE_EPS * COSINE_EPS).sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.last_dim());
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).unwrap()
}

impl MemoryBank {
    /// Random unit-norm slots.
    pub fn new<R: Rng>(m: usize, d: usize, rng: &mut R) -> Self {
        let slots = normalized_rows(&Tensor::randn(&[m, d], 1.0, rng));
        MemoryBank {
            slots,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn from_slots(slots: Tensor, temperature: f64) -> Result<Self> {
        if slots.shape().len() != 2 || slots.shape()[0] == 0 {
            return Err(Error::shape(format!("memory slots {:?}, expected [M, D]", slots.shape())));
        }
        if !slots.is_finite() {
            return Err(Error::Domain("memory slots must be finite".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("memory temperature {temperature}")));
        }
        Ok(MemoryBank { slots, temperature })
    }

    pub fn slots(&self) -> &Tensor {
        &self.slots
    }

    pub fn m(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.slots.shape()[1]
    }

    /// Graph read of `query [.., D]`: returns retrieved `[.., D]` and
    /// weights `[.., M]`. The bank itself is a constant.
    pub fn read_var(&self, s: &mut Session, query: Var) -> (Var, Var) {
        let q = s.g.normalize_rows(query, COSINE_EPS);
        let keys = s.g.constant(transpose(&normalized_rows(&self.slots)));
        let sim = s.g.matmul(q, keys);
        let logits = s.g.scale(sim, 1.0 / self.temperature);
        let w = s.g.softmax(logits);
        let slots = s.g.constant(self.slots.clone());
        (s.g.matmul(w, slots), w)
    }

    pub fn read(&self, query: &Tensor) -> Result<(Tensor, Tensor)> {
        if query.shape().is_empty() || query.last_dim() != self.dim() {
            return Err(Error::shape(format!(
                "query {:?} against bank of width {}",
                query.shape(),
                self.dim()
            )));
        }
        let mut s = Session::inference(&ParamStore::new());
        let q = s.g.constant(query.clone());
        let (r, w) = self.read_var(&mut s, q);
        Ok((s.g.value(r).clone(), s.g.value(w).clone()))
    }

    /// Move each slot towards the items that address it. Item weights are
    /// a softmax over the batch of the slot's similarities.
    pub fn write(&mut self, items: &Tensor, phase: Phase) -> Result<()> {
        if phase != Phase::Training {
            return Err(Error::Mode);
        }
        if items.is_empty() {
            return Ok(());
        }
        let d = self.dim();
        if items.last_dim() != d {
            return Err(Error::shape(format!("items {:?} against bank of width {d}", items.shape())));
        }
        if !items.is_finite() {
            return Err(Error::Domain("memory items must be finite".into()));
        }
        let n = items.rows();
        let q = normalized_rows(items);
        let keys = normalized_rows(&self.slots);
        let m = self.m();
        for j in 0..m {
            let key = &keys.data()[j * d..(j + 1) * d];
            let logits: Vec<f64> = q
                .data()
                .chunks(d)
                .map(|qi| qi.iter().zip(key).map(|(a, b)| a * b).sum::<f64>() / self.temperature)
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let slot = &mut self.slots.data_mut()[j * d..(j + 1) * d];
            for i in 0..n {
                let w = e[i] / z;
                for (s, x) in slot.iter_mut().zip(&q.data()[i * d..(i + 1) * d]) {
                    *s += w * x;
                }
            }
        }
        // A slot cancelled out by its items keeps its previous direction.
        for (slot, key) in self.slots.data_mut().chunks_mut(d).zip(keys.data().chunks(d)) {
            if slot.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-6 {
                slot.copy_from_slice(key);
            }
        }
        self.slots = normalized_rows(&self.slots);
        Ok(())
    }
}

/// Predicted frame and motion field, `[H, W, 3]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub v_hat: Tensor,
    pub m_hat: Tensor,
}

/// Output squashing of a decoder head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Squash {
    /// `(0, 1)`, for frames.
    Sigmoid,
    /// `(-1, 1)`, for frame differences.
    Tanh,
}

/// Token grid to full-resolution image: a linear projection to `r x r`
/// sub-pixels per token, depth-to-space, then two 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct Decoder {
    proj: Linear,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    pub patch: usize,
    pub channels: usize,
    pub squash: Squash,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        patch: usize,
        channels: usize,
        squash: Squash,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), d_in, patch * patch * channels, true, rng);
        let std = 1.0 / ((9 * channels) as f64).sqrt();
        let conv = |store: &mut ParamStore, tag: &str, cout: usize, rng: &mut R| {
            (
                store.add(format!("{name}.{tag}.w"), Tensor::randn(&[3, 3, channels, cout], std, rng)),
                store.add(format!("{name}.{tag}.b"), Tensor::zeros(&[cout])),
            )
        };
        let conv1 = conv(store, "conv1", channels, rng);
        let conv2 = conv(store, "conv2", 3, rng);
        Decoder {
            proj,
            conv1,
            conv2,
            patch,
            channels,
            squash,
        }
    }

    /// `x [B, nh * nw, d_in] -> [B, nh * r, nw * r, 3]`.
    pub fn forward(&self, s: &mut Session, x: Var, grid: (usize, usize)) -> Var {
        let sh = s.g.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "decoder input must be [B, N, D]");
        assert_eq!(sh[1], grid.0 * grid.1, "decoder grid mismatch");
        let b = sh[0];
        let p = self.proj.forward(s, x);
        let idx = Rc::new(depth_to_space_index(b, grid.0, grid.1, self.patch, self.channels));
        let (h, w) = (grid.0 * self.patch, grid.1 * self.patch);
        let img = s.g.gather(p, idx, &[b, h, w, self.channels]);
        let mut y = s.g.silu(img);
        for (i, (wid, bid)) in [self.conv1, self.conv2].into_iter().enumerate() {
            let (wv, bv) = (s.p(wid), s.p(bid));
            let c = s.g.conv2d(y, wv);
            y = s.g.add_bias(c, bv);
            if i == 0 {
                y = s.g.silu(y);
            }
        }
        match self.squash {
            Squash::Sigmoid => s.g.sigmoid(y),
            Squash::Tanh => s.g.tanh(y),
        }
    }
}

/// Gather index turning `[B, nh, nw, r*r*C]` into `[B, nh*r, nw*r, C]`.
pub fn depth_to_space_index(b: usize, nh: usize, nw: usize, r: usize, c: usize) -> Vec<usize> {
    let (h, w) = (nh * r, nw * r);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let token = (bi * nh + y / r) * nw + x / r;
                let sub = (y % r) * r + x % r;
                let base = token * r * r * c + sub * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_temporal_input_is_plain_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let out = fuse(&g, &Tensor::zeros(&[2, 3, 8])).unwrap();
        for row in out.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_shapes() {
        let r = fuse(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[4, 2]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    fn zero_decomposer(d: usize) -> (ParamStore, Decomposer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decomposer::new(&mut store, "dec", d, &mut rng);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        (store, dec)
    }

    #[test]
    fn zero_logits_halve_the_features() {
        let (store, dec) = zero_decomposer(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let out = dec.apply(&store, &f).unwrap();
        assert!(out.f_common.max_abs_diff(&f.map(|x| x / 2.0)) == 0.0);
    }

    #[test]
    fn saturated_gate_passes_everything_to_common() {
        let (mut store, dec) = zero_decomposer(4);
        let bias = dec.common.l2.bias().unwrap();
        store.get_mut(bias).data_mut().iter_mut().for_each(|x| *x = 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let out = dec.apply(&store, &f).unwrap();
        assert!(out.f_common.max_abs_diff(&f) < 1e-20);
    }

    #[test]
    fn one_hot_read_on_matching_slot() {
        let mut slots = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            slots.data_mut()[i * 4 + i] = 1.0;
        }
        let bank = MemoryBank::from_slots(slots.clone(), 0.01).unwrap();
        let q = Tensor::new(&[1, 4], vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        let (r, w) = bank.read(&q).unwrap();
        assert!(w.data()[3] > 1.0 - 1e-12);
        assert!((r.data()[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_slots_return_that_slot() {
        let row = [0.3, -0.2, 0.9];
        let slots = Tensor::new(&[5, 3], row.repeat(5)).unwrap();
        let bank = MemoryBank::from_slots(slots, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (r, _) = bank.read(&Tensor::randn(&[7, 3], 1.0, &mut rng)).unwrap();
        for out in r.data().chunks(3) {
            for (a, b) in out.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_reads_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = MemoryBank::new(10, 6, &mut rng);
        let (_, w) = bank.read(&Tensor::zeros(&[1, 6])).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.1).abs() < 1e-12));
    }

    #[test]
    fn inference_write_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut bank = MemoryBank::new(3, 4, &mut rng);
        let items = Tensor::randn(&[2, 4], 1.0, &mut rng);
        assert!(matches!(bank.write(&items, Phase::Inference), Err(Error::Mode)));
    }

    #[test]
    fn empty_write_keeps_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut bank = MemoryBank::new(3, 4, &mut rng);
        let before = bank.clone();
        bank.write(&Tensor::zeros(&[0, 4]), Phase::Training).unwrap();
        assert_eq!(bank, before);
    }

    #[test]
    fn writing_a_slot_back_keeps_its_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = MemoryBank::new(4, 5, &mut rng);
        let slot1 = bank.slots().slice_outer(1, 2).unwrap();
        bank.write(&slot1, Phase::Training).unwrap();
        let after = bank.slots().slice_outer(1, 2).unwrap();
        assert!(after.max_abs_diff(&slot1) < 1e-12);
        for row in bank.slots().data().chunks(5) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_to_space_places_subpixels() {
        // One token with 2x2 sub-pixels of one channel each.
        let idx = depth_to_space_index(1, 1, 2, 2, 1);
        assert_eq!(idx, vec![0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn decoder_reaches_full_resolution_in_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dec = Decoder::new(&mut store, "dec", 6, 4, 3, Squash::Sigmoid, &mut rng);
        let mut s = Session::inference(&store);
        let x = s.g.constant(Tensor::randn(&[2, 6, 6], 3.0, &mut rng));
        let y = dec.forward(&mut s, x, (2, 3));
        assert_eq!(s.g.shape(y), &[2, 8, 12, 3]);
        assert!(s.g.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
