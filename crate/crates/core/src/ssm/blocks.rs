use std::rc::Rc;

use rand::Rng;

use super::{BlockConfig, SelectiveScanParams};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Gate projections plus step/decay parameters for one scan.
#[derive(Clone, Debug)]
pub struct ScanLayer {
    proj_b: Linear,
    proj_c: Linear,
    delta_log: ParamId,
    lambda_log: ParamId,
    channels: usize,
    state: usize,
}

impl ScanLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Self {
        let proj_b = Linear::new(store, &format!("{name}.w_b"), channels, state, false, rng);
        let proj_c = Linear::new(store, &format!("{name}.w_c"), channels, state, false, rng);
        // Steps log-uniform in [0.01, 0.1]; decay rates log-spaced in [0.05, 2].
        let delta: Vec<f64> = (0..channels)
            .map(|_| rng.gen_range(0.01f64.ln()..0.1f64.ln()))
            .collect();
        let rates: Vec<f64> = (0..state)
            .map(|s| {
                let f = if state > 1 {
                    s as f64 / (state - 1) as f64
                } else {
                    0.0
                };
                (0.05f64.ln() + f * (2.0f64.ln() - 0.05f64.ln())).max(f64::MIN)
            })
            .collect();
        let lambda: Vec<f64> = (0..channels).flat_map(|_| rates.iter().copied()).collect();
        let delta_log = store.add(
            format!("{name}.delta_log"),
            Tensor::new(&[channels], delta).unwrap(),
        );
        let lambda_log = store.add(
            format!("{name}.lambda_log"),
            Tensor::new(&[channels, state], lambda).unwrap(),
        );
        ScanLayer {
            proj_b,
            proj_c,
            delta_log,
            lambda_log,
            channels,
            state,
        }
    }

    /// `u [B, L, E] -> [B, L, E]`.
    pub fn forward(&self, s: &mut Session, u: Var) -> Var {
        let b = self.proj_b.forward(s, u);
        let b = s.g.silu(b);
        let c = self.proj_c.forward(s, u);
        let c = s.g.silu(c);
        let (dl, ll) = (s.p(self.delta_log), s.p(self.lambda_log));
        s.g.selective_scan(u, b, c, dl, ll)
    }

    /// Materialise the positive-domain parameters.
    pub fn params(&self, store: &ParamStore) -> SelectiveScanParams {
        SelectiveScanParams {
            delta: store.get(self.delta_log).map(f64::exp),
            lambda: store.get(self.lambda_log).map(f64::exp),
            w_b: store.get(self.proj_b.weight()).clone(),
            w_c: store.get(self.proj_c.weight()).clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

fn reverse_index(batch: usize, len: usize, inner: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(batch * len * inner);
    for b in 0..batch {
        for t in (0..len).rev() {
            let base = (b * len + t) * inner;
            idx.extend(base..base + inner);
        }
    }
    Rc::new(idx)
}

/// Visual state-space block over a token grid `[B, H, W, D]`:
/// `x + out(scan(silu(dwconv(in_x(LN x)))) * silu(in_z(LN x)))`,
/// scanning tokens in raster order.
#[derive(Clone, Debug)]
pub struct Vssb {
    norm: LayerNorm,
    in_x: Linear,
    in_z: Linear,
    conv: ParamId,
    conv_bias: ParamId,
    scan: ScanLayer,
    scan_rev: Option<ScanLayer>,
    out: Linear,
    d_model: usize,
}

impl Vssb {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let e = cfg.inner();
        let k = cfg.conv_kernel;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let in_x = Linear::new(store, &format!("{name}.in_x"), d, e, true, rng);
        let in_z = Linear::new(store, &format!("{name}.in_z"), d, e, false, rng);
        let conv = store.add(
            format!("{name}.conv"),
            Tensor::randn(&[k, k, e], 1.0 / k as f64, rng),
        );
        let conv_bias = store.add(format!("{name}.conv_bias"), Tensor::zeros(&[e]));
        let scan = ScanLayer::new(store, &format!("{name}.scan"), e, cfg.state_size, rng);
        let scan_rev = cfg
            .bidirectional
            .then(|| ScanLayer::new(store, &format!("{name}.scan_rev"), e, cfg.state_size, rng));
        let out = Linear::with_std(
            store,
            &format!("{name}.out"),
            e,
            d,
            true,
            0.5 / (e as f64).sqrt(),
            rng,
        );
        Vssb {
            norm,
            in_x,
            in_z,
            conv,
            conv_bias,
            scan,
            scan_rev,
            out,
            d_model: d,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let shape = s.g.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "visual block input must be [B, H, W, D]");
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let y = self.norm.forward(s, x);
        let u = self.in_x.forward(s, y);
        let k = s.p(self.conv);
        let u = s.g.dwconv2d(u, k);
        let cb = s.p(self.conv_bias);
        let u = s.g.add_bias(u, cb);
        let u = s.g.silu(u);
        let e = s.g.shape(u)[3];
        let u = s.g.reshape(u, &[b, h * w, e]);
        let mut sc = self.scan.forward(s, u);
        if let Some(rev) = &self.scan_rev {
            let idx = reverse_index(b, h * w, e);
            let ur = s.g.gather(u, idx.clone(), &[b, h * w, e]);
            let yr = rev.forward(s, ur);
            let yr = s.g.gather(yr, idx, &[b, h * w, e]);
            sc = s.g.add(sc, yr);
        }
        let z = self.in_z.forward(s, y);
        let z = s.g.silu(z);
        let z = s.g.reshape(z, &[b, h * w, e]);
        let gated = s.g.mul(sc, z);
        let o = self.out.forward(s, gated);
        let o = s.g.reshape(o, &[b, h, w, self.d_model]);
        s.g.add(x, o)
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out
    }

    pub fn scan(&self) -> &ScanLayer {
        &self.scan
    }

    /// Forward on a plain `[N, D]` token matrix laid out on an `h x w` grid.
    pub fn apply(&self, store: &ParamStore, tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let x = grid_input(tokens, grid, self.d_model)?;
        let mut s = Session::inference(store);
        let v = s.g.constant(x);
        let y = self.forward(&mut s, v);
        Ok(s.g.value(y).clone().reshape(tokens.shape())?)
    }
}

pub(crate) fn grid_input(tokens: &Tensor, grid: (usize, usize), d: usize) -> Result<Tensor> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::shape(format!("tokens {:?}, expected [N, {d}]", shape)));
    }
    if grid.0 * grid.1 != shape[0] || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "{} tokens do not form a {}x{} grid",
            shape[0], grid.0, grid.1
        )));
    }
    tokens.clone().reshape(&[1, grid.0, grid.1, d])
}

/// Multi-scale visual block: `Vssb(sum_j dwconv_j(P) + P)` over kernels
/// `cfg.dw_kernels`.
#[derive(Clone, Debug)]
pub struct MsVssb {
    dw: Vec<(usize, ParamId)>,
    block: Vssb,
}

impl MsVssb {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let dw = cfg
            .dw_kernels
            .iter()
            .map(|&k| {
                let t = Tensor::randn(&[k, k, d], 0.5 / k as f64, rng);
                (k, store.add(format!("{name}.dw{k}"), t))
            })
            .collect();
        let block = Vssb::new(store, &format!("{name}.vssb"), cfg, rng);
        MsVssb { dw, block }
    }

    /// Summed depthwise branches `X = sum_j dwconv_j(P)`.
    pub fn multi_scale_conv(&self, s: &mut Session, p: Var) -> Var {
        let mut acc: Option<Var> = None;
        for &(_, k) in &self.dw {
            let kv = s.p(k);
            let y = s.g.dwconv2d(p, kv);
            acc = Some(match acc {
                Some(a) => s.g.add(a, y),
                None => y,
            });
        }
        acc.expect("at least one depthwise kernel")
    }

    pub fn forward(&self, s: &mut Session, p: Var) -> Var {
        let x = self.multi_scale_conv(s, p);
        let inp = s.g.add(x, p);
        self.block.forward(s, inp)
    }

    pub fn kernels(&self) -> &[(usize, ParamId)] {
        &self.dw
    }

    pub fn inner(&self) -> &Vssb {
        &self.block
    }

    pub fn apply(&self, store: &ParamStore, tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let x = grid_input(tokens, grid, self.block.d_model)?;
        let mut s = Session::inference(store);
        let v = s.g.constant(x);
        let y = self.forward(&mut s, v);
        Ok(s.g.value(y).clone().reshape(tokens.shape())?)
    }
}

/// Temporal block over per-token sequences `[B, L, D]`:
/// `x + out(scan(silu(in_x(LN x))) * silu(in_z(LN x)))`.
#[derive(Clone, Debug)]
pub struct Tmb {
    norm: LayerNorm,
    in_x: Linear,
    in_z: Linear,
    scan: ScanLayer,
    out: Linear,
}

impl Tmb {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let e = cfg.inner();
        Tmb {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            in_x: Linear::new(store, &format!("{name}.in_x"), d, e, false, rng),
            in_z: Linear::new(store, &format!("{name}.in_z"), d, e, false, rng),
            scan: ScanLayer::new(store, &format!("{name}.scan"), e, cfg.state_size, rng),
            out: Linear::with_std(
                store,
                &format!("{name}.out"),
                e,
                d,
                false,
                0.5 / (e as f64).sqrt(),
                rng,
            ),
        }
    }

    /// The residual branch alone.
    pub fn branch(&self, s: &mut Session, x: Var) -> Var {
        let y = self.norm.forward(s, x);
        let u = self.in_x.forward(s, y);
        let u = s.g.silu(u);
        let sc = self.scan.forward(s, u);
        let z = self.in_z.forward(s, y);
        let z = s.g.silu(z);
        let gated = s.g.mul(sc, z);
        self.out.forward(s, gated)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let o = self.branch(s, x);
        s.g.add(x, o)
    }

    pub fn scan(&self) -> &ScanLayer {
        &self.scan
    }
}
