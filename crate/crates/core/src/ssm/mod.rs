//! Selective state-space primitives and the blocks built on them.
//!
//! The continuous parameters are a per-channel step `delta > 0` and a
//! diagonal decay `lambda > 0` (`[D, S]`). They are discretised as
//! `A = -exp(delta) * lambda`, `decay = exp(A)`, which lies in `(0, 1)` so the
//! recurrence is contractive. Input and output gates are
//! `B_t = delta * silu(x_t W_B)` and `C_t = silu(x_t W_C)` with
//! `W_B, W_C : D -> S`, so each channel receives a rank-1 update
//! `h_t = decay * h_{t-1} + B_t * x_t` and reads `y_t = <C_t, h_t>`.

pub(crate) mod kernel;
mod blocks;

pub use blocks::{MsVssb, ScanLayer, Tmb, Vssb};

use crate::autograd::silu;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use kernel::ScanDims;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveScanParams {
    /// Step per channel, `[D]`.
    pub delta: Tensor,
    /// Diagonal decay rates, `[D, S]`.
    pub lambda: Tensor,
    /// Input-gate projection, `[D, S]`.
    pub w_b: Tensor,
    /// Output-gate projection, `[D, S]`.
    pub w_c: Tensor,
}

impl SelectiveScanParams {
    pub fn channels(&self) -> usize {
        self.delta.len()
    }

    pub fn state_size(&self) -> usize {
        self.lambda.last_dim()
    }

    /// Check shapes and strict positivity of `delta` and `lambda`.
    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        let s = self.state_size();
        for (name, t) in [("lambda", &self.lambda), ("w_b", &self.w_b), ("w_c", &self.w_c)] {
            if t.shape() != [d, s] {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected [{d}, {s}]",
                    t.shape()
                )));
            }
        }
        for (name, t) in [("delta", &self.delta), ("lambda", &self.lambda)] {
            if let Some(v) = t.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Domain(format!("{name} must be finite and > 0, found {v}")));
            }
        }
        if !self.w_b.is_finite() || !self.w_c.is_finite() {
            return Err(Error::Domain("gate projections contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Recurrent state `h`, `[D, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub h: Tensor,
}

impl ScanState {
    pub fn zeros(channels: usize, state: usize) -> Self {
        ScanState {
            h: Tensor::zeros(&[channels, state]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub state_size: usize,
    /// Channel expansion inside a block.
    pub expand: usize,
    /// Depthwise kernel sizes summed by the multi-scale block.
    pub dw_kernels: Vec<usize>,
    pub n_blocks: usize,
    /// Depthwise kernel applied before the scan inside a visual block.
    pub conv_kernel: usize,
    /// Also scan the reversed raster order and sum both directions.
    pub bidirectional: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            d_model: 256,
            state_size: 16,
            expand: 2,
            dw_kernels: vec![1, 3, 5],
            n_blocks: 2,
            conv_kernel: 3,
            bidirectional: false,
        }
    }
}

impl BlockConfig {
    pub fn inner(&self) -> usize {
        self.d_model * self.expand
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.state_size == 0 || self.expand == 0 {
            return Err(Error::config("d_model, state_size and expand must be positive"));
        }
        if self.n_blocks == 0 {
            return Err(Error::config("n_blocks must be at least 1"));
        }
        if self.dw_kernels.is_empty() {
            return Err(Error::config("dw_kernels must not be empty"));
        }
        if let Some(k) = self
            .dw_kernels
            .iter()
            .chain(std::iter::once(&self.conv_kernel))
            .find(|k| **k % 2 == 0)
        {
            return Err(Error::config(format!("kernel sizes must be odd, got {k}")));
        }
        Ok(())
    }
}

/// Discretised decay `exp(-exp(delta) * lambda)` for raw `delta [D]` and
/// `lambda [D, S]`. Zero entries are accepted (a zero `lambda` gives a pure
/// integrator); negative or non-finite entries are rejected.
pub fn discretize(delta: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    let d = delta.len();
    if lambda.shape().len() != 2 || lambda.shape()[0] != d {
        return Err(Error::shape(format!(
            "lambda {:?} does not match delta [{d}]",
            lambda.shape()
        )));
    }
    for (name, t) in [("delta", delta), ("lambda", lambda)] {
        if let Some(v) = t.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("{name} must be finite and >= 0, found {v}")));
        }
    }
    let s = lambda.shape()[1];
    Tensor::new(lambda.shape(), kernel::decay(delta.data(), lambda.data(), s))
}

/// Run the scan over `x [L, D]` from `h0`, returning `y [L, D]` and the
/// final state.
pub fn selective_scan_with_state(
    x: &Tensor,
    params: &SelectiveScanParams,
    h0: &ScanState,
) -> Result<(Tensor, ScanState)> {
    params.validate()?;
    let d = params.channels();
    let s = params.state_size();
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(Error::shape(format!("scan input {:?}, expected [L, {d}]", x.shape())));
    }
    let l = x.shape()[0];
    if l == 0 {
        return Err(Error::Contract("scan needs at least one step".into()));
    }
    if h0.h.shape() != [d, s] {
        return Err(Error::shape(format!("initial state {:?}, expected [{d}, {s}]", h0.h.shape())));
    }
    if !h0.is_finite() {
        return Err(Error::Domain("initial state is not finite".into()));
    }
    let gate = |w: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; l * s];
        crate::autograd::gemm(l, d, s, x.data(), false, w.data(), false, &mut out, 0.0);
        out.into_iter().map(silu).collect()
    };
    let b = gate(&params.w_b);
    let c = gate(&params.w_c);
    let decay = discretize(&params.delta, &params.lambda)?;
    let dims = ScanDims {
        batch: 1,
        len: l,
        channels: d,
        state: s,
    };
    let run = kernel::scan_forward(
        dims,
        x.data(),
        &b,
        &c,
        decay.data(),
        params.delta.data(),
        Some(h0.h.data()),
        false,
    );
    Ok((
        Tensor::new(&[l, d], run.y)?,
        ScanState {
            h: Tensor::new(&[d, s], run.last)?,
        },
    ))
}

/// [`selective_scan_with_state`] discarding the final state.
pub fn selective_scan(x: &Tensor, params: &SelectiveScanParams, h0: &ScanState) -> Result<Tensor> {
    selective_scan_with_state(x, params, h0).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, s: usize, seed: u64) -> SelectiveScanParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SelectiveScanParams {
            delta: Tensor::uniform(&[d], 0.05, 1.0, &mut rng),
            lambda: Tensor::uniform(&[d, s], 0.05, 2.0, &mut rng),
            w_b: Tensor::randn(&[d, s], 0.5, &mut rng),
            w_c: Tensor::randn(&[d, s], 0.5, &mut rng),
        }
    }

    #[test]
    fn discretize_reference_values() {
        let one = |v: f64| Tensor::new(&[1], vec![v]).unwrap();
        let grid = |v: f64| Tensor::new(&[1, 1], vec![v]).unwrap();
        let a = discretize(&one(0.0), &grid(1.0)).unwrap();
        assert!((a.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
        let a = discretize(&one(0.0), &grid(0.0)).unwrap();
        assert_eq!(a.data()[0], 1.0);
        let a = discretize(&one(2f64.ln()), &grid(0.5)).unwrap();
        assert!((a.data()[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn discretize_rejects_bad_domain() {
        let d = Tensor::new(&[1], vec![f64::NAN]).unwrap();
        let l = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        assert!(matches!(discretize(&d, &l), Err(Error::Domain(_))));
        let d = Tensor::new(&[1], vec![0.1]).unwrap();
        let l = Tensor::new(&[1, 1], vec![-1.0]).unwrap();
        assert!(matches!(discretize(&d, &l), Err(Error::Domain(_))));
    }

    #[test]
    fn decay_is_contractive_for_positive_lambda() {
        let p = params(6, 5, 3);
        let a = discretize(&p.delta, &p.lambda).unwrap();
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = params(3, 4, 1);
        let x = Tensor::zeros(&[7, 3]);
        let y = selective_scan(&x, &p, &ScanState::zeros(3, 4)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_has_no_recurrence_term() {
        let p = params(2, 3, 9);
        let x = Tensor::new(&[1, 2], vec![0.7, -1.3]).unwrap();
        let y = selective_scan(&x, &p, &ScanState::zeros(2, 3)).unwrap();
        for d in 0..2 {
            let mut expect = 0.0;
            for s in 0..3 {
                let zb: f64 = (0..2).map(|i| x.data()[i] * p.w_b.data()[i * 3 + s]).sum();
                let zc: f64 = (0..2).map(|i| x.data()[i] * p.w_c.data()[i * 3 + s]).sum();
                let b = p.delta.data()[d] * silu(zb);
                expect += silu(zc) * b * x.data()[d];
            }
            assert!((y.data()[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn state_stays_bounded_on_long_bounded_input() {
        let p = params(4, 4, 5);
        let x = Tensor::full(&[2000, 4], 1.0);
        let (_, st) = selective_scan_with_state(&x, &p, &ScanState::zeros(4, 4)).unwrap();
        assert!(st.is_finite());
        // |h| <= delta * max|b| * |x| / (1 - decay)
        let a = discretize(&p.delta, &p.lambda).unwrap();
        for (i, h) in st.h.data().iter().enumerate() {
            let d = i / 4;
            let bmax: f64 = (0..4)
                .map(|s| silu((0..4).map(|j| p.w_b.data()[j * 4 + s]).sum::<f64>()).abs())
                .fold(0.0, f64::max);
            let bound = p.delta.data()[d] * bmax / (1.0 - a.data()[i]);
            assert!(h.abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_params() {
        let p = params(3, 2, 0);
        let x = Tensor::zeros(&[4, 5]);
        assert!(matches!(
            selective_scan(&x, &p, &ScanState::zeros(3, 2)),
            Err(Error::Shape(_))
        ));
        let mut bad = p.clone();
        bad.delta.data_mut()[0] = 0.0;
        let x = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            selective_scan(&x, &bad, &ScanState::zeros(3, 2)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn block_config_validation() {
        assert!(BlockConfig::default().validate().is_ok());
        let cfg = BlockConfig {
            dw_kernels: vec![1, 2],
            ..BlockConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = BlockConfig {
            n_blocks: 0,
            ..BlockConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
