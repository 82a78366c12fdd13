//! Raw loops for the diagonal selective scan and its adjoint.
//!
//! Layouts: `u`, `y` are `[B, L, E]`; gates `b`, `c` are `[B, L, S]`;
//! `decay` is `[E, S]`; `delta` is `[E]`; stored states are `[B, L, E, S]`.
//!
//! Recurrence per batch element, channel `e` and state `s`:
//! `h_t = decay[e,s] * h_{t-1} + delta[e] * b_t[s] * u_t[e]`,
//! `y_t[e] = sum_s c_t[s] * h_t[e,s]`.

/// Independent partial sums per state reduction, so the loops vectorise.
const LANES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

/// `exp(-exp(delta[e]) * lambda[e, s])`.
pub(crate) fn decay(delta: &[f64], lambda: &[f64], state: usize) -> Vec<f64> {
    lambda
        .iter()
        .enumerate()
        .map(|(i, l)| (-(delta[i / state].exp()) * l).exp())
        .collect()
}

pub(crate) struct ScanRun {
    pub y: Vec<f64>,
    pub states: Option<Vec<f64>>,
    /// Final state per batch element, `[B, E, S]`.
    pub last: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    dims: ScanDims,
    u: &[f64],
    b: &[f64],
    c: &[f64],
    decay: &[f64],
    delta: &[f64],
    h0: Option<&[f64]>,
    keep_states: bool,
) -> ScanRun {
    let ScanDims {
        batch,
        len,
        channels: e,
        state: s,
    } = dims;
    let es = e * s;
    let mut y = vec![0.0; batch * len * e];
    let mut states = if keep_states {
        Some(vec![0.0; batch * len * es])
    } else {
        None
    };
    let mut last = vec![0.0; batch * es];
    for bi in 0..batch {
        let h = &mut last[bi * es..(bi + 1) * es];
        if let Some(h0) = h0 {
            h.copy_from_slice(&h0[bi * es..(bi + 1) * es]);
        }
        for t in 0..len {
            let row = bi * len + t;
            let bt = &b[row * s..(row + 1) * s];
            let ct = &c[row * s..(row + 1) * s];
            for ei in 0..e {
                let drive = delta[ei] * u[row * e + ei];
                let hs = &mut h[ei * s..(ei + 1) * s];
                let ds = &decay[ei * s..(ei + 1) * s];
                let mut acc = [0.0; LANES];
                for si in 0..s {
                    let v = ds[si] * hs[si] + bt[si] * drive;
                    hs[si] = v;
                    acc[si % LANES] += ct[si] * v;
                }
                y[row * e + ei] = acc.iter().sum();
            }
            if let Some(st) = states.as_mut() {
                st[row * es..(row + 1) * es].copy_from_slice(h);
            }
        }
    }
    ScanRun { y, states, last }
}

pub(crate) struct ScanGrads {
    pub du: Vec<f64>,
    pub db: Vec<f64>,
    pub dc: Vec<f64>,
    /// Gradient w.r.t. `delta` through the input drive only.
    pub d_delta: Vec<f64>,
    pub d_decay: Vec<f64>,
}

/// Adjoint of [`scan_forward`] with a zero initial state.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    dims: ScanDims,
    u: &[f64],
    b: &[f64],
    c: &[f64],
    decay: &[f64],
    delta: &[f64],
    states: &[f64],
    gy: &[f64],
) -> ScanGrads {
    let ScanDims {
        batch,
        len,
        channels: e,
        state: s,
    } = dims;
    let es = e * s;
    assert_eq!(states.len(), batch * len * es, "scan states were not recorded");
    let mut du = vec![0.0; u.len()];
    let mut db = vec![0.0; b.len()];
    let mut dc = vec![0.0; c.len()];
    let mut d_delta = vec![0.0; e];
    let mut d_decay = vec![0.0; es];
    let mut gh = vec![0.0; es];
    let zeros = vec![0.0; es];
    for bi in 0..batch {
        gh.fill(0.0);
        for t in (0..len).rev() {
            let row = bi * len + t;
            let h_t = &states[row * es..(row + 1) * es];
            let h_prev = if t > 0 {
                &states[(row - 1) * es..row * es]
            } else {
                &zeros[..]
            };
            let bt = &b[row * s..(row + 1) * s];
            let ct = &c[row * s..(row + 1) * s];
            let dbt = &mut db[row * s..(row + 1) * s];
            let dct = &mut dc[row * s..(row + 1) * s];
            for ei in 0..e {
                let g = gy[row * e + ei];
                let x = u[row * e + ei];
                let dl = delta[ei];
                let drive = dl * x;
                let r = ei * s..(ei + 1) * s;
                let ghs = &mut gh[r.clone()];
                let hts = &h_t[r.clone()];
                let hps = &h_prev[r.clone()];
                let ds = &decay[r.clone()];
                let dds = &mut d_decay[r];
                let mut lanes = [0.0; LANES];
                for si in 0..s {
                    let total = ghs[si] + g * ct[si];
                    dct[si] += g * hts[si];
                    dds[si] += total * hps[si];
                    lanes[si % LANES] += total * bt[si];
                    dbt[si] += total * drive;
                    ghs[si] = total * ds[si];
                }
                let acc: f64 = lanes.iter().sum();
                du[row * e + ei] += acc * dl;
                d_delta[ei] += acc * x;
            }
        }
    }
    ScanGrads {
        du,
        db,
        dc,
        d_delta,
        d_decay,
    }
}
