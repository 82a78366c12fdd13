//! Training losses, PSNR and per-frame anomaly scores.
//!
//! Squared and absolute norms are means over elements, so the weights do not
//! depend on resolution. Every loss exists both as a graph op (for training)
//! and as a plain function on tensors.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::fusion::COSINE_EPS;
use crate::mix::RowMix;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CEILING: f64 = 60.0;
const MSE_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_s: f64,
    pub lambda_g: f64,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_m: 0.5,
            lambda_s: 0.1,
            lambda_g: 0.2,
            lambda_ssim: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_m", self.lambda_m),
            ("lambda_s", self.lambda_s),
            ("lambda_g", self.lambda_g),
            ("lambda_ssim", self.lambda_ssim),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which optional terms enter the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub motion: bool,
    pub separate: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        motion: true,
        separate: true,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub frame: f64,
    pub motion: f64,
    pub separate: f64,
}

pub fn loss_total(parts: LossParts, w: &LossWeights, terms: LossTerms) -> f64 {
    let mut total = parts.frame;
    if terms.motion {
        total += w.lambda_m * parts.motion;
    }
    if terms.separate {
        total += w.lambda_s * parts.separate;
    }
    total
}

/// `[H, W, C]` or `[B, H, W, C]` as `(B, H, W, C)`.
fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(format!("image {:?}, expected [(B,) H, W, C]", shape))),
    }
}

fn check_pair(s: &Session, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
    if s.g.shape(a) != s.g.shape(b) {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            s.g.shape(a),
            s.g.shape(b)
        )));
    }
    image_dims(s.g.shape(a))
}

/// MSE plus `lambda_g` times the mean absolute difference of forward
/// spatial gradients, x and y differences pooled into one mean.
pub fn loss_frame_var(s: &mut Session, v_hat: Var, v: Var, lambda_g: f64) -> Result<Var> {
    let (b, h, w, c) = check_pair(s, v_hat, v)?;
    let diff = s.g.sub(v_hat, v);
    let sq = s.g.square(diff);
    let mse = s.g.mean(sq);
    let (nx, ny) = (h * (w - 1), (h - 1) * w);
    if lambda_g == 0.0 || nx + ny == 0 {
        return Ok(mse);
    }
    let flat = s.g.reshape(diff, &[b, h * w, c]);
    let mut grad = None;
    for (mix, n) in [(RowMix::diff_x(h, w), nx), (RowMix::diff_y(h, w), ny)] {
        if n == 0 {
            continue;
        }
        let d = s.g.row_mix(flat, Rc::new(mix), 1);
        let a = s.g.abs(d);
        let m = s.g.mean(a);
        let m = s.g.scale(m, lambda_g * n as f64 / (nx + ny) as f64);
        grad = Some(match grad {
            Some(g) => s.g.add(g, m),
            None => m,
        });
    }
    Ok(s.g.add(mse, grad.unwrap()))
}

/// Mean SSIM over valid window positions, channels and batch.
pub fn ssim_var(s: &mut Session, x: Var, y: Var) -> Result<Var> {
    let (b, h, w, c) = check_pair(s, x, y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = Rc::new(RowMix::gaussian_valid(h, w, SSIM_WINDOW, SSIM_SIGMA));
    let xf = s.g.reshape(x, &[b, h * w, c]);
    let yf = s.g.reshape(y, &[b, h * w, c]);
    let filt = |s: &mut Session, t: Var| s.g.row_mix(t, win.clone(), 1);
    let mu_x = filt(s, xf);
    let mu_y = filt(s, yf);
    let xx = s.g.mul(xf, xf);
    let yy = s.g.mul(yf, yf);
    let xy = s.g.mul(xf, yf);
    let exx = filt(s, xx);
    let eyy = filt(s, yy);
    let exy = filt(s, xy);
    let mxx = s.g.mul(mu_x, mu_x);
    let myy = s.g.mul(mu_y, mu_y);
    let mxy = s.g.mul(mu_x, mu_y);
    let var_x = s.g.sub(exx, mxx);
    let var_y = s.g.sub(eyy, myy);
    let cov = s.g.sub(exy, mxy);
    let n1 = s.g.scale(mxy, 2.0);
    let n1 = s.g.add_const(n1, SSIM_C1);
    let n2 = s.g.scale(cov, 2.0);
    let n2 = s.g.add_const(n2, SSIM_C2);
    let d1 = s.g.add(mxx, myy);
    let d1 = s.g.add_const(d1, SSIM_C1);
    let d2 = s.g.add(var_x, var_y);
    let d2 = s.g.add_const(d2, SSIM_C2);
    let num = s.g.mul(n1, n2);
    let den = s.g.mul(d1, d2);
    let map = s.g.div(num, den);
    Ok(s.g.mean(map))
}

/// MSE plus `lambda_ssim * (1 - SSIM)`.
pub fn loss_motion_var(s: &mut Session, m_hat: Var, m: Var, lambda_ssim: f64) -> Result<Var> {
    check_pair(s, m_hat, m)?;
    let diff = s.g.sub(m_hat, m);
    let sq = s.g.square(diff);
    let mse = s.g.mean(sq);
    if lambda_ssim == 0.0 {
        return Ok(mse);
    }
    let ssim = ssim_var(s, m_hat, m)?;
    let dissim = s.g.scale(ssim, -lambda_ssim);
    let dissim = s.g.add_const(dissim, lambda_ssim);
    Ok(s.g.add(mse, dissim))
}

/// Negative mean token cosine plus the squared Frobenius norm of the
/// cross-product of the row-normalised matrices, divided by `T^2`.
pub fn loss_separate_var(s: &mut Session, app: Var, motion: Var) -> Result<Var> {
    if s.g.shape(app) != s.g.shape(motion) {
        return Err(Error::shape(format!(
            "appearance {:?} and motion {:?} features differ",
            s.g.shape(app),
            s.g.shape(motion)
        )));
    }
    let d = s.g.value(app).last_dim();
    let t = s.g.value(app).rows();
    let a = s.g.normalize_rows(app, COSINE_EPS);
    let m = s.g.normalize_rows(motion, COSINE_EPS);
    let am = s.g.mul(a, m);
    let cos = s.g.sum_last(am);
    let cos = s.g.mean(cos);
    // ||A M^T||_F^2 = <A^T A, M^T M>_F, which stays D x D for any T.
    let ga = s.g.matmul_tn(a, a);
    let gm = s.g.matmul_tn(m, m);
    let prod = s.g.mul(ga, gm);
    let frob = s.g.mean(prod);
    let frob = s.g.scale(frob, (d * d) as f64 / (t * t) as f64);
    Ok(s.g.sub(frob, cos))
}

/// Weighted total; disabled terms are left out of the graph.
pub fn loss_total_var(
    s: &mut Session,
    frame: Var,
    motion: Option<Var>,
    separate: Option<Var>,
    w: &LossWeights,
) -> Var {
    let mut total = frame;
    if let Some(m) = motion {
        let m = s.g.scale(m, w.lambda_m);
        total = s.g.add(total, m);
    }
    if let Some(sep) = separate {
        let sep = s.g.scale(sep, w.lambda_s);
        total = s.g.add(total, sep);
    }
    total
}

fn eval_pair(
    a: &Tensor,
    b: &Tensor,
    f: impl FnOnce(&mut Session, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut s = Session::inference(&ParamStore::new());
    let (x, y) = (s.g.constant(a.clone()), s.g.constant(b.clone()));
    let out = f(&mut s, x, y)?;
    Ok(s.g.value(out).data()[0])
}

pub fn loss_frame(v_hat: &Tensor, v: &Tensor, lambda_g: f64) -> Result<f64> {
    eval_pair(v_hat, v, |s, a, b| loss_frame_var(s, a, b, lambda_g))
}

pub fn loss_motion(m_hat: &Tensor, m: &Tensor, lambda_ssim: f64) -> Result<f64> {
    eval_pair(m_hat, m, |s, a, b| loss_motion_var(s, a, b, lambda_ssim))
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    eval_pair(x, y, ssim_var)
}

pub fn loss_separate(app: &Tensor, motion: &Tensor) -> Result<f64> {
    eval_pair(app, motion, loss_separate_var)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(max^2 / mse)`, never above `ceiling`.
pub fn psnr_from_mse(mse: f64, max_val: f64, ceiling: f64) -> f64 {
    if mse < MSE_FLOOR {
        return ceiling;
    }
    (10.0 * (max_val * max_val / mse).log10()).min(ceiling)
}

pub fn psnr(x_hat: &Tensor, x: &Tensor, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x_hat, x)?, max_val, PSNR_CEILING))
}

/// One scored frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub frame_index: usize,
    pub psnr_frame: f64,
    pub psnr_motion: f64,
    pub psnr_combined: f64,
    pub anomaly_score: f64,
    pub label: Option<u8>,
}

impl ScoreRecord {
    pub fn new(frame_index: usize, psnr_frame: f64, psnr_motion: f64) -> Self {
        ScoreRecord {
            frame_index,
            psnr_frame,
            psnr_motion,
            psnr_combined: f64::NAN,
            anomaly_score: f64::NAN,
            label: None,
        }
    }
}

/// Scope of the min-max normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PerVideo,
    Global,
}

fn combine(records: &mut [ScoreRecord], alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    for r in records.iter_mut() {
        r.psnr_combined = if alpha == 1.0 {
            r.psnr_frame
        } else {
            alpha * r.psnr_frame + (1.0 - alpha) * r.psnr_motion
        };
    }
    Ok(())
}

fn normalize(mut records: Vec<&mut ScoreRecord>) {
    let (lo, hi) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.psnr_combined), hi.max(r.psnr_combined))
    });
    for r in records.iter_mut() {
        r.anomaly_score = if hi > lo {
            1.0 - (r.psnr_combined - lo) / (hi - lo)
        } else {
            0.5
        };
    }
}

/// Combine PSNRs with weight `alpha` on the frame term, min-max normalise
/// over the sequence and invert so that high scores mean anomalous.
pub fn combine_and_normalize(records: &mut [ScoreRecord], alpha: f64) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Contract("cannot normalise an empty score sequence".into()));
    }
    combine(records, alpha)?;
    normalize(records.iter_mut().collect());
    Ok(())
}

/// Score several clips, normalising per clip or over their union.
pub fn score_sequences(clips: &mut [Vec<ScoreRecord>], alpha: f64, scope: Normalization) -> Result<()> {
    match scope {
        Normalization::PerVideo => {
            for c in clips.iter_mut() {
                combine_and_normalize(c, alpha)?;
            }
        }
        Normalization::Global => {
            if clips.iter().all(|c| c.is_empty()) {
                return Err(Error::Contract("cannot normalise an empty score sequence".into()));
            }
            for c in clips.iter_mut() {
                combine(c, alpha)?;
            }
            normalize(clips.iter_mut().flat_map(|c| c.iter_mut()).collect());
        }
    }
    Ok(())
}

pub const SCORES_HEADER: &str = "frame_index,psnr_frame,psnr_motion,psnr_combined,anomaly_score";

pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(SCORES_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.frame_index, r.psnr_frame, r.psnr_motion, r.psnr_combined, r.anomaly_score
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    frame_index: usize,
    psnr_frame: f64,
    psnr_motion: f64,
    psnr_combined: f64,
    anomaly_score: f64,
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>().join(",") != SCORES_HEADER {
        return Err(Error::format(path, format!("expected header {SCORES_HEADER}")));
    }
    rdr.deserialize::<ScoreRow>()
        .map(|row| {
            let r = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok(ScoreRecord {
                frame_index: r.frame_index,
                psnr_frame: r.psnr_frame,
                psnr_motion: r.psnr_motion,
                psnr_combined: r.psnr_combined,
                anomaly_score: r.anomaly_score,
                label: None,
            })
        })
        .collect()
}
