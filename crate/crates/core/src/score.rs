//! Per-frame anomaly scoring of stored clips with a trained model.

use crate::checkpoint::Checkpoint;
use crate::data::{window_starts, ClipStore, Window};
use crate::error::{Error, Result};
use crate::model::{Memories, Model};
use crate::nn::ParamStore;
use crate::objective::{psnr_from_mse, score_sequences, Normalization, ScoreRecord};
use crate::tensor::Tensor;
use crate::train::restore;

/// Peak value used for both PSNR terms.
pub const PSNR_MAX: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipScores {
    pub name: String,
    pub records: Vec<ScoreRecord>,
}

impl ClipScores {
    /// Labels of the scored frames, when every record carries one.
    pub fn labels(&self) -> Option<Vec<u8>> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// A trained model with frozen banks, ready for scoring.
pub struct Scorer {
    pub model: Model,
    pub params: ParamStore,
    pub memories: Memories,
    pub alpha: f64,
    pub ceiling: f64,
    pub normalization: Normalization,
}

impl Scorer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, params, memories) = restore(ckpt)?;
        Ok(Scorer {
            model,
            params,
            memories,
            alpha: ckpt.config.alpha(),
            ceiling: ckpt.config.score.psnr_ceiling,
            normalization: ckpt.config.score.normalization,
        })
    }

    /// Raw frame and motion PSNRs of every scorable frame of `frames
    /// [T, H, W, 3]`; `psnr_combined` and `anomaly_score` are left unset.
    pub fn raw_scores(&self, frames: &Tensor, labels: Option<&[u8]>) -> Result<Vec<ScoreRecord>> {
        let (h, w) = self.model.frame_hw;
        let sh = frames.shape();
        if sh.len() != 4 || (sh[1], sh[2], sh[3]) != (h, w, 3) {
            return Err(Error::Config(format!(
                "clip {:?} does not match the checkpoint frame size {h}x{w}",
                sh
            )));
        }
        let k = self.model.k;
        let mut out = Vec::new();
        for start in window_starts(sh[0], k) {
            let win = Window {
                clip: String::new(),
                start,
                target_index: start + k,
                frames: frames.slice_outer(start, start + k + 1)?,
            };
            let rec = self.model.predict(&self.params, &self.memories, &win.input())?;
            let pf = psnr_from_mse(mse(rec.v_hat.data(), win.target().data()), PSNR_MAX, self.ceiling);
            let pm = psnr_from_mse(
                mse(rec.m_hat.data(), win.motion_target().data()),
                PSNR_MAX,
                self.ceiling,
            );
            let mut r = ScoreRecord::new(win.target_index, pf, pm);
            r.label = labels.and_then(|l| l.get(win.target_index).copied());
            out.push(r);
        }
        Ok(out)
    }

    /// Score in-memory clips, then combine and normalise with the
    /// configured scope. Clips too short to score are dropped.
    pub fn score_frames(&self, clips: &[(String, Tensor, Option<Vec<u8>>)]) -> Result<Vec<ClipScores>> {
        let mut kept = Vec::new();
        let mut raw = Vec::new();
        for (name, frames, labels) in clips {
            let r = self.raw_scores(frames, labels.as_deref())?;
            if r.is_empty() {
                log::warn!("skipping clip {name}: too short to score");
            } else {
                kept.push(name.clone());
                raw.push(r);
            }
        }
        score_sequences(&mut raw, self.alpha, self.normalization)?;
        Ok(kept
            .into_iter()
            .zip(raw)
            .map(|(name, records)| ClipScores { name, records })
            .collect())
    }

    /// Score stored clips by name; labels are attached when present.
    pub fn score(&self, store: &ClipStore, names: &[String]) -> Result<Vec<ClipScores>> {
        let clips = names
            .iter()
            .map(|n| Ok((n.clone(), store.frames(n)?, store.labels(n).ok())))
            .collect::<Result<Vec<_>>>()?;
        self.score_frames(&clips)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
