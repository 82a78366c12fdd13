//! Adam training on normal clips with step-wise learning-rate decay.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::checkpoint::{Checkpoint, TrainingState};
use crate::config::RunConfig;
use crate::data::window_starts;
use crate::error::{Error, Result};
use crate::fusion::{MemoryBank, Phase};
use crate::model::{Memories, Model};
use crate::nn::{ParamStore, Session};
use crate::objective::{loss_frame_var, loss_motion_var, loss_separate_var, loss_total_var};
use crate::tensor::Tensor;

pub const LOSS_LOG_HEADER: &str = "step,l_frame,l_motion,l_separate,l_total";

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn learning_rate(cfg: &RunConfig, epoch: usize) -> f64 {
    cfg.train.lr * cfg.train.lr_decay.powi((epoch / cfg.train.lr_decay_every) as i32)
}

/// Loss terms of one window, as graph nodes.
pub struct WindowLosses {
    pub frame: Var,
    pub motion: Option<Var>,
    pub separate: Option<Var>,
    pub total: Var,
    pub queries: [Var; 3],
}

/// Forward one window (`[k + 1, H, W, 3]`, target last) and build its loss.
pub fn window_losses(
    s: &mut Session,
    model: &Model,
    mem: &Memories,
    cfg: &RunConfig,
    window: &Tensor,
) -> Result<WindowLosses> {
    let k = window.shape()[0] - 1;
    let hw = window.shape()[1..].to_vec();
    let clip = s.g.constant(window.slice_outer(0, k)?);
    let target = window.slice_outer(k, k + 1)?.reshape(&hw)?;
    let prev = window.slice_outer(k - 1, k)?.reshape(&hw)?;
    let out = model.forward(s, mem, clip)?;
    let terms = cfg.ablation.loss_terms();
    let v = s.g.constant(target.clone());
    let frame = loss_frame_var(s, out.v_hat, v, cfg.loss.lambda_g)?;
    let motion = if terms.motion {
        let diff = target.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
        let m = s.g.constant(Tensor::new(&hw, diff)?);
        Some(loss_motion_var(s, out.m_hat, m, cfg.loss.lambda_ssim)?)
    } else {
        None
    };
    let separate = match (terms.separate, out.app, out.motion) {
        (true, Some(a), Some(m)) => Some(loss_separate_var(s, a, m)?),
        _ => None,
    };
    let total = loss_total_var(s, frame, motion, separate, &cfg.loss);
    Ok(WindowLosses {
        frame,
        motion,
        separate,
        total,
        queries: out.queries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub frame: f64,
    pub motion: f64,
    pub separate: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9}",
            self.step, self.frame, self.motion, self.separate, self.total
        )
    }
}

/// Model, parameters, memories and optimiser state over a fixed set of
/// training clips held in memory.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamStore,
    pub memories: Memories,
    pub adam: Adam,
    pub step: usize,
    clips: Vec<Tensor>,
    windows: Vec<(usize, usize)>,
}

impl Trainer {
    /// Fresh model seeded from `cfg.seed`. `clips` are `[T, H, W, 3]`.
    pub fn new(cfg: RunConfig, clips: Vec<Tensor>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let model = Model::new(&cfg, &mut params, &mut rng)?;
        let memories = Memories::new(&cfg, &mut rng);
        let adam = Adam::new(&params);
        Self::assemble(cfg, model, params, memories, adam, 0, clips)
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, clips: Vec<Tensor>) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), clips)?;
        t.load_state(ckpt)?;
        Ok(t)
    }

    fn assemble(
        cfg: RunConfig,
        model: Model,
        params: ParamStore,
        memories: Memories,
        adam: Adam,
        step: usize,
        clips: Vec<Tensor>,
    ) -> Result<Self> {
        let k = cfg.data.k;
        let want = [cfg.data.height, cfg.data.width, 3];
        let mut windows = Vec::new();
        for (i, c) in clips.iter().enumerate() {
            if c.shape().len() != 4 || c.shape()[1..] != want {
                return Err(Error::config(format!(
                    "training clip {i} has shape {:?}, config expects [T, {}, {}, 3]",
                    c.shape(),
                    want[0],
                    want[1]
                )));
            }
            let starts = window_starts(c.shape()[0], k);
            if starts.is_empty() {
                log::warn!("training clip {i} is shorter than k + 1 frames; skipped");
            }
            windows.extend(starts.map(|s| (i, s)));
        }
        if windows.is_empty() {
            return Err(Error::Contract("no training windows".into()));
        }
        Ok(Trainer {
            cfg,
            model,
            params,
            memories,
            adam,
            step,
            clips,
            windows,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.cfg.train.batch_size)
    }

    /// Steps for the configured epochs, capped by `max_steps`.
    pub fn total_steps(&self) -> usize {
        let full = self.cfg.train.epochs * self.steps_per_epoch();
        match self.cfg.train.max_steps {
            0 => full,
            m => m.min(full),
        }
    }

    /// Window indices of batch `b` in `epoch`; the order depends only on
    /// the seed and the epoch.
    fn batch(&self, epoch: usize, b: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + epoch as u64);
        let mut order = self.windows.clone();
        order.shuffle(&mut rng);
        let bs = self.cfg.train.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    pub fn train_step(&mut self) -> Result<LossRecord> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (self.step / spe, self.step % spe);
        let batch = self.batch(epoch, b);
        let k = self.cfg.data.k;
        let n = batch.len() as f64;

        let mut s = Session::training(&self.params);
        let mut acc: Option<Var> = None;
        let mut parts = [0.0; 3];
        let mut queries: [Vec<f64>; 3] = Default::default();
        for &(c, start) in &batch {
            let window = self.clips[c].slice_outer(start, start + k + 1)?;
            let wl = window_losses(&mut s, &self.model, &self.memories, &self.cfg, &window)?;
            parts[0] += s.g.value(wl.frame).data()[0] / n;
            if let Some(m) = wl.motion {
                parts[1] += s.g.value(m).data()[0] / n;
            }
            if let Some(sep) = wl.separate {
                parts[2] += s.g.value(sep).data()[0] / n;
            }
            for (q, v) in queries.iter_mut().zip(wl.queries) {
                q.extend_from_slice(s.g.value(v).data());
            }
            acc = Some(match acc {
                Some(a) => s.g.add(a, wl.total),
                None => wl.total,
            });
        }
        let loss = s.g.scale(acc.expect("non-empty batch"), 1.0 / n);
        let total = s.g.value(loss).data()[0];
        for (term, v) in [("frame", parts[0]), ("motion", parts[1]), ("separate", parts[2]), ("total", total)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, step: self.step });
            }
        }
        let mut grads = s.g.backward(loss);
        let grads = s.param_grads(&mut grads);
        drop(s);
        self.adam.step(&mut self.params, &grads, learning_rate(&self.cfg, epoch));
        let d = self.cfg.model.d_model;
        let items = queries.map(|q| {
            let rows = q.len() / d;
            Tensor::new(&[rows, d], q).unwrap()
        });
        self.model.update_memories(&mut self.memories, &items, Phase::Training)?;
        let record = LossRecord {
            step: self.step,
            frame: parts[0],
            motion: parts[1],
            separate: parts[2],
            total,
        };
        self.step += 1;
        Ok(record)
    }

    /// Train until `until` steps have run, appending CSV rows to `log`.
    pub fn run_until(&mut self, until: usize, log: &mut dyn Write) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.step < until {
            let r = self.train_step()?;
            writeln!(log, "{}", r.csv_row())?;
            if r.step % 10 == 0 {
                log::info!("step {} loss {:.6}", r.step, r.total);
            }
            out.push(r);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (name, t) in self.params.iter() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        for ((name, _), (m, v)) in self.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            tensors.push((format!("adam_m/{name}"), m.clone()));
            tensors.push((format!("adam_v/{name}"), v.clone()));
        }
        for (name, bank) in self.memories.banks() {
            tensors.push((format!("memory/{name}"), bank.slots().clone()));
        }
        Checkpoint {
            config: self.cfg.clone(),
            state: TrainingState {
                step: self.step,
                adam_t: self.adam.t,
            },
            tensors,
        }
    }

    fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        load_params(&mut self.params, ckpt)?;
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, dst) in [("adam_m", &mut self.adam.m[i]), ("adam_v", &mut self.adam.v[i])] {
                let key = format!("{prefix}/{name}");
                let t = ckpt.get(&key).ok_or_else(|| missing(&key))?;
                check_shape(&key, t, dst.shape())?;
                *dst = t.clone();
            }
        }
        self.memories = load_memories(ckpt)?;
        self.adam.t = ckpt.state.adam_t;
        self.step = ckpt.state.step;
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Contract(format!("checkpoint lacks tensor {name}"))
}

fn check_shape(name: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::config(format!(
            "checkpoint tensor {name} has shape {:?}, model expects {:?}",
            t.shape(),
            want
        )));
    }
    Ok(())
}

/// Copy `param/*` tensors into a store built from the same config.
pub fn load_params(params: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("param/{name}");
        let t = ckpt.get(&key).ok_or_else(|| missing(&key))?;
        let dst = params.by_name_mut(&name).unwrap();
        check_shape(&key, t, dst.shape())?;
        *dst = t.clone();
    }
    Ok(())
}

pub fn load_memories(ckpt: &Checkpoint) -> Result<Memories> {
    let tau = ckpt.config.model.memory_temperature;
    let bank = |name: &str| -> Result<MemoryBank> {
        let key = format!("memory/{name}");
        MemoryBank::from_slots(ckpt.get(&key).ok_or_else(|| missing(&key))?.clone(), tau)
    };
    Ok(Memories {
        common: bank("common")?,
        app: bank("app")?,
        motion: bank("motion")?,
    })
}

/// Rebuild a frozen model, its parameters and memories from a checkpoint.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, ParamStore, Memories)> {
    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed);
    let mut params = ParamStore::new();
    let model = Model::new(&ckpt.config, &mut params, &mut rng)?;
    load_params(&mut params, ckpt)?;
    Ok((model, params, load_memories(ckpt)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_halves_every_twenty_epochs() {
        let cfg = RunConfig::full();
        assert_eq!(learning_rate(&cfg, 0), 2e-4);
        assert_eq!(learning_rate(&cfg, 19), 2e-4);
        assert_eq!(learning_rate(&cfg, 20), 1e-4);
        assert_eq!(learning_rate(&cfg, 45), 5e-5);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store);
        let g = vec![Tensor::new(&[2], vec![0.5, -3.0]).unwrap()];
        adam.step(&mut store, &g, 0.1);
        // The first bias-corrected step has magnitude lr in every coordinate.
        let w = store.by_name("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }
}
