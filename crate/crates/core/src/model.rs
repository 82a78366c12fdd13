//! Full predictor: streams, fusion, decomposition, memories and decoders.

use rand::Rng;

use crate::autograd::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{Decomposer, Decoder, FeatureFuser, MemoryBank, Phase, Reconstruction, Squash};
use crate::nn::{ParamStore, Session};
use crate::spatial::{PatchConfig, SpatialStream};
use crate::temporal::TemporalStream;
use crate::tensor::Tensor;

/// Common, appearance and motion prototype banks. Not trained by gradient
/// descent; updated by [`MemoryBank::write`] after each optimiser step.
#[derive(Clone, Debug, PartialEq)]
pub struct Memories {
    pub common: MemoryBank,
    pub app: MemoryBank,
    pub motion: MemoryBank,
}

impl Memories {
    pub fn new<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Self {
        let (m, d, tau) = (cfg.model.memory_slots, cfg.model.d_model, cfg.model.memory_temperature);
        let bank = |rng: &mut R| {
            let mut b = MemoryBank::new(m, d, rng);
            b.temperature = tau;
            b
        };
        Memories {
            common: bank(rng),
            app: bank(rng),
            motion: bank(rng),
        }
    }

    pub fn banks(&self) -> [(&'static str, &MemoryBank); 3] {
        [("common", &self.common), ("app", &self.app), ("motion", &self.motion)]
    }

    pub fn banks_mut(&mut self) -> [&mut MemoryBank; 3] {
        [&mut self.common, &mut self.app, &mut self.motion]
    }
}

/// Graph handles of one window's forward pass.
pub struct ForwardOutput {
    /// Predicted next frame, `[H, W, 3]`.
    pub v_hat: Var,
    /// Predicted last frame difference, `[H, W, 3]`.
    pub m_hat: Var,
    /// `[N, D]` task features of the last slice, when decomposed.
    pub app: Option<Var>,
    pub motion: Option<Var>,
    /// Memory queries `[N, D]`: common, appearance, motion.
    pub queries: [Var; 3],
    pub spatial_weights: Option<Var>,
    pub temporal_weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub k: usize,
    pub frame_hw: (usize, usize),
    pub d_model: usize,
    pub spatial: SpatialStream,
    pub temporal: TemporalStream,
    pub fuser: FeatureFuser,
    pub decomposer: Option<Decomposer>,
    pub app_decoder: Decoder,
    pub motion_decoder: Decoder,
}

impl Model {
    /// Build from a validated config, registering every parameter.
    pub fn new<R: Rng>(cfg: &RunConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let block = cfg.block_config();
        let d = cfg.model.d_model;
        let frame_hw = (cfg.data.height, cfg.data.width);
        let patches = cfg.active_patch_sizes();
        let r1 = patches[0];
        let spatial = SpatialStream::new(
            store,
            "spatial",
            PatchConfig {
                resolutions: patches,
                embed_dim: d,
                frame_hw,
            },
            &block,
            rng,
        )?;
        let temporal = TemporalStream::new(store, "temporal", &cfg.active_windows(), r1, &block, rng)?;
        let fuser = FeatureFuser::new(store, "fuse", d);
        let decomposer = cfg
            .ablation
            .decompose
            .then(|| Decomposer::new(store, "decompose", d, rng));
        let c = cfg.model.decoder_channels;
        let app_decoder = Decoder::new(store, "decode_app", 4 * d, r1, c, Squash::Sigmoid, rng);
        let motion_decoder = Decoder::new(store, "decode_motion", 4 * d, r1, c, Squash::Tanh, rng);
        Ok(Model {
            k: cfg.data.k,
            frame_hw,
            d_model: d,
            spatial,
            temporal,
            fuser,
            decomposer,
            app_decoder,
            motion_decoder,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.spatial.patch.grid(0)
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let want = [self.k, self.frame_hw.0, self.frame_hw.1, 3];
        if shape != want {
            return Err(Error::config(format!(
                "clip {:?} does not match the model input {:?}",
                shape, want
            )));
        }
        Ok(())
    }

    /// `clip [k, H, W, 3]`, the input frames of one window.
    pub fn forward(&self, s: &mut Session, mem: &Memories, clip: Var) -> Result<ForwardOutput> {
        self.check_clip(s.g.shape(clip))?;
        let (k, d) = (self.k, self.d_model);
        let grid = self.grid();
        let n = grid.0 * grid.1;
        // Only the last slice reaches the decoders, and spatial encoding is
        // per frame, so the spatial stream sees the last input frame alone.
        let last_frame = s.g.slice_outer(clip, k - 1, k);
        let sp = self.spatial.forward(s, last_frame);
        let tm = self.temporal.forward(s, clip);
        let tm_last = s.g.slice_outer(tm.aggregated, k - 1, k);
        let fused = self.fuser.forward(s, sp.fused, tm_last);
        let fused = s.g.reshape(fused, &[n, d]);
        let (queries, app, motion) = match &self.decomposer {
            Some(dec) => {
                let parts = dec.forward(s, fused);
                ([parts.common, parts.app, parts.motion], Some(parts.app), Some(parts.motion))
            }
            None => ([fused, fused, fused], None, None),
        };
        let banks = match self.decomposer {
            Some(_) => [&mem.common, &mem.app, &mem.motion],
            None => [&mem.common, &mem.common, &mem.common],
        };
        let mut primed = Vec::with_capacity(3);
        for (q, bank) in queries.iter().zip(banks) {
            let (r, _) = bank.read_var(s, *q);
            primed.push(s.g.concat(*q, r));
        }
        let decode = |s: &mut Session, dec: &Decoder, a: Var, b: Var| {
            let x = s.g.concat(a, b);
            let x = s.g.reshape(x, &[1, n, 4 * d]);
            let y = dec.forward(s, x, grid);
            let (h, w) = (grid.0 * dec.patch, grid.1 * dec.patch);
            s.g.reshape(y, &[h, w, 3])
        };
        let v_hat = decode(s, &self.app_decoder, primed[0], primed[1]);
        let m_hat = decode(s, &self.motion_decoder, primed[0], primed[2]);
        Ok(ForwardOutput {
            v_hat,
            m_hat,
            app,
            motion,
            queries,
            spatial_weights: sp.weights,
            temporal_weights: tm.weights,
        })
    }

    /// Predict with frozen weights and banks.
    pub fn predict(&self, store: &ParamStore, mem: &Memories, clip: &Tensor) -> Result<Reconstruction> {
        self.check_clip(clip.shape())?;
        let mut s = Session::inference(store);
        let x = s.g.constant(clip.clone());
        let out = self.forward(&mut s, mem, x)?;
        Ok(Reconstruction {
            v_hat: s.g.value(out.v_hat).clone(),
            m_hat: s.g.value(out.m_hat).clone(),
        })
    }

    /// Write the last-slice queries of a forward pass into the banks.
    pub fn update_memories(
        &self,
        mem: &mut Memories,
        queries: &[Tensor; 3],
        phase: Phase,
    ) -> Result<()> {
        if self.decomposer.is_some() {
            for (bank, q) in mem.banks_mut().into_iter().zip(queries) {
                bank.write(q, phase)?;
            }
            Ok(())
        } else {
            mem.common.write(&queries[0], phase)
        }
    }
}
