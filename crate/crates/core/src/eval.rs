//! Frame-level AUC and efficiency profiling.
//!
//! FLOPs are counted as two per multiply-accumulate and cover linear
//! layers, convolutions, scans and memory reads. Normalisation,
//! activations, resizing and other element-wise work are not counted.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Memories, Model};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Multiply-accumulates per state element and step: decay, drive, readout.
pub const SCAN_MACS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub n_frames: usize,
    pub n_anomalous: usize,
}

/// Area under the ROC curve, computed as the Mann-Whitney statistic with
/// ties counted half. `labels` are 0 (normal) or 1 (anomalous).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "labels need both classes, got {n_pos} anomalous and {n_neg} normal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps tied mid-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        let pos = order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as u64;
        twice_rank_sum += pos * twice_mid;
        i = j + 1;
    }
    let n_pos64 = n_pos as u64;
    let twice_u = twice_rank_sum - n_pos64 * (n_pos64 + 1);
    Ok(twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<EvalReport> {
    Ok(EvalReport {
        auc: roc_auc(scores, labels)?,
        n_frames: labels.len(),
        n_anomalous: labels.iter().filter(|&&l| l == 1).count(),
    })
}

/// Trainable element count.
pub fn count_params(store: &ParamStore) -> usize {
    store.num_elements()
}

pub fn linear_flops(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (tokens * d_in * d_out) as u64
}

/// Dense `k x k` convolution producing an `h x w` map.
pub fn conv2d_flops(k: usize, c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
    2 * (k * k * c_in * c_out * h * w) as u64
}

/// Depthwise `k x k` convolution: one input channel per output channel.
pub fn depthwise_flops(k: usize, channels: usize, h: usize, w: usize) -> u64 {
    conv2d_flops(k, 1, channels, h, w)
}

/// `len` sequence positions of `channels` scanned channels with `state`
/// states each.
pub fn scan_flops(len: usize, channels: usize, state: usize) -> u64 {
    2 * SCAN_MACS * (len * channels * state) as u64
}

/// Cosine similarities against `slots` prototypes plus the weighted sum.
pub fn memory_read_flops(queries: usize, slots: usize, d: usize) -> u64 {
    2 * linear_flops(queries, d, slots)
}

/// Per-component FLOP count of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub layers: Vec<(String, u64)>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|(_, f)| f).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    fn push(&mut self, name: String, flops: u64) {
        self.layers.push((name, flops));
    }
}

/// Analytic FLOPs of predicting one frame from an input window of shape
/// `[k, H, W, 3]`. The shape must match the configuration exactly.
pub fn estimate_flops(cfg: &RunConfig, input_shape: &[usize]) -> Result<FlopReport> {
    cfg.validate()?;
    let want = [cfg.data.k, cfg.data.height, cfg.data.width, 3];
    if input_shape != want {
        return Err(Error::config(format!(
            "input shape {:?} does not match the configured {:?}",
            input_shape, want
        )));
    }
    let (h, w) = (cfg.data.height, cfg.data.width);
    let m = &cfg.model;
    let block = cfg.block_config();
    let (d, e, s) = (m.d_model, block.inner(), m.state_size);
    let directions = if block.bidirectional { 2 } else { 1 };
    let patches = cfg.active_patch_sizes();
    let r1 = patches[0];
    let n1 = (h / r1) * (w / r1);
    let mut rep = FlopReport { layers: Vec::new() };

    // Spatial encoders run on the last input frame only.
    for (i, &r) in patches.iter().enumerate() {
        let (gh, gw) = (h / r, w / r);
        let n = gh * gw;
        let tag = format!("spatial.scale{i}");
        rep.push(format!("{tag}.embed"), linear_flops(n, 3 * r * r, d));
        for b in 0..m.n_blocks {
            let dw: u64 = m.dw_kernels.iter().map(|&k| depthwise_flops(k, d, gh, gw)).sum();
            rep.push(format!("{tag}.block{b}.dw"), dw);
            rep.push(format!("{tag}.block{b}.in"), 2 * linear_flops(n, d, e));
            rep.push(
                format!("{tag}.block{b}.conv"),
                depthwise_flops(block.conv_kernel, e, gh, gw),
            );
            rep.push(
                format!("{tag}.block{b}.gates"),
                directions * 2 * linear_flops(n, e, s),
            );
            rep.push(format!("{tag}.block{b}.scan"), directions * scan_flops(n, e, s));
            rep.push(format!("{tag}.block{b}.out"), linear_flops(n, e, d));
        }
    }
    if patches.len() > 1 {
        rep.push(
            "spatial.fusion".into(),
            patches.len() as u64 * mlp_flops(1, d, (d / 4).max(1), 1),
        );
    }

    let windows = cfg.active_windows();
    for (j, &win) in windows.iter().enumerate() {
        let tokens = win * n1;
        let tag = format!("temporal.scale{j}");
        rep.push(format!("{tag}.embed"), linear_flops(tokens, 3 * r1 * r1, d));
        for b in 0..m.n_blocks {
            rep.push(format!("{tag}.block{b}.in"), 2 * linear_flops(tokens, d, e));
            rep.push(format!("{tag}.block{b}.gates"), 2 * linear_flops(tokens, e, s));
            rep.push(format!("{tag}.block{b}.scan"), scan_flops(tokens, e, s));
            rep.push(format!("{tag}.block{b}.out"), linear_flops(tokens, e, d));
        }
    }
    if windows.len() > 1 {
        rep.push(
            "temporal.attention".into(),
            windows.len() as u64 * mlp_flops(1, d, (d / 4).max(1), 1),
        );
    }

    if cfg.ablation.decompose {
        rep.push("decompose".into(), 3 * mlp_flops(n1, d, d, d));
    }
    rep.push(
        "memory".into(),
        3 * memory_read_flops(n1, m.memory_slots, d),
    );
    let c = m.decoder_channels;
    for name in ["decode_app", "decode_motion"] {
        rep.push(format!("{name}.proj"), linear_flops(n1, 4 * d, r1 * r1 * c));
        rep.push(format!("{name}.conv1"), conv2d_flops(3, c, c, h, w));
        rep.push(format!("{name}.conv2"), conv2d_flops(3, c, 3, h, w));
    }
    Ok(rep)
}

fn mlp_flops(tokens: usize, d_in: usize, hidden: usize, d_out: usize) -> u64 {
    linear_flops(tokens, d_in, hidden) + linear_flops(tokens, hidden, d_out)
}

/// Throughput over repeated timed runs, in predicted frames per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpsStats {
    pub mean: f64,
    pub std: f64,
    pub repeats: usize,
}

/// Predict `n_warmup` untimed frames, then time `repeats` runs of `n_timed`
/// predictions each, cycling through `windows` (`[k, H, W, 3]` each).
pub fn measure_fps(
    model: &Model,
    store: &ParamStore,
    memories: &Memories,
    windows: &[Tensor],
    n_warmup: usize,
    n_timed: usize,
    repeats: usize,
) -> Result<FpsStats> {
    if n_timed == 0 || repeats == 0 {
        return Err(Error::Contract("measure_fps needs n_timed >= 1 and repeats >= 1".into()));
    }
    if windows.is_empty() {
        return Err(Error::Contract("measure_fps needs at least one input window".into()));
    }
    let mut cycle = windows.iter().cycle();
    for _ in 0..n_warmup {
        model.predict(store, memories, cycle.next().unwrap())?;
    }
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for _ in 0..n_timed {
            model.predict(store, memories, cycle.next().unwrap())?;
        }
        rates.push(n_timed as f64 / start.elapsed().as_secs_f64());
    }
    let (mean, std) = mean_std(&rates);
    Ok(FpsStats { mean, std, repeats })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileReport {
    pub params: usize,
    pub params_m: f64,
    pub flops_g: f64,
    pub fps: FpsStats,
    pub flops: FlopReport,
}

impl ProfileReport {
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("params", self.params.to_string()),
            ("params_m", format!("{:.6}", self.params_m)),
            ("flops", self.flops.total().to_string()),
            ("flops_g", format!("{:.6}", self.flops_g)),
            ("fps_mean", format!("{:.6}", self.fps.mean)),
            ("fps_std", format!("{:.6}", self.fps.std)),
        ]
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "FLOPs counted as 2 x multiply-accumulate, per predicted frame").unwrap();
        writeln!(out, "params      {:.4} M", self.params_m).unwrap();
        writeln!(out, "flops       {:.4} G", self.flops_g).unwrap();
        writeln!(
            out,
            "fps         {:.2} +- {:.2} over {} repeats",
            self.fps.mean, self.fps.std, self.fps.repeats
        )
        .unwrap();
        writeln!(out, "per layer:").unwrap();
        for (name, f) in &self.flops.layers {
            writeln!(out, "  {name:<32} {f}").unwrap();
        }
        out
    }
}

impl EvalReport {
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("auc", format!("{:.6}", self.auc)),
            ("n_frames", self.n_frames.to_string()),
            ("n_anomalous", self.n_anomalous.to_string()),
        ]
    }

    pub fn text(&self) -> String {
        format!(
            "frame-level AUC {:.4} over {} frames ({} anomalous)\n",
            self.auc, self.n_frames, self.n_anomalous
        )
    }
}

/// One `key=value` per line.
pub fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        writeln!(out, "{k}={v}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}
