//! Shared fixtures: independent oracles and the gradient-check cases.

#![allow(dead_code)]

use msvad_core::autograd::Var;
use msvad_core::config::{Ablation, RunConfig};
use msvad_core::fusion::{Decoder, Decomposer, FeatureFuser, MemoryBank, Squash};
use msvad_core::gradcheck::{self, GradCheck};
use msvad_core::model::{Memories, Model};
use msvad_core::nn::{ParamStore, Session};
use msvad_core::objective::{loss_frame_var, loss_motion_var, loss_separate_var};
use msvad_core::spatial::{PatchConfig, ScaleFusion, SpatialStream};
use msvad_core::ssm::{BlockConfig, MsVssb, SelectiveScanParams, Tmb, Vssb};
use msvad_core::temporal::{ScaleAttention, TemporalStream};
use msvad_core::train::window_losses;
use msvad_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Step-by-step recurrence written directly from the definition:
/// `h_t = exp(-exp(delta) * lambda) h_{t-1} + delta * silu(x_t W_B) x_t`,
/// `y_t = <silu(x_t W_C), h_t>`, from `h0`. Returns `y` and the final state.
pub fn naive_scan(x: &Tensor, p: &SelectiveScanParams, h0: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let s = p.lambda.shape()[1];
    let xv = x.data();
    let mut h = h0.data().to_vec();
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let xt = &xv[t * d..(t + 1) * d];
        let gate = |w: &Tensor, j: usize| silu((0..d).map(|i| xt[i] * w.data()[i * s + j]).sum());
        let b: Vec<f64> = (0..s).map(|j| gate(&p.w_b, j)).collect();
        let c: Vec<f64> = (0..s).map(|j| gate(&p.w_c, j)).collect();
        for ch in 0..d {
            let delta = p.delta.data()[ch];
            let mut acc = 0.0;
            for j in 0..s {
                let a = (-(delta.exp()) * p.lambda.data()[ch * s + j]).exp();
                let hv = a * h[ch * s + j] + delta * b[j] * xt[ch];
                h[ch * s + j] = hv;
                acc += c[j] * hv;
            }
            y[t * d + ch] = acc;
        }
    }
    (y, h)
}

/// Largest per-step input drive `|delta * silu(x_t W_B) * x_t|`.
pub fn max_drive(x: &Tensor, p: &SelectiveScanParams) -> f64 {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let s = p.lambda.shape()[1];
    let mut m: f64 = 0.0;
    for t in 0..l {
        let xt = &x.data()[t * d..(t + 1) * d];
        for j in 0..s {
            let b = silu((0..d).map(|i| xt[i] * p.w_b.data()[i * s + j]).sum());
            for ch in 0..d {
                m = m.max((p.delta.data()[ch] * b * xt[ch]).abs());
            }
        }
    }
    m
}

/// `|a - b| <= rel * max(|a|, |b|)`, with an absolute floor for values near zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-9)
}

pub fn random_scan_params(d: usize, s: usize, seed: u64) -> SelectiveScanParams {
    let mut r = rng(seed);
    SelectiveScanParams {
        delta: Tensor::uniform(&[d], 0.01, 1.0, &mut r),
        lambda: Tensor::uniform(&[d, s], 0.01, 2.0, &mut r),
        w_b: Tensor::randn(&[d, s], 0.5, &mut r),
        w_c: Tensor::randn(&[d, s], 0.5, &mut r),
    }
}

/// One random oracle instance: `L <= 32`, `D <= 8`, `S <= 8`. Returns the
/// worst relative deviation of outputs and final state.
pub fn scan_oracle_instance(seed: u64) -> f64 {
    use rand::Rng;
    let mut r = rng(seed);
    let (l, d, s) = (r.gen_range(1..=32), r.gen_range(1..=8), r.gen_range(1..=8));
    let p = random_scan_params(d, s, r.gen());
    let x = Tensor::randn(&[l, d], 1.0, &mut r);
    let h0 = Tensor::randn(&[d, s], 1.0, &mut r);
    let (y, st) = msvad_core::ssm::selective_scan_with_state(&x, &p, &msvad_core::ssm::ScanState { h: h0.clone() })
        .expect("valid instance");
    let (ey, eh) = naive_scan(&x, &p, &h0);
    let dev = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-9))
            .fold(0.0, f64::max)
    };
    dev(y.data(), &ey).max(dev(st.h.data(), &eh))
}

/// Pairwise AUC: fraction of (anomalous, normal) pairs ordered correctly,
/// ties counted half.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn tiny_block() -> BlockConfig {
    BlockConfig {
        d_model: 4,
        state_size: 3,
        expand: 2,
        dw_kernels: vec![1, 3, 5],
        n_blocks: 1,
        conv_kernel: 3,
        bidirectional: false,
    }
}

/// Scalar probe `mean(y * r)` with a fixed random `r`, so every output
/// element carries a distinct weight.
pub fn probe(s: &mut Session, y: Var, seed: u64) -> Var {
    let r = Tensor::randn(s.g.shape(y), 1.0, &mut rng(seed));
    let r = s.g.constant(r);
    let m = s.g.mul(y, r);
    s.g.mean(m)
}

fn add(store: &mut ParamStore, name: &str, t: Tensor) -> msvad_core::nn::ParamId {
    store.add(name, t)
}

pub fn tiny_model_config(ablation: Ablation) -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.height = 16;
    c.data.width = 16;
    c.data.k = 4;
    c.data.frames_per_clip = 8;
    c.model.d_model = 8;
    c.model.state_size = 4;
    c.model.n_blocks = 1;
    c.model.temporal_windows = vec![1, 2, 3];
    c.model.decoder_channels = 4;
    c.ablation = ablation;
    c
}

/// Every differentiable operation the model is built from, checked with
/// central differences. Returns `(name, result)` pairs.
pub fn gradient_cases() -> Vec<(&'static str, GradCheck)> {
    let mut out = Vec::new();
    let per = 6;

    {
        let mut r = rng(1);
        let mut st = ParamStore::new();
        let u = add(&mut st, "u", Tensor::randn(&[2, 5, 4], 1.0, &mut r));
        let b = add(&mut st, "b", Tensor::randn(&[2, 5, 3], 1.0, &mut r));
        let c = add(&mut st, "c", Tensor::randn(&[2, 5, 3], 1.0, &mut r));
        let dl = add(&mut st, "delta_log", Tensor::uniform(&[4], -2.0, 0.0, &mut r));
        let ll = add(&mut st, "lambda_log", Tensor::uniform(&[4, 3], -2.0, 0.5, &mut r));
        let res = gradcheck::check(&mut st, 40, &|s| {
            let y = s.g.selective_scan(s.p(u), s.p(b), s.p(c), s.p(dl), s.p(ll));
            probe(s, y, 11)
        });
        out.push(("selective_scan", res));
    }
    {
        let mut r = rng(2);
        let mut st = ParamStore::new();
        let blk = Vssb::new(&mut st, "vssb", &tiny_block(), &mut r);
        let x = add(&mut st, "x", Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, per, &|s| {
            let y = blk.forward(s, s.p(x));
            probe(s, y, 12)
        });
        out.push(("vssb_forward", res));
    }
    {
        let mut r = rng(3);
        let mut st = ParamStore::new();
        let blk = MsVssb::new(&mut st, "ms", &tiny_block(), &mut r);
        let x = add(&mut st, "x", Tensor::randn(&[1, 4, 4, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, per, &|s| {
            let y = blk.forward(s, s.p(x));
            probe(s, y, 13)
        });
        out.push(("ms_vssb_forward", res));
    }
    {
        let mut r = rng(4);
        let mut st = ParamStore::new();
        let blk = Tmb::new(&mut st, "tmb", &tiny_block(), &mut r);
        let x = add(&mut st, "x", Tensor::randn(&[3, 5, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, per, &|s| {
            let y = blk.forward(s, s.p(x));
            probe(s, y, 14)
        });
        out.push(("tmb_forward", res));
    }
    {
        let mut r = rng(5);
        let mut st = ParamStore::new();
        let cfg = BlockConfig {
            d_model: 8,
            ..tiny_block()
        };
        let patch = PatchConfig {
            resolutions: vec![4, 8, 16],
            embed_dim: 8,
            frame_hw: (32, 32),
        };
        let stream = SpatialStream::new(&mut st, "spatial", patch, &cfg, &mut r).unwrap();
        let clip = add(&mut st, "clip", Tensor::uniform(&[2, 32, 32, 3], 0.0, 1.0, &mut r));
        let res = gradcheck::check(&mut st, 3, &|s| {
            let y = stream.forward(s, s.p(clip)).fused;
            probe(s, y, 15)
        });
        out.push(("spatial_stream", res));
    }
    {
        let mut r = rng(6);
        let mut st = ParamStore::new();
        let fusion = ScaleFusion::new(&mut st, "fusion", 4, &mut r);
        let f0 = add(&mut st, "f0", Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r));
        let f1 = add(&mut st, "f1", Tensor::randn(&[2, 2, 2, 4], 1.0, &mut r));
        let f2 = add(&mut st, "f2", Tensor::randn(&[2, 1, 1, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, 12, &|s| {
            let feats = [s.p(f0), s.p(f1), s.p(f2)];
            let (y, _) = fusion.forward(s, &feats, (4, 4));
            probe(s, y, 16)
        });
        out.push(("fuse_scales", res));
    }
    {
        let mut r = rng(7);
        let mut st = ParamStore::new();
        let att = ScaleAttention::new(&mut st, "attention", 4, &mut r);
        let h: Vec<_> = [1usize, 2, 3]
            .iter()
            .enumerate()
            .map(|(j, &w)| add(&mut st, &format!("h{j}"), Tensor::randn(&[w, 5, 4], 1.0, &mut r)))
            .collect();
        let res = gradcheck::check(&mut st, 12, &|s| {
            let per: Vec<Var> = h.iter().map(|&p| s.p(p)).collect();
            let (y, _) = att.forward(s, &per, 4);
            probe(s, y, 17)
        });
        out.push(("aggregate_scales", res));
    }
    {
        let mut r = rng(8);
        let mut st = ParamStore::new();
        let cfg = BlockConfig {
            d_model: 8,
            ..tiny_block()
        };
        let stream = TemporalStream::new(&mut st, "temporal", &[1, 2, 3], 4, &cfg, &mut r).unwrap();
        let clip = add(&mut st, "clip", Tensor::uniform(&[4, 8, 8, 3], 0.0, 1.0, &mut r));
        let res = gradcheck::check(&mut st, 3, &|s| {
            let y = stream.forward(s, s.p(clip)).aggregated;
            probe(s, y, 18)
        });
        out.push(("temporal_stream", res));
    }
    {
        let mut r = rng(9);
        let mut st = ParamStore::new();
        let fuser = FeatureFuser::new(&mut st, "fuse", 4);
        let g = add(&mut st, "g", Tensor::randn(&[2, 3, 4], 1.0, &mut r));
        let h = add(&mut st, "h", Tensor::randn(&[2, 3, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, 24, &|s| {
            let y = fuser.forward(s, s.p(g), s.p(h));
            probe(s, y, 19)
        });
        out.push(("fuse", res));
    }
    {
        let mut r = rng(10);
        let mut st = ParamStore::new();
        let dec = Decomposer::new(&mut st, "decompose", 4, &mut r);
        let f = add(&mut st, "f", Tensor::randn(&[2, 3, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, 12, &|s| {
            let p = dec.forward(s, s.p(f));
            let a = probe(s, p.common, 20);
            let b = probe(s, p.app, 21);
            let c = probe(s, p.motion, 22);
            let ab = s.g.add(a, b);
            s.g.add(ab, c)
        });
        out.push(("decompose", res));
    }
    {
        let mut r = rng(11);
        let mut st = ParamStore::new();
        let bank = MemoryBank::new(5, 4, &mut r);
        let q = add(&mut st, "q", Tensor::randn(&[3, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, 12, &|s| {
            let (y, _) = bank.read_var(s, s.p(q));
            probe(s, y, 23)
        });
        out.push(("memory_read", res));
    }
    {
        let mut r = rng(12);
        let mut st = ParamStore::new();
        let dec = Decoder::new(&mut st, "decoder", 6, 2, 3, Squash::Sigmoid, &mut r);
        let x = add(&mut st, "x", Tensor::randn(&[1, 4, 6], 1.0, &mut r));
        let res = gradcheck::check(&mut st, per, &|s| {
            let y = dec.forward(s, s.p(x), (2, 2));
            probe(s, y, 24)
        });
        out.push(("decode", res));
    }
    {
        let mut r = rng(13);
        let mut st = ParamStore::new();
        let v_hat = add(&mut st, "v_hat", Tensor::uniform(&[6, 6, 3], 0.0, 1.0, &mut r));
        let v = Tensor::uniform(&[6, 6, 3], 0.0, 1.0, &mut r);
        let res = gradcheck::check(&mut st, 40, &|s| {
            let t = s.g.constant(v.clone());
            loss_frame_var(s, s.p(v_hat), t, 0.2).unwrap()
        });
        out.push(("loss_frame", res));
    }
    {
        let mut r = rng(14);
        let mut st = ParamStore::new();
        let m_hat = add(&mut st, "m_hat", Tensor::uniform(&[12, 12, 3], -0.5, 0.5, &mut r));
        let m = Tensor::uniform(&[12, 12, 3], -0.5, 0.5, &mut r);
        let res = gradcheck::check(&mut st, 40, &|s| {
            let t = s.g.constant(m.clone());
            loss_motion_var(s, s.p(m_hat), t, 0.5).unwrap()
        });
        out.push(("loss_motion", res));
    }
    {
        let mut r = rng(15);
        let mut st = ParamStore::new();
        let a = add(&mut st, "app", Tensor::randn(&[6, 4], 1.0, &mut r));
        let m = add(&mut st, "motion", Tensor::randn(&[6, 4], 1.0, &mut r));
        let res = gradcheck::check(&mut st, 24, &|s| loss_separate_var(s, s.p(a), s.p(m)).unwrap());
        out.push(("loss_separate", res));
    }
    {
        let cfg = tiny_model_config(Ablation::FULL);
        let mut r = rng(16);
        let mut st = ParamStore::new();
        let model = Model::new(&cfg, &mut st, &mut r).unwrap();
        let mem = Memories::new(&cfg, &mut r);
        let window = Tensor::uniform(&[5, 16, 16, 3], 0.0, 1.0, &mut r);
        let res = gradcheck::check(&mut st, 2, &|s| {
            window_losses(s, &model, &mem, &cfg, &window).unwrap().total
        });
        out.push(("loss_total_end_to_end", res));
    }
    out
}

/// Spatial fusion and temporal aggregation weights of freshly initialised
/// modules on random features with random scale offsets.
pub fn scale_weights_instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    use rand::Rng;
    let mut r = rng(seed);
    let d = r.gen_range(1..=8);
    let k = r.gen_range(2..=6);
    let mut st = ParamStore::new();
    let fusion = ScaleFusion::new(&mut st, "fusion", d, &mut r);
    let att = ScaleAttention::new(&mut st, "attention", d, &mut r);
    let mut s = Session::inference(&st);
    let mut feature = |r: &mut ChaCha8Rng, shape: &[usize]| {
        let offset = r.gen_range(-50.0..50.0);
        let t = Tensor::randn(shape, r.gen_range(0.1..10.0), r).map(|v| v + offset);
        s.g.constant(t)
    };
    let g: Vec<Var> = [4usize, 2, 1].iter().map(|&n| feature(&mut r, &[k, n, n, d])).collect();
    let h: Vec<Var> = (1..=3).map(|w| feature(&mut r, &[w, 5, d])).collect();
    let (_, ws) = fusion.forward(&mut s, &g, (4, 4));
    let (_, wt) = att.forward(&mut s, &h, k);
    (s.g.value(ws).data().to_vec(), s.g.value(wt).data().to_vec())
}

pub fn is_probability_vector(w: &[f64], tol: f64) -> bool {
    w.iter().all(|&v| v >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Random scores with frequent ties and labels holding both classes, `n <= 20`.
pub fn auc_instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    use rand::Rng;
    let mut r = rng(seed);
    let n = r.gen_range(2..=20);
    let levels = r.gen_range(1..=n);
    let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

/// Training clips of a small config, rendered in memory.
pub fn train_clips(cfg: &RunConfig) -> Vec<Tensor> {
    msvad_core::data::render_dataset(&cfg.dataset_spec(false))
        .unwrap()
        .into_iter()
        .filter(|(n, _)| n.starts_with("train_"))
        .map(|(_, c)| c.frames)
        .collect()
}

pub fn tiny_training_config(ablation: Ablation, seed: u64) -> RunConfig {
    let mut c = tiny_model_config(ablation);
    c.seed = seed;
    c.data.train_clips = 2;
    c.data.test_clips = 0;
    c.data.n_objects = 2;
    c.train.batch_size = 2;
    c.train.epochs = 2;
    c
}

/// Loss log of a fresh run of `steps` steps.
pub fn loss_log(cfg: &RunConfig, steps: usize) -> String {
    let mut t = msvad_core::train::Trainer::new(cfg.clone(), train_clips(cfg)).unwrap();
    let mut log = Vec::new();
    t.run_until(steps, &mut log).unwrap();
    String::from_utf8(log).unwrap()
}

/// Largest parameter and loss deviation between an uninterrupted run of
/// `steps` steps and one interrupted after `split` steps, serialised to
/// bytes and resumed.
pub fn resume_deviation(cfg: &RunConfig, split: usize, steps: usize) -> (f64, f64) {
    use msvad_core::checkpoint::Checkpoint;
    use msvad_core::train::Trainer;
    let clips = train_clips(cfg);
    let mut straight = Trainer::new(cfg.clone(), clips.clone()).unwrap();
    let a = straight.run_until(steps, &mut std::io::sink()).unwrap();
    let mut first = Trainer::new(cfg.clone(), clips.clone()).unwrap();
    let mut b = first.run_until(split, &mut std::io::sink()).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes, std::path::Path::new("memory")).unwrap();
    let mut resumed = Trainer::resume(&ckpt, clips).unwrap();
    assert_eq!(resumed.step, split);
    b.extend(resumed.run_until(steps, &mut std::io::sink()).unwrap());
    let loss_dev = a.iter().zip(&b).map(|(x, y)| (x.total - y.total).abs()).fold(0.0, f64::max);
    let param_dev = straight
        .params
        .iter()
        .zip(resumed.params.iter())
        .map(|((_, x), (_, y))| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    (param_dev, loss_dev)
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Write a small random clip to a raw container and read it back; true when
/// every value survives bit for bit.
pub fn raw_round_trip(seed: u64, dir: &std::path::Path) -> bool {
    use rand::Rng;
    let mut r = rng(seed);
    let shape = [r.gen_range(1..5), r.gen_range(1..9), r.gen_range(1..9), 3];
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen::<f32>() as f64).collect();
    let t = Tensor::new(&shape, data).unwrap();
    let path = dir.join(format!("clip_{seed}.raw"));
    msvad_core::data::write_raw(&path, &t).unwrap();
    let back = msvad_core::data::read_raw(&path).unwrap();
    back.shape() == t.shape() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}
