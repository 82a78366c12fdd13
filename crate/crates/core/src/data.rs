//! Synthetic surveillance clips, on-disk clip stores and window iteration.
//!
//! Scenes are a static background with grey rectangles and discs moving at
//! constant velocity and bouncing off the borders. Test clips carry one
//! anomaly from its onset to the end of the clip:
//!
//! * `speed_jump`: one object moves four times faster,
//! * `shape_swap`: one object turns into the other shape at twice its size,
//! * `intruder`: a large, fast, coloured object enters.
//!
//! Store layout under the root directory:
//!
//! ```text
//! clips/<name>/frames/000000.png ...
//! clips/<name>/labels.csv        frame_index,label
//! clips/<name>/clip.raw          optional f32 container
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"M2SL";
pub const RAW_VERSION: u16 = 1;
const SHAPE_SWAP_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SpeedJump,
    ShapeSwap,
    Intruder,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::SpeedJump, AnomalyKind::ShapeSwap, AnomalyKind::Intruder];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub onset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub n_objects: usize,
    /// Normal speed range in pixels per frame.
    pub speed: (f64, f64),
}

impl SceneSpec {
    pub const DEFAULT_SPEED: (f64, f64) = (0.5, 1.5);

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("canvas must be at least 8x8"));
        }
        if self.frames == 0 || self.n_objects == 0 {
            return Err(Error::config("scenes need frames and objects"));
        }
        let (lo, hi) = self.speed;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config(format!("speed range {:?}", self.speed)));
        }
        Ok(())
    }

    /// Object size unit: 8 px on a 64 px canvas.
    fn unit(&self) -> f64 {
        self.height.min(self.width) as f64 / 8.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Disc,
}

#[derive(Clone, Debug)]
struct Object {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    shape: Shape,
    colour: [f64; 3],
}

impl Object {
    fn random<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Self {
        let u = spec.unit();
        let shape = if rng.gen_bool(0.5) { Shape::Rect } else { Shape::Disc };
        let (w, h) = match shape {
            Shape::Rect => (rng.gen_range(0.8..1.2) * u, rng.gen_range(0.8..1.4) * u),
            Shape::Disc => {
                let d = rng.gen_range(0.8..1.2) * u;
                (d, d)
            }
        };
        let grey = rng.gen_range(0.1..0.35);
        let speed = rng.gen_range(spec.speed.0..=spec.speed.1);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Object {
            x: rng.gen_range(0.0..(spec.width as f64 - w)),
            y: rng.gen_range(0.0..(spec.height as f64 - h)),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w,
            h,
            shape,
            colour: [grey; 3],
        }
    }

    fn step(&mut self, spec: &SceneSpec, speed_scale: f64) {
        let (maxx, maxy) = (spec.width as f64 - self.w, spec.height as f64 - self.h);
        self.x += self.vx * speed_scale;
        self.y += self.vy * speed_scale;
        // Reflect off the borders; repeat in case a fast object overshoots twice.
        for _ in 0..4 {
            if self.x < 0.0 {
                self.x = -self.x;
                self.vx = self.vx.abs();
            } else if self.x > maxx {
                self.x = 2.0 * maxx - self.x;
                self.vx = -self.vx.abs();
            }
            if self.y < 0.0 {
                self.y = -self.y;
                self.vy = self.vy.abs();
            } else if self.y > maxy {
                self.y = 2.0 * maxy - self.y;
                self.vy = -self.vy.abs();
            }
        }
        self.x = self.x.clamp(0.0, maxx);
        self.y = self.y.clamp(0.0, maxy);
    }

    /// Copy grown by `f` about its centre.
    fn scaled(&self, f: f64) -> Self {
        let (cx, cy) = (self.x + self.w / 2.0, self.y + self.h / 2.0);
        let (w, h) = (self.w * f, self.h * f);
        Object { x: cx - w / 2.0, y: cy - h / 2.0, w, h, ..*self }
    }

    fn draw(&self, frame: &mut [f64], width: usize, height: usize, shape: Shape) {
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = ((self.x + self.w).ceil() as usize).min(width);
        let y1 = ((self.y + self.h).ceil() as usize).min(height);
        let (cx, cy) = (self.x + self.w / 2.0, self.y + self.h / 2.0);
        let r = self.w.min(self.h) / 2.0;
        for py in y0..y1 {
            for px in x0..x1 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let inside = match shape {
                    Shape::Rect => fx >= self.x && fx < self.x + self.w && fy >= self.y && fy < self.y + self.h,
                    Shape::Disc => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
                };
                if inside {
                    let o = (py * width + px) * 3;
                    frame[o..o + 3].copy_from_slice(&self.colour);
                }
            }
        }
    }
}

/// Static backdrop shared by every clip of a dataset: a smooth gradient
/// with a few fixed light blocks.
pub fn background(spec: &SceneSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let (h, w) = (spec.height, spec.width);
    let base = [rng.gen_range(0.6..0.7), rng.gen_range(0.6..0.7), rng.gen_range(0.6..0.7)];
    let mut bg = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let shade = 0.1 * (y as f64 / h as f64) - 0.05 * (x as f64 / w as f64);
            for c in 0..3 {
                bg[(y * w + x) * 3 + c] = base[c] + shade;
            }
        }
    }
    for _ in 0..3 {
        let bw = rng.gen_range(w / 8..w / 3);
        let bh = rng.gen_range(h / 8..h / 3);
        let bx = rng.gen_range(0..w - bw);
        let by = rng.gen_range(0..h - bh);
        let tone = rng.gen_range(0.75..0.9);
        for y in by..by + bh {
            for x in bx..bx + bw {
                bg[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(tone);
            }
        }
    }
    bg
}

/// Frames `[T, H, W, 3]` quantised to 8 bits, and per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub frames: Tensor,
    pub labels: Vec<u8>,
}

/// 8-bit value as stored on disk, read back as `f32 / 255`.
fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dequantise(b: u8) -> f64 {
    (b as f32 / 255.0) as f64
}

pub fn render_clip(spec: &SceneSpec, bg: &[f64], anomaly: Option<AnomalySpec>, seed: u64) -> Result<GeneratedClip> {
    spec.validate()?;
    if let Some(a) = anomaly {
        if a.onset >= spec.frames {
            return Err(Error::config(format!(
                "anomaly onset {} outside a {}-frame clip",
                a.onset, spec.frames
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<Object> = (0..spec.n_objects).map(|_| Object::random(spec, &mut rng)).collect();
    let mut intruder = Object::random(spec, &mut rng);
    let u = spec.unit();
    intruder.w = 1.8 * u;
    intruder.h = 1.8 * u;
    intruder.shape = Shape::Rect;
    let fast = 3.0 * spec.speed.1;
    let norm = (intruder.vx.powi(2) + intruder.vy.powi(2)).sqrt();
    intruder.vx *= fast / norm;
    intruder.vy *= fast / norm;
    intruder.x = intruder.x.min(spec.width as f64 - intruder.w);
    intruder.y = intruder.y.min(spec.height as f64 - intruder.h);
    let hue = rng.gen_range(0..3);
    intruder.colour = [0.15; 3];
    intruder.colour[hue] = 0.95;

    let (h, w) = (spec.height, spec.width);
    let mut data = Vec::with_capacity(spec.frames * h * w * 3);
    let mut labels = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let active = anomaly.filter(|a| t >= a.onset);
        let mut frame = bg.to_vec();
        for (i, o) in objects.iter().enumerate() {
            match active {
                Some(a) if i == 0 && a.kind == AnomalyKind::ShapeSwap => {
                    let swapped = match o.shape {
                        Shape::Rect => Shape::Disc,
                        Shape::Disc => Shape::Rect,
                    };
                    o.scaled(SHAPE_SWAP_SCALE).draw(&mut frame, w, h, swapped);
                }
                _ => o.draw(&mut frame, w, h, o.shape),
            }
        }
        if matches!(active, Some(a) if a.kind == AnomalyKind::Intruder) {
            intruder.draw(&mut frame, w, h, Shape::Rect);
        }
        data.extend(frame.into_iter().map(|v| dequantise(quantise(v))));
        labels.push(active.is_some() as u8);
        for (i, o) in objects.iter_mut().enumerate() {
            let jump = anomaly.is_some_and(|a| a.kind == AnomalyKind::SpeedJump && i == 0 && t + 1 >= a.onset);
            o.step(spec, if jump { 4.0 } else { 1.0 });
        }
        if matches!(active, Some(a) if a.kind == AnomalyKind::Intruder) {
            intruder.step(spec, 1.0);
        }
    }
    Ok(GeneratedClip {
        frames: Tensor::new(&[spec.frames, h, w, 3], data)?,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub train_clips: usize,
    pub test_clips: usize,
    /// Window length of the consumer; onsets leave room for whole normal
    /// windows before them.
    pub k: usize,
    pub seed: u64,
    pub write_raw: bool,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.test_clips > 0 && self.scene.frames < self.k + 14 {
            return Err(Error::config(format!(
                "test clips need at least k + 14 = {} frames",
                self.k + 14
            )));
        }
        Ok(())
    }

    /// Onset range `[k + 6, frames - 8]`.
    pub fn onset_range(&self) -> (usize, usize) {
        (self.k + 6, self.scene.frames - 8)
    }

    fn clip_seed(&self, stream: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng.gen()
    }

    /// Clip name, anomaly and seed of every clip, in a fixed order.
    pub fn plan(&self) -> Vec<(String, Option<AnomalySpec>, u64)> {
        let mut out = Vec::with_capacity(self.train_clips + self.test_clips);
        for i in 0..self.train_clips {
            out.push((format!("train_{i:03}"), None, self.clip_seed(i as u64)));
        }
        let (lo, hi) = self.onset_range();
        for i in 0..self.test_clips {
            let seed = self.clip_seed((1 << 32) + i as u64);
            let onset = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).gen_range(lo..=hi);
            let kind = AnomalyKind::ALL[i % 3];
            out.push((format!("test_{i:03}"), Some(AnomalySpec { kind, onset }), seed));
        }
        out
    }
}

/// Render every clip of `spec` in memory, in plan order.
pub fn render_dataset(spec: &DatasetSpec) -> Result<Vec<(String, GeneratedClip)>> {
    spec.validate()?;
    let bg = background(&spec.scene, spec.seed);
    spec.plan()
        .into_iter()
        .map(|(name, anomaly, seed)| Ok((name, render_clip(&spec.scene, &bg, anomaly, seed)?)))
        .collect()
}

/// Write every clip of `spec` under `root` and open the result.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<ClipStore> {
    let clips = render_dataset(spec)?;
    fs::create_dir_all(root.join("clips"))?;
    for (name, clip) in &clips {
        write_clip(root, name, clip, spec.write_raw)?;
    }
    fs::write(root.join("dataset.toml"), toml::to_string_pretty(spec).expect("spec serialises"))?;
    ClipStore::open(root)
}

pub fn write_clip(root: &Path, name: &str, clip: &GeneratedClip, raw: bool) -> Result<()> {
    let dir = root.join("clips").join(name);
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let s = clip.frames.shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    if clip.labels.len() != t {
        return Err(Error::Contract(format!("{} labels for {t} frames", clip.labels.len())));
    }
    let inner = h * w * 3;
    for i in 0..t {
        write_png(
            &frames_dir.join(format!("{i:06}.png")),
            &clip.frames.data()[i * inner..(i + 1) * inner],
            h,
            w,
        )?;
    }
    let mut labels = String::from("frame_index,label\n");
    for (i, l) in clip.labels.iter().enumerate() {
        labels.push_str(&format!("{i},{l}\n"));
    }
    fs::write(dir.join("labels.csv"), labels)?;
    if raw {
        write_raw(&dir.join("clip.raw"), &clip.frames)?;
    }
    Ok(())
}

/// RGB frame in `[0, 1]`, `[H, W, 3]` row-major, as an 8-bit PNG.
pub fn write_png(path: &Path, frame: &[f64], h: usize, w: usize) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = frame.iter().map(|&v| quantise(v)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Read an 8-bit RGB or RGBA PNG as `[H, W, 3]` values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let dec = png::Decoder::new(fs::File::open(path)?);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "only 8-bit PNG frames are supported"));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported colour type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf[..h * w * stride].chunks(stride) {
        data.extend(px[..3].iter().map(|&b| dequantise(b)));
    }
    Tensor::new(&[h, w, 3], data)
}

/// Raw container: magic, version `u16`, then `k, H, W, C` as `u32` and the
/// `f32` payload, all little-endian.
pub fn write_raw(path: &Path, frames: &Tensor) -> Result<()> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("raw container holds [k, H, W, C], got {:?}", s)));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(RAW_MAGIC)?;
    out.write_all(&RAW_VERSION.to_le_bytes())?;
    for &d in s {
        let d = u32::try_from(d).map_err(|_| Error::format(path, "dimension exceeds u32"))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for &v in frames.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header = 4 + 2 + 16;
    if bytes.len() < header || &bytes[..4] != RAW_MAGIC {
        return Err(Error::format(path, "missing raw clip magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RAW_VERSION {
        return Err(Error::format(path, format!("unsupported raw version {version}")));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header != n * 4 {
        return Err(Error::format(
            path,
            format!("payload of {} bytes, dims {:?} need {}", bytes.len() - header, dims, n * 4),
        ));
    }
    let data = bytes[header..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&dims, data)
}

#[derive(Deserialize)]
struct LabelRow {
    frame_index: usize,
    label: u8,
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut labels = Vec::new();
    for (i, row) in rdr.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        if row.frame_index != i || row.label > 1 {
            return Err(Error::format(path, format!("bad label row {i}")));
        }
        labels.push(row.label);
    }
    Ok(labels)
}

/// A directory of clips in the layout above.
#[derive(Clone, Debug)]
pub struct ClipStore {
    root: PathBuf,
    names: Vec<String>,
}

impl ClipStore {
    pub fn open(root: &Path) -> Result<Self> {
        let clips = root.join("clips");
        if !clips.is_dir() {
            return Err(Error::format(root, "no clips/ directory"));
        }
        let mut names = Vec::new();
        for entry in fs::read_dir(&clips)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(ClipStore {
            root: root.to_path_buf(),
            names,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.names.iter().filter(|n| n.starts_with(prefix)).cloned().collect()
    }

    pub fn clip_dir(&self, name: &str) -> PathBuf {
        self.root.join("clips").join(name)
    }

    pub fn labels(&self, name: &str) -> Result<Vec<u8>> {
        read_labels(&self.clip_dir(name).join("labels.csv"))
    }

    /// Frame file paths in index order.
    pub fn frame_paths(&self, name: &str) -> Result<Vec<PathBuf>> {
        let dir = self.clip_dir(name).join("frames");
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "png"));
        paths.sort();
        Ok(paths)
    }

    /// Frames `[T, H, W, 3]`, from the raw container when present.
    pub fn frames(&self, name: &str) -> Result<Tensor> {
        let raw = self.clip_dir(name).join("clip.raw");
        if raw.is_file() {
            return read_raw(&raw);
        }
        let paths = self.frame_paths(name)?;
        let mut data = Vec::new();
        let mut hw = None;
        for p in &paths {
            let f = read_png(p)?;
            let s = (f.shape()[0], f.shape()[1]);
            if *hw.get_or_insert(s) != s {
                return Err(Error::format(p, "frame size differs within the clip"));
            }
            data.extend_from_slice(f.data());
        }
        let (h, w) = hw.ok_or_else(|| Error::format(self.clip_dir(name), "clip has no frames"))?;
        Tensor::new(&[paths.len(), h, w, 3], data)
    }
}

/// One training or scoring sample: `k` input frames plus the target.
#[derive(Clone, Debug)]
pub struct Window {
    pub clip: String,
    pub start: usize,
    /// Index of the target frame within the source clip.
    pub target_index: usize,
    /// `[k + 1, H, W, 3]`; the last frame is the target.
    pub frames: Tensor,
}

impl Window {
    pub fn input(&self) -> Tensor {
        let k = self.frames.shape()[0] - 1;
        self.frames.slice_outer(0, k).unwrap()
    }

    pub fn target(&self) -> Tensor {
        let k = self.frames.shape()[0] - 1;
        let t = self.frames.slice_outer(k, k + 1).unwrap();
        let s = t.shape()[1..].to_vec();
        t.reshape(&s).unwrap()
    }

    /// `V_{t+1} - V_t`.
    pub fn motion_target(&self) -> Tensor {
        let k = self.frames.shape()[0] - 1;
        let prev = self.frames.slice_outer(k - 1, k).unwrap();
        let target = self.target();
        let data = target.data().iter().zip(prev.data()).map(|(a, b)| a - b).collect();
        Tensor::new(target.shape(), data).unwrap()
    }
}

/// Window start offsets of a `frames`-long clip at stride 1.
pub fn window_starts(frames: usize, k: usize) -> std::ops::Range<usize> {
    0..(frames + 1).saturating_sub(k + 1)
}

/// Sliding windows over every clip in `names`. Clips shorter than `k + 1`
/// frames are skipped with a warning.
pub fn iterate_windows<'a>(
    store: &'a ClipStore,
    names: &'a [String],
    k: usize,
) -> impl Iterator<Item = Result<Window>> + 'a {
    names.iter().flat_map(move |name| {
        let clip = store.frames(name);
        let windows: Vec<Result<Window>> = match clip {
            Err(e) => vec![Err(e)],
            Ok(frames) => {
                let t = frames.shape()[0];
                if t < k + 1 {
                    log::warn!("skipping clip {name}: {t} frames, windows need {}", k + 1);
                }
                window_starts(t, k)
                    .map(|start| {
                        Ok(Window {
                            clip: name.clone(),
                            start,
                            target_index: start + k,
                            frames: frames.slice_outer(start, start + k + 1)?,
                        })
                    })
                    .collect()
            }
        };
        windows
    })
}
