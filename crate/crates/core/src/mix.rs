//! Fixed sparse linear maps over the row axis of a tensor.
//!
//! Resizing, interpolation, Gaussian windows and finite differences are all
//! linear in the input, so each is a sparse `out_rows x in_rows` matrix applied
//! to `[groups, in_rows, cols]` data. The adjoint gives the backward pass.

#[derive(Clone, Debug)]
pub struct RowMix {
    out_rows: usize,
    in_rows: usize,
    offsets: Vec<usize>,
    sources: Vec<usize>,
    weights: Vec<f64>,
}

impl RowMix {
    /// Build from per-output-row lists of `(input_row, weight)`.
    pub fn from_rows(in_rows: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for row in &rows {
            for &(i, w) in row {
                assert!(i < in_rows, "row mix source {i} out of range {in_rows}");
                sources.push(i);
                weights.push(w);
            }
            offsets.push(sources.len());
        }
        RowMix {
            out_rows: rows.len(),
            in_rows,
            offsets,
            sources,
            weights,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.out_rows
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    /// `(input_row, weight)` pairs feeding output row `o`.
    pub fn row(&self, o: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[o]..self.offsets[o + 1];
        self.sources[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    /// Apply to `data` laid out as `[groups, in_rows, cols]`.
    pub fn apply(&self, data: &[f64], cols: usize) -> Vec<f64> {
        let groups = data.len() / (self.in_rows * cols);
        let mut out = vec![0.0; groups * self.out_rows * cols];
        for g in 0..groups {
            let src = &data[g * self.in_rows * cols..(g + 1) * self.in_rows * cols];
            let dst = &mut out[g * self.out_rows * cols..(g + 1) * self.out_rows * cols];
            for o in 0..self.out_rows {
                let drow = &mut dst[o * cols..(o + 1) * cols];
                for (i, w) in self.row(o) {
                    let srow = &src[i * cols..(i + 1) * cols];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`RowMix::apply`].
    pub fn apply_transpose(&self, grad: &[f64], cols: usize) -> Vec<f64> {
        let groups = grad.len() / (self.out_rows * cols);
        let mut out = vec![0.0; groups * self.in_rows * cols];
        for g in 0..groups {
            let src = &grad[g * self.out_rows * cols..(g + 1) * self.out_rows * cols];
            let dst = &mut out[g * self.in_rows * cols..(g + 1) * self.in_rows * cols];
            for o in 0..self.out_rows {
                let srow = &src[o * cols..(o + 1) * cols];
                for (i, w) in self.row(o) {
                    let drow = &mut dst[i * cols..(i + 1) * cols];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += w * s;
                    }
                }
            }
        }
        out
    }

    /// Bilinear resize of a row-major `src_h x src_w` grid to `dst_h x dst_w`
    /// using half-pixel centres and clamped borders.
    pub fn bilinear(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let ys = linear_taps(src_h, dst_h);
        let xs = linear_taps(src_w, dst_w);
        let mut rows = Vec::with_capacity(dst_h * dst_w);
        for ty in &ys {
            for tx in &xs {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        let w = wy * wx;
                        if w != 0.0 {
                            push_tap(&mut row, iy * src_w + ix, w);
                        }
                    }
                }
                rows.push(row);
            }
        }
        RowMix::from_rows(src_h * src_w, rows)
    }

    /// Linear interpolation of a length-`src` sequence to length `dst` with
    /// aligned end points, so the last output always equals the last input.
    pub fn linear_aligned(src: usize, dst: usize) -> Self {
        let rows = (0..dst)
            .map(|t| {
                if src == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = if dst == 1 {
                    (src - 1) as f64
                } else {
                    t as f64 * (src - 1) as f64 / (dst - 1) as f64
                };
                let lo = (pos.floor() as usize).min(src - 1);
                let hi = (lo + 1).min(src - 1);
                let frac = pos - lo as f64;
                let mut row = Vec::with_capacity(2);
                push_tap(&mut row, lo, 1.0 - frac);
                if frac > 0.0 {
                    push_tap(&mut row, hi, frac);
                }
                row
            })
            .collect();
        RowMix::from_rows(src, rows)
    }

    /// Normalised `size x size` Gaussian window evaluated at every fully
    /// contained position of an `h x w` grid ("valid" filtering).
    pub fn gaussian_valid(h: usize, w: usize, size: usize, sigma: f64) -> Self {
        let kernel = gaussian_kernel(size, sigma);
        let oh = h + 1 - size;
        let ow = w + 1 - size;
        let mut rows = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                let mut row = Vec::with_capacity(size * size);
                for i in 0..size {
                    for j in 0..size {
                        row.push(((y + i) * w + x + j, kernel[i] * kernel[j]));
                    }
                }
                rows.push(row);
            }
        }
        RowMix::from_rows(h * w, rows)
    }

    /// Forward difference along x: `out[y, x] = in[y, x + 1] - in[y, x]`.
    pub fn diff_x(h: usize, w: usize) -> Self {
        let mut rows = Vec::with_capacity(h * w.saturating_sub(1));
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                rows.push(vec![(y * w + x + 1, 1.0), (y * w + x, -1.0)]);
            }
        }
        RowMix::from_rows(h * w, rows)
    }

    /// Forward difference along y: `out[y, x] = in[y + 1, x] - in[y, x]`.
    pub fn diff_y(h: usize, w: usize) -> Self {
        let mut rows = Vec::with_capacity(h.saturating_sub(1) * w);
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                rows.push(vec![((y + 1) * w + x, 1.0), (y * w + x, -1.0)]);
            }
        }
        RowMix::from_rows(h * w, rows)
    }
}

fn push_tap(row: &mut Vec<(usize, f64)>, i: usize, w: f64) {
    if let Some(t) = row.iter_mut().find(|t| t.0 == i) {
        t.1 += w;
    } else {
        row.push((i, w));
    }
}

/// 1-D half-pixel linear interpolation taps.
fn linear_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let frac = pos - lo as f64;
            let mut taps = Vec::with_capacity(2);
            push_tap(&mut taps, lo, 1.0 - frac);
            if frac > 0.0 {
                push_tap(&mut taps, hi, frac);
            }
            taps
        })
        .collect()
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_sums(m: &RowMix) -> Vec<f64> {
        (0..m.out_rows()).map(|o| m.row(o).map(|t| t.1).sum()).collect()
    }

    #[test]
    fn interpolation_rows_are_partitions_of_unity() {
        for m in [
            RowMix::bilinear(4, 4, 16, 16),
            RowMix::bilinear(2, 3, 8, 12),
            RowMix::linear_aligned(3, 8),
            RowMix::linear_aligned(1, 5),
            RowMix::gaussian_valid(16, 16, 11, 1.5),
        ] {
            for s in row_sums(&m) {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_interpolation_keeps_end_points() {
        let m = RowMix::linear_aligned(4, 8);
        let data = [1.0, 2.0, 5.0, -3.0];
        let out = m.apply(&data, 1);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[7], -3.0);
    }

    #[test]
    fn transpose_is_adjoint() {
        let m = RowMix::bilinear(3, 3, 5, 7);
        let x: Vec<f64> = (0..9 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..35 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let mx = m.apply(&x, 2);
        let mty = m.apply_transpose(&y, 2);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn identity_resize_is_exact() {
        let m = RowMix::bilinear(4, 4, 4, 4);
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(m.apply(&x, 1), x);
    }
}
