//! Sparse linear maps between flat buffers.
//!
//! Resampling, warping and compositing are all linear in the source pixels
//! once the geometry is fixed, so they share this representation and the
//! autodiff graph only needs one op (and its transpose) for all of them.

/// A compressed-row sparse matrix of shape `out_len x in_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    /// Builds a map row by row; `row(i, push)` calls `push(col, weight)` for
    /// every nonzero of output `i`.
    pub fn from_rows(
        out_len: usize,
        in_len: usize,
        mut row: impl FnMut(usize, &mut dyn FnMut(usize, f64)),
    ) -> Self {
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for i in 0..out_len {
            row(i, &mut |c, w| {
                debug_assert!(c < in_len);
                if w != 0.0 {
                    cols.push(c);
                    weights.push(w);
                }
            });
            offsets.push(cols.len());
        }
        Self {
            in_len,
            offsets,
            cols,
            weights,
        }
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.cols[r.clone()]
            .iter()
            .copied()
            .zip(self.weights[r].iter().copied())
    }

    pub fn row_is_empty(&self, i: usize) -> bool {
        self.offsets[i] == self.offsets[i + 1]
    }

    pub fn apply(&self, src: &[f64]) -> Vec<f64> {
        assert_eq!(src.len(), self.in_len);
        (0..self.out_len())
            .map(|i| self.row(i).map(|(c, w)| w * src[c]).sum())
            .collect()
    }

    /// Accumulates `M^T * grad_out` into `grad_in`.
    pub fn apply_transpose_add(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (c, w) in self.row(i) {
                grad_in[c] += w * g;
            }
        }
    }

    /// Per-channel bilinear resize of a `[C, H, W]` image to `[C, OH, OW]`.
    pub fn resize(c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        Self::from_rows(c * out_h * out_w, c * h * w, |i, push| {
            let ch = i / (out_h * out_w);
            let oy = (i / out_w) % out_h;
            let ox = i % out_w;
            resize_taps(h, w, out_h, out_w, oy, ox, |yy, xx, wt| push((ch * h + yy) * w + xx, wt));
        })
    }

    /// Rotation by `degrees` and isotropic scaling by `scale` about the image
    /// center, output the same size as the input. Samples that fall outside
    /// the source replicate the nearest edge pixel.
    pub fn rotate_scale(c: usize, h: usize, w: usize, degrees: f64, scale: f64) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        Self::from_rows(c * h * w, c * h * w, |i, push| {
            let ch = i / (h * w);
            let oy = (i / w) % h;
            let ox = i % w;
            let dy = (oy as f64 - cy) / scale;
            let dx = (ox as f64 - cx) / scale;
            // inverse rotation
            let x = cx + cos * dx + sin * dy;
            let y = cy - sin * dx + cos * dy;
            bilinear_taps(h, w, y, x, |yy, xx, wt| push((ch * h + yy) * w + xx, wt));
        })
    }
}

/// Bilinear taps of output pixel `(oy, ox)` when resizing `h x w` to
/// `out_h x out_w`.
pub(crate) fn resize_taps(
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    oy: usize,
    ox: usize,
    emit: impl FnMut(usize, usize, f64),
) {
    let y = (oy as f64 + 0.5) * (h as f64 / out_h as f64) - 0.5;
    let x = (ox as f64 + 0.5) * (w as f64 / out_w as f64) - 0.5;
    bilinear_taps(h, w, y, x, emit)
}

/// Emits the (up to four) bilinear taps for a continuous sample position,
/// clamping the position into the image first.
pub(crate) fn bilinear_taps(h: usize, w: usize, y: f64, x: f64, mut emit: impl FnMut(usize, usize, f64)) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    emit(y0, x0, (1.0 - fy) * (1.0 - fx));
    emit(y0, x1, (1.0 - fy) * fx);
    emit(y1, x0, fy * (1.0 - fx));
    emit(y1, x1, fy * fx);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let m = SparseMap::resize(2, 3, 4, 3, 4);
        let src: Vec<f64> = (0..24).map(|v| v as f64 * 0.37).collect();
        assert_eq!(m.apply(&src), src);
    }

    #[test]
    fn transpose_matches_dense_adjoint() {
        let m = SparseMap::rotate_scale(1, 5, 6, 17.0, 1.1);
        let x: Vec<f64> = (0..30).map(|v| (v as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..30).map(|v| (v as f64 * 1.3).cos()).collect();
        let mx = m.apply(&x);
        let mut mty = vec![0.0; 30];
        m.apply_transpose_add(&y, &mut mty);
        let lhs: f64 = mx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&mty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zero_rotation_unit_scale_is_identity() {
        let m = SparseMap::rotate_scale(3, 4, 4, 0.0, 1.0);
        let src: Vec<f64> = (0..48).map(|v| v as f64).collect();
        assert_eq!(m.apply(&src), src);
    }
}
