//! Fixed linear resampling operators over the spatial axes of H×W×C maps.
//!
//! Every operator here is a sparse matrix from input cells to output cells,
//! applied independently per channel. Keeping them as explicit tap lists makes
//! the adjoint (needed for backpropagation) a trivial scatter.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SpatialMap {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// For every output cell, `(input cell, weight)` pairs.
    taps: Vec<Vec<(usize, f64)>>,
}

/// 1-D fractional-area overlap weights: output bin `i` covers
/// `[i·n/m, (i+1)·n/m)` and averages the inputs it overlaps.
fn area_weights_1d(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let lo = i as f64 * step;
            let hi = (i + 1) as f64 * step;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|j| {
                    let overlap = (hi.min((j + 1) as f64) - lo.max(j as f64)).max(0.0);
                    (overlap > 1e-12).then_some((j, overlap / step))
                })
                .collect()
        })
        .collect()
}

/// 1-D bilinear weights with half-pixel centers (corners not aligned).
fn bilinear_weights_1d(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            if i0 == i1 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

impl SpatialMap {
    fn separable(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        rows: Vec<Vec<(usize, f64)>>,
        cols: Vec<Vec<(usize, f64)>>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for row in &rows {
            for col in &cols {
                let mut cell = Vec::with_capacity(row.len() * col.len());
                for &(y, wy) in row {
                    for &(x, wx) in col {
                        cell.push((y * in_w + x, wy * wx));
                    }
                }
                taps.push(cell);
            }
        }
        SpatialMap {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    /// Adaptive average pooling with exact fractional bin areas. When the
    /// output size divides the input size this is plain block averaging.
    pub fn area(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(out_h >= 1 && out_w >= 1 && in_h >= 1 && in_w >= 1);
        Self::separable(
            in_h,
            in_w,
            out_h,
            out_w,
            area_weights_1d(in_h, out_h),
            area_weights_1d(in_w, out_w),
        )
    }

    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(out_h >= 1 && out_w >= 1 && in_h >= 1 && in_w >= 1);
        Self::separable(
            in_h,
            in_w,
            out_h,
            out_w,
            bilinear_weights_1d(in_h, out_h),
            bilinear_weights_1d(in_w, out_w),
        )
    }

    pub fn in_size(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn out_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn taps(&self, out_cell: usize) -> &[(usize, f64)] {
        &self.taps[out_cell]
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (h, w, c) = x.dims3();
        assert_eq!((h, w), (self.in_h, self.in_w), "spatial map input size mismatch");
        let src = x.data();
        let mut out = vec![0.0; self.out_h * self.out_w * c];
        for (o, cell) in self.taps.iter().enumerate() {
            let dst = &mut out[o * c..(o + 1) * c];
            for &(i, wt) in cell {
                for (d, s) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *d += wt * s;
                }
            }
        }
        Tensor::from_vec(&[self.out_h, self.out_w, c], out)
    }

    /// Adjoint: scatters output-space values back onto the input grid.
    pub fn apply_transpose(&self, g: &Tensor) -> Tensor {
        let (h, w, c) = g.dims3();
        assert_eq!((h, w), (self.out_h, self.out_w), "spatial map output size mismatch");
        let src = g.data();
        let mut out = vec![0.0; self.in_h * self.in_w * c];
        for (o, cell) in self.taps.iter().enumerate() {
            let gs = &src[o * c..(o + 1) * c];
            for &(i, wt) in cell {
                for (d, s) in out[i * c..(i + 1) * c].iter_mut().zip(gs) {
                    *d += wt * s;
                }
            }
        }
        Tensor::from_vec(&[self.in_h, self.in_w, c], out)
    }
}

/// Nearest-neighbour resize of an integer label grid (half-pixel centers).
pub fn resize_labels_nearest(
    labels: &[u8],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (((y as f64 + 0.5) * in_h as f64 / out_h as f64) as usize).min(in_h - 1);
        for x in 0..out_w {
            let sx = (((x as f64 + 0.5) * in_w as f64 / out_w as f64) as usize).min(in_w - 1);
            out.push(labels[sy * in_w + sx]);
        }
    }
    out
}
