//! 2D resampling with pixel centres at `(i + 0.5) / n` (align corners off).

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    /// Nearest source pixel; exact half-way ties go to the lower index.
    Nearest,
}

fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    let s = (source_coord(i, n_in, n_out) - 0.5).ceil();
    s.clamp(0.0, (n_in - 1) as f64) as usize
}

/// Resizes a row-major `h x w` image to `out_h x out_w`.
pub fn resize2d<T: Copy + Into<f64> + FromF64>(
    src: &[T],
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
    mode: ResizeMode,
) -> Vec<T> {
    assert_eq!(src.len(), h * w, "resize2d: buffer does not match {h}x{w}");
    assert!(out_h > 0 && out_w > 0, "resize2d: target dims must be positive");
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    match mode {
        ResizeMode::Nearest => {
            let xs: Vec<usize> = (0..out_w).map(|x| nearest_index(x, w, out_w)).collect();
            for y in 0..out_h {
                let sy = nearest_index(y, h, out_h);
                out.extend(xs.iter().map(|&sx| src[sy * w + sx]));
            }
        }
        ResizeMode::Bilinear => {
            let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
                (0..n_out)
                    .map(|i| {
                        let s = source_coord(i, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
                        let lo = s.floor() as usize;
                        let hi = (lo + 1).min(n_in - 1);
                        (lo, hi, s - lo as f64)
                    })
                    .collect()
            };
            let (ys, xs) = (axis(h, out_h), axis(w, out_w));
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let at = |y: usize, x: usize| src[y * w + x].into();
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out.push(T::from_f64(top * (1.0 - fy) + bottom * fy));
                }
            }
        }
    }
    out
}

/// Conversion back from interpolated values.
pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for u8 {
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}
