use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// One im2col row per output pixel.
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Columns per im2col row: `kh * kw * c_in`, ordered (ky, kx, c).
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Visits every (im2col offset, input offset) pair of `c_in`-long runs that
/// fall inside the unpadded input.
fn for_each_patch(g: &ConvGeometry, mut f: impl FnMut(usize, usize)) {
    let c = g.c_in;
    let patch = g.patch();
    let mut row = 0;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = row * patch;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((n * g.height + iy as usize) * g.width + ix as usize) * c;
                        let dst = base + (ky * g.kw + kx) * c;
                        f(dst, src);
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.patch()];
    let c = g.c_in;
    for_each_patch(g, |dst, src| cols[dst..dst + c].copy_from_slice(&x[src..src + c]));
    cols
}

pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let c = g.c_in;
    for_each_patch(g, |dst, src| {
        dx[src..src + c]
            .iter_mut()
            .zip(&cols[dst..dst + c])
            .for_each(|(a, &b)| *a += b)
    });
}
