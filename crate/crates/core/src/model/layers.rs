//! Single-sample kernels: 1-D convolution along rows or columns, and dense
//! layers. Activations are `[channel][row][column]`, row-major.

/// Shape of one oriented convolution. Horizontal layers use a `1 × k`
/// kernel, vertical ones `k × 1`; both subsample rows and columns by
/// `stride` and zero-pad by `k / 2` along the kernel axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub horizontal: bool,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k
    }

    /// Output positions `o` along the kernel axis whose input index
    /// `o * stride + t - pad` is in range, as `[lo, hi)`.
    fn valid(&self, t: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let pad = self.k / 2;
        let s = self.stride;
        // o * s + t >= pad
        let lo = if t >= pad { 0 } else { (pad - t).div_ceil(s) };
        // o * s + t - pad <= n_in - 1
        let hi = if n_in + pad < t + 1 { 0 } else { ((n_in - 1 + pad - t) / s + 1).min(n_out) };
        (lo, hi.max(lo))
    }
}

pub fn conv_forward(g: &ConvGeometry, weight: &[f64], x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.k / 2;
    let s = g.stride;
    out.fill(0.0);
    for co in 0..g.cout {
        let o_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for t in 0..g.k {
                let wv = weight[(co * g.cin + ci) * g.k + t];
                if wv == 0.0 {
                    continue;
                }
                if g.horizontal {
                    let (lo, hi) = g.valid(t, g.w, ow);
                    for r in 0..oh {
                        let xr = &x_plane[r * s * g.w..(r * s + 1) * g.w];
                        let or = &mut o_plane[r * ow..(r + 1) * ow];
                        for c in lo..hi {
                            or[c] += wv * xr[c * s + t - pad];
                        }
                    }
                } else {
                    let (lo, hi) = g.valid(t, g.h, oh);
                    for r in lo..hi {
                        let xr = &x_plane[(r * s + t - pad) * g.w..(r * s + t - pad + 1) * g.w];
                        let or = &mut o_plane[r * ow..(r + 1) * ow];
                        for c in 0..ow {
                            or[c] += wv * xr[c * s];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates into `dweight`; overwrites `dx` when given.
pub fn conv_backward(g: &ConvGeometry, weight: &[f64], x: &[f64], dy: &[f64], mut dx: Option<&mut [f64]>, dweight: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.k / 2;
    let s = g.stride;
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for co in 0..g.cout {
        let d_plane = &dy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for t in 0..g.k {
                let wi = (co * g.cin + ci) * g.k + t;
                let wv = weight[wi];
                let mut acc = 0.0;
                if g.horizontal {
                    let (lo, hi) = g.valid(t, g.w, ow);
                    for r in 0..oh {
                        let row = r * s * g.w;
                        let dr = &d_plane[r * ow..(r + 1) * ow];
                        for c in lo..hi {
                            acc += dr[c] * x_plane[row + c * s + t - pad];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxr = &mut dx[ci * g.h * g.w + row..ci * g.h * g.w + row + g.w];
                            for c in lo..hi {
                                dxr[c * s + t - pad] += wv * dr[c];
                            }
                        }
                    }
                } else {
                    let (lo, hi) = g.valid(t, g.h, oh);
                    for r in lo..hi {
                        let row = (r * s + t - pad) * g.w;
                        let dr = &d_plane[r * ow..(r + 1) * ow];
                        for c in 0..ow {
                            acc += dr[c] * x_plane[row + c * s];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxr = &mut dx[ci * g.h * g.w + row..ci * g.h * g.w + row + g.w];
                            for c in 0..ow {
                                dxr[c * s] += wv * dr[c];
                            }
                        }
                    }
                }
                dweight[wi] += acc;
            }
        }
    }
}

/// `out = weight · x + bias` with `weight` stored `[out][in]`.
pub fn linear_forward(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        *y = bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// Accumulates parameter gradients and adds `weightᵀ · dy` into `dx`.
pub fn linear_backward(weight: &[f64], x: &[f64], dy: &[f64], dx: &mut [f64], dweight: &mut [f64], dbias: &mut [f64]) {
    let n_in = x.len();
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        dbias[o] += d;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut dweight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
}
