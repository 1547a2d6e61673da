//! Same-padding dilated convolution kernels: im2col + dgemm forward, and the
//! matching input/weight/bias gradients.

use super::array::Array;

/// Geometry of one conv application (stride is always 1, padding "same").
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(x: &Array, weight: &Array, dilation: usize) -> Option<Self> {
        let (batch, cin, h, w) = x.nchw().ok()?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return None;
        }
        let (cout, cin_w, k) = (ws[0], ws[1], ws[2]);
        if cin_w != cin || k == 0 || dilation == 0 || h == 0 || w == 0 {
            return None;
        }
        let effective = dilation * (k - 1) + 1;
        let pad = (effective - 1) / 2;
        Some(ConvGeom { batch, cin, cout, h, w, k, dilation, pad })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.h * self.w
    }
}

/// Expands sample `n` of `x` into the column buffer: row (ci,u,v), column
/// (i,j), entry x[n, ci, i + u*d - pad, j + v*d - pad] (zero outside).
fn im2col(x: &[f64], g: &ConvGeom, n: usize, col: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let plane = h * w;
    let cols = g.cols();
    col.fill(0.0);
    for ci in 0..g.cin {
        let src_base = (n * g.cin + ci) * plane;
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (ci * g.k + u) * g.k + v;
                let dst_base = row * cols;
                let dy = (u * g.dilation) as isize - g.pad as isize;
                let dx = (v * g.dilation) as isize - g.pad as isize;
                let j_lo = (-dx).max(0) as usize;
                let j_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..h {
                    let yy = i as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let src = src_base + yy as usize * w;
                    let dst = dst_base + i * w;
                    let sx = (j_lo as isize + dx) as usize;
                    col[dst + j_lo..dst + j_hi]
                        .copy_from_slice(&x[src + sx..src + sx + (j_hi - j_lo)]);
                }
            }
        }
    }
}

/// Scatters a column-space gradient back onto the input gradient of sample n.
fn col2im(col: &[f64], g: &ConvGeom, n: usize, gx: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let plane = h * w;
    let cols = g.cols();
    for ci in 0..g.cin {
        let dst_base = (n * g.cin + ci) * plane;
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (ci * g.k + u) * g.k + v;
                let src_base = row * cols;
                let dy = (u * g.dilation) as isize - g.pad as isize;
                let dx = (v * g.dilation) as isize - g.pad as isize;
                let j_lo = (-dx).max(0) as usize;
                let j_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                for i in 0..h {
                    let yy = i as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = dst_base + yy as usize * w + (j_lo as isize + dx) as usize;
                    let src = src_base + i * w + j_lo;
                    for off in 0..j_hi - j_lo {
                        gx[dst + off] += col[src + off];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(x: &Array, weight: &Array, bias: Option<&Array>, g: &ConvGeom) -> Array {
    let mut out = Array::zeros(&[g.batch, g.cout, g.h, g.w]);
    let mut col = vec![0.0f64; g.rows() * g.cols()];
    let cols = g.cols();
    for n in 0..g.batch {
        im2col(x.data(), g, n, &mut col);
        let c = &mut out.data_mut()[n * g.cout * cols..(n + 1) * g.cout * cols];
        dgemm_rowmajor(g.cout, g.rows(), cols, weight.data(), false, &col, false, 0.0, c);
    }
    if let Some(b) = bias {
        for n in 0..g.batch {
            for (co, bv) in b.data().iter().enumerate() {
                let base = (n * g.cout + co) * cols;
                for v in &mut out.data_mut()[base..base + cols] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Array>,
    pub weight: Option<Array>,
    pub bias: Option<Array>,
}

pub(crate) fn conv_backward(
    x: &Array,
    weight: &Array,
    gout: &Array,
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let cols = g.cols();
    let rows = g.rows();
    let mut grads = ConvGrads {
        input: need_input.then(|| Array::zeros(x.shape())),
        weight: need_weight.then(|| Array::zeros(weight.shape())),
        bias: need_bias.then(|| Array::zeros(&[g.cout])),
    };
    if let Some(gb) = &mut grads.bias {
        for n in 0..g.batch {
            for (co, acc) in gb.data_mut().iter_mut().enumerate() {
                let base = (n * g.cout + co) * cols;
                *acc += gout.data()[base..base + cols].iter().sum::<f64>();
            }
        }
    }
    if !need_input && !need_weight {
        return grads;
    }
    let mut col = vec![0.0f64; rows * cols];
    let mut gcol = vec![0.0f64; rows * cols];
    for n in 0..g.batch {
        let go = &gout.data()[n * g.cout * cols..(n + 1) * g.cout * cols];
        if need_weight {
            im2col(x.data(), g, n, &mut col);
            // gW (cout x rows) += gout_n (cout x cols) * col^T
            let gw = grads.weight.as_mut().unwrap().data_mut();
            dgemm_rowmajor(g.cout, cols, rows, go, false, &col, true, 1.0, gw);
        }
        if need_input {
            // gcol (rows x cols) = W^T (rows x cout) * gout_n
            dgemm_rowmajor(rows, g.cout, cols, weight.data(), true, go, false, 0.0, &mut gcol);
            col2im(&gcol, g, n, grads.input.as_mut().unwrap().data_mut());
        }
    }
    grads
}
