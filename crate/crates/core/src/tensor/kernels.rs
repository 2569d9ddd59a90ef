// Raw slice kernels. Shapes are validated by the callers in `tape`.

use super::Scalar;

/// `c[m,p] += a[m,k] · b[k,p]`
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, p: usize) {
    if p < 16 && k >= 32 {
        // narrow output: dot products against the transposed right operand vectorize better
        let bt = transpose(b, k, p);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..p {
                c[i * p + j] += dot(arow, &bt[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,p] · b[k,p]ᵀ`
pub fn matmul_acc_bt<S: Scalar>(g: &[S], b: &[S], da: &mut [S], m: usize, k: usize, p: usize) {
    if p < 16 && k >= 32 {
        let bt = transpose(b, k, p);
        for i in 0..m {
            let drow = &mut da[i * k..(i + 1) * k];
            for j in 0..p {
                axpy(g[i * p + j], &bt[j * k..(j + 1) * k], drow);
            }
        }
        return;
    }
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            da[i * k + kk] += dot(grow, brow);
        }
    }
}

/// `db[k,p] += a[m,k]ᵀ · g[m,p]`
pub fn matmul_acc_at<S: Scalar>(a: &[S], g: &[S], db: &mut [S], m: usize, k: usize, p: usize) {
    if p < 16 && k >= 32 {
        let mut dbt = vec![S::zero(); p * k];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..p {
                axpy(g[i * p + j], arow, &mut dbt[j * k..(j + 1) * k]);
            }
        }
        for kk in 0..k {
            for j in 0..p {
                db[kk * p + j] += dbt[j * k + kk];
            }
        }
        return;
    }
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let drow = &mut db[kk * p..(kk + 1) * p];
            for (dv, &gv) in drow.iter_mut().zip(grow) {
                *dv += aik * gv;
            }
        }
    }
}

/// `[rows, cols]` to `[cols, rows]`.
fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `y += a·x`
fn axpy<S: Scalar>(a: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().copied().sum::<S>() + tail
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output rows `oy` whose input row `oy*stride + ky - pad` lies inside the image.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // oy*stride + k >= pad  and  oy*stride + k < extent + pad
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi_excl = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi_excl.max(lo))
    }

    /// Unfolds `x` (`[n, cin, h, w]`) into `col` (`[cin·kh·kw, n·oh·ow]`), zero at padding.
    fn im2col<S: Scalar>(&self, x: &[S], col: &mut [S]) {
        let (hw, ohw, p) = (self.h * self.w, self.oh * self.ow, self.n * self.oh * self.ow);
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (ox0, ox1) = self.valid(kx, self.w, self.ow);
                    let row = &mut col[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    for n in 0..self.n {
                        let xs = &x[(n * self.cin + ci) * hw..][..hw];
                        let r = &mut row[n * ohw..][..ohw];
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            for ox in ox0..ox1 {
                                r[oy * self.ow + ox] = xs[iy * self.w + ox * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`], accumulating into `dx`.
    fn col2im<S: Scalar>(&self, col: &[S], dx: &mut [S]) {
        let (hw, ohw, p) = (self.h * self.w, self.oh * self.ow, self.n * self.oh * self.ow);
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                let (oy0, oy1) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.kw {
                    let (ox0, ox1) = self.valid(kx, self.w, self.ow);
                    let row = &col[((ci * self.kh + ky) * self.kw + kx) * p..][..p];
                    for n in 0..self.n {
                        let dxs = &mut dx[(n * self.cin + ci) * hw..][..hw];
                        let r = &row[n * ohw..][..ohw];
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            for ox in ox0..ox1 {
                                dxs[iy * self.w + ox * self.stride + kx - self.pad] += r[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col_len(&self) -> (usize, usize) {
        (self.cin * self.kh * self.kw, self.n * self.oh * self.ow)
    }
}

pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>, out: &mut [S]) {
    let (k, p) = g.col_len();
    let ohw = g.oh * g.ow;
    let mut col = vec![S::zero(); k * p];
    g.im2col(x, &mut col);
    let mut y = vec![S::zero(); g.cout * p];
    matmul_acc(w, &col, &mut y, g.cout, k, p);
    // [cout, n, ohw] -> [n, cout, ohw]
    for co in 0..g.cout {
        let bias = b.map_or(S::zero(), |b| b[co]);
        for n in 0..g.n {
            let src = &y[co * p + n * ohw..][..ohw];
            let dst = &mut out[(n * g.cout + co) * ohw..][..ohw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
}

pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let (k, p) = g.col_len();
    let ohw = g.oh * g.ow;
    let mut go = vec![S::zero(); g.cout * p];
    for n in 0..g.n {
        for co in 0..g.cout {
            go[co * p + n * ohw..][..ohw].copy_from_slice(&grad_out[(n * g.cout + co) * ohw..][..ohw]);
        }
    }
    if let Some(db) = db {
        for co in 0..g.cout {
            db[co] += go[co * p..][..p].iter().copied().sum::<S>();
        }
    }
    if let Some(dw) = dw {
        let mut col = vec![S::zero(); k * p];
        g.im2col(x, &mut col);
        matmul_acc_bt(&go, &col, dw, g.cout, k, p);
    }
    if let Some(dx) = dx {
        let mut dcol = vec![S::zero(); k * p];
        matmul_acc_at(w, &go, &mut dcol, g.cout, k, p);
        g.col2im(&dcol, dx);
    }
}

pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}
