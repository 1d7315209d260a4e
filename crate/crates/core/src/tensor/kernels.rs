//! Convolution kernels over raw slices: im2col + sgemm.
//!
//! All routines describe the *forward* convolution `x → y` through a
//! [`ConvGeom`]; transposed convolution reuses them with the roles of
//! `x` and `y` swapped.

use crate::error::{Error, Result};

use super::Shape;

/// Geometry of a grouped 2-D cross-correlation `x (N,Cin,H,W) → y (N,Cout,Ho,Wo)`
/// with weight `(Cout, Cin/groups, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        x: Shape,
        weight: Shape,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if groups == 0 || !x.c.is_multiple_of(groups) || !weight.n.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "conv2d groups={groups} must divide input channels {} and output channels {}",
                x.c, weight.n
            )));
        }
        if weight.c * groups != x.c {
            return Err(Error::shape(format!(
                "conv2d weight {weight} expects {} input channels (groups={groups}), input {x} has {}",
                weight.c * groups,
                x.c
            )));
        }
        let (ph, pw) = (x.h + 2 * pad, x.w + 2 * pad);
        if ph < weight.h || pw < weight.w || weight.h == 0 || weight.w == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel {}x{} larger than padded input {ph}x{pw}",
                weight.h, weight.w
            )));
        }
        Ok(ConvGeom {
            n: x.n,
            cin: x.c,
            h: x.h,
            w: x.w,
            cout: weight.n,
            kh: weight.h,
            kw: weight.w,
            stride,
            pad,
            groups,
            ho: (ph - weight.h) / stride + 1,
            wo: (pw - weight.w) / stride + 1,
        })
    }

    /// Geometry for a transposed convolution whose *input* is `y` (the
    /// forward conv's output). The forward conv maps the transposed output
    /// back onto `y`.
    pub fn for_transpose(y: Shape, weight: Shape, stride: usize, groups: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d_transpose stride must be positive"));
        }
        if groups == 0 || !y.c.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "conv2d_transpose groups={groups} must divide input channels {}",
                y.c
            )));
        }
        if weight.n != y.c {
            return Err(Error::shape(format!(
                "conv2d_transpose weight {weight} expects {} input channels, input {y} has {}",
                weight.n, y.c
            )));
        }
        if y.h == 0 || y.w == 0 {
            return Err(Error::shape("conv2d_transpose on empty spatial input"));
        }
        let h = (y.h - 1) * stride + weight.h;
        let w = (y.w - 1) * stride + weight.w;
        let x = Shape::new(y.n, weight.c * groups, h, w);
        let geom = ConvGeom::new(x, weight, stride, 0, groups)?;
        debug_assert_eq!((geom.ho, geom.wo), (y.h, y.w));
        Ok(geom)
    }

    pub fn x_shape(&self) -> Shape {
        Shape::new(self.n, self.cin, self.h, self.w)
    }

    pub fn y_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.ho, self.wo)
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix for one group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Depthwise with non-overlapping kernel windows (the Haar transforms).
    fn is_block_depthwise(&self) -> bool {
        self.cin == self.groups
            && self.cout == self.groups
            && self.kh == self.stride
            && self.kw == self.stride
            && self.pad == 0
    }

    /// Visit every (input index, output index, weight index) triple of a
    /// block-depthwise convolution.
    fn for_each_block_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kh * self.kw;
        for nc in 0..self.n * self.cin {
            let c = nc % self.cin;
            let (x_off, y_off) = (nc * self.h * self.w, nc * self.ho * self.wo);
            for oy in 0..self.ho {
                for ky in 0..self.kh {
                    let x_row = x_off + (oy * self.stride + ky) * self.w;
                    for ox in 0..self.wo {
                        for kx in 0..self.kw {
                            f(
                                x_row + ox * self.stride + kx,
                                y_off + oy * self.wo + ox,
                                c * k + ky * self.kw + kx,
                            );
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column for kernel tap `kx` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let reach = self.w + self.pad;
        let hi = if reach > kx {
            ((reach - kx - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn input_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.h).then_some(iy)
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` (+ c when `accumulate`), with optional
/// transposes given as row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row-major
    // matrices (or their transposes) inside the given slices.
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfold one group of one sample: `x_g` is `cin_g×h×w`, `cols` is `k×p`.
fn im2col(g: &ConvGeom, x_g: &[f32], cols: &mut [f32]) {
    let p = g.p();
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &x_g[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.input_y(oy, ky) else {
                        out_row.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (o, &v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *o = v;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold `cols` (`k×p`) back, accumulating into `dx_g` (`cin_g×h×w`).
fn col2im(g: &ConvGeom, cols: &[f32], dx_g: &mut [f32]) {
    let p = g.p();
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let plane = &mut dx_g[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_ox(kx);
                if lo < hi {
                    let start = lo * g.stride + kx - g.pad;
                    for oy in 0..g.ho {
                        let Some(iy) = g.input_y(oy, ky) else { continue };
                        let dst = &mut plane[iy * g.w + start..(iy + 1) * g.w];
                        let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                        for (d, &v) in dst.iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `y = conv(x, w) + b`.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let mut y = vec![0.0f32; g.n * g.cout * p];
    if g.is_block_depthwise() {
        g.for_each_block_tap(|xi, yi, wi| y[yi] += w[wi] * x[xi]);
        if let Some(b) = bias {
            for (i, v) in y.iter_mut().enumerate() {
                *v += b[(i / p) % g.cout];
            }
        }
        return y;
    }
    let mut cols = vec![0.0f32; k * p];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let x_off = (n * g.cin + grp * cin_g) * g.h * g.w;
            im2col(g, &x[x_off..x_off + cin_g * g.h * g.w], &mut cols);
            let w_g = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let y_off = (n * g.cout + grp * cout_g) * p;
            gemm(cout_g, k, p, w_g, false, &cols, false, &mut y[y_off..y_off + cout_g * p], false);
        }
        if let Some(b) = bias {
            let row = &mut y[n * g.cout * p..(n + 1) * g.cout * p];
            for (chunk, &bc) in row.chunks_exact_mut(p).zip(b) {
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    y
}

/// `dx = convᵀ(dy, w)`; also the forward pass of a transposed convolution.
pub(crate) fn conv_backward_input(g: &ConvGeom, dy: &[f32], w: &[f32]) -> Vec<f32> {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let mut dx = vec![0.0f32; g.n * g.cin * g.h * g.w];
    if g.is_block_depthwise() {
        g.for_each_block_tap(|xi, yi, wi| dx[xi] += w[wi] * dy[yi]);
        return dx;
    }
    let mut cols = vec![0.0f32; k * p];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let w_g = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let y_off = (n * g.cout + grp * cout_g) * p;
            gemm(k, cout_g, p, w_g, true, &dy[y_off..y_off + cout_g * p], false, &mut cols, false);
            let x_off = (n * g.cin + grp * cin_g) * g.h * g.w;
            col2im(g, &cols, &mut dx[x_off..x_off + cin_g * g.h * g.w]);
        }
    }
    dx
}

/// `dw = Σₙ dy · im2col(x)ᵀ`.
pub(crate) fn conv_backward_weight(g: &ConvGeom, dy: &[f32], x: &[f32]) -> Vec<f32> {
    let (k, p, cin_g, cout_g) = (g.k(), g.p(), g.cin_g(), g.cout_g());
    let mut dw = vec![0.0f32; g.cout * k];
    if g.is_block_depthwise() {
        g.for_each_block_tap(|xi, yi, wi| dw[wi] += dy[yi] * x[xi]);
        return dw;
    }
    let mut cols = vec![0.0f32; k * p];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let x_off = (n * g.cin + grp * cin_g) * g.h * g.w;
            im2col(g, &x[x_off..x_off + cin_g * g.h * g.w], &mut cols);
            let y_off = (n * g.cout + grp * cout_g) * p;
            gemm(
                cout_g,
                p,
                k,
                &dy[y_off..y_off + cout_g * p],
                false,
                &cols,
                true,
                &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k],
                true,
            );
        }
    }
    dw
}

/// Per-output-channel sum of `dy`.
pub(crate) fn conv_backward_bias(g: &ConvGeom, dy: &[f32]) -> Vec<f32> {
    let p = g.p();
    let mut db = vec![0.0f64; g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            let off = (n * g.cout + co) * p;
            *acc += dy[off..off + p].iter().map(|&v| f64::from(v)).sum::<f64>();
        }
    }
    db.into_iter().map(|v| v as f32).collect()
}
