//! Raw slice kernels shared by the tape and the tape-free paths.

/// `out += a[m×k] · b[k×n]`, row-major.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// `out += a[m×k]ᵀ · b[m×n]`, giving `k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of one row.
#[must_use]
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, String> {
        let (&[batch, in_ch, h, w], &[filters, kc, kh, kw]) = (input, kernel) else {
            return Err(format!("conv2d expects 4-D input and kernel, got {input:?} and {kernel:?}"));
        };
        if kc != in_ch {
            return Err(format!("kernel has {kc} channels, input has {in_ch}"));
        }
        if stride == 0 {
            return Err("stride must be positive".into());
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        Ok(ConvGeom {
            batch,
            in_ch,
            h,
            w,
            filters,
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Visits every (output, input, kernel) index triple that contributes
    /// to the cross-correlation.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for b in 0..g.batch {
            for fi in 0..g.filters {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let o = ((b * g.filters + fi) * g.oh + oy) * g.ow + ox;
                        for c in 0..g.in_ch {
                            for ky in 0..g.kh {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= g.h as isize {
                                    continue;
                                }
                                for kx in 0..g.kw {
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if ix < 0 || ix >= g.w as isize {
                                        continue;
                                    }
                                    let i = ((b * g.in_ch + c) * g.h + iy as usize) * g.w
                                        + ix as usize;
                                    let k = ((fi * g.in_ch + c) * g.kh + ky) * g.kw + kx;
                                    f(o, i, k);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.filters * self.oh * self.ow];
        self.for_each_tap(|o, i, k| out[o] += input[i] * kernel[k]);
        out
    }

    pub fn backward_input(&self, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
        self.for_each_tap(|o, i, k| grad_in[i] += grad_out[o] * kernel[k]);
    }

    pub fn backward_kernel(&self, grad_out: &[f64], input: &[f64], grad_k: &mut [f64]) {
        self.for_each_tap(|o, i, k| grad_k[k] += grad_out[o] * input[i]);
    }
}

/// Tape-free 2-D cross-correlation; returns `(data, output shape)`.
pub fn conv2d_forward(
    input: &[f64],
    input_shape: &[usize],
    kernel: &[f64],
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Vec<f64>, Vec<usize>), String> {
    let g = ConvGeom::new(input_shape, kernel_shape, stride, padding)?;
    Ok((g.forward(input, kernel), vec![g.batch, g.filters, g.oh, g.ow]))
}
