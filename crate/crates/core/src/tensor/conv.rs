use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding of a 2-D convolution. Padding is symmetric per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            stride,
            pad_h: padding,
            pad_w: padding,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let [h, w, c_in] = *input else {
            return Err(Error::Shape(format!(
                "conv2d input must be HxWxC, got {input:?}"
            )));
        };
        let [kh, kw, k_in, c_out] = *kernel else {
            return Err(Error::Shape(format!(
                "conv2d kernel must be kh x kw x C_in x C_out, got {kernel:?}"
            )));
        };
        if k_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d input has {c_in} channels but kernel expects {k_in}"
            )));
        }
        if spec.stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let ph = h + 2 * spec.pad_h;
        let pw = w + 2 * spec.pad_w;
        if kh > ph || kw > pw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(ConvGeom {
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            out_h: (ph - kh) / spec.stride + 1,
            out_w: (pw - kw) / spec.stride + 1,
            spec,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad_h == 0 && self.spec.pad_w == 0
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(row, col_offset_in_patch, input_offset) for every in-bounds tap.
        let s = self.spec.stride;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = oy * self.out_w + ox;
                for ky in 0..self.kh {
                    let iy = (oy * s + ky) as isize - self.spec.pad_h as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * s + kx) as isize - self.spec.pad_w as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let col = (ky * self.kw + kx) * self.c_in;
                        let src = (iy as usize * self.w + ix as usize) * self.c_in;
                        f(row, col, src);
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let plen = self.patch_len();
        let mut cols = vec![0.0; self.out_h * self.out_w * plen];
        let c = self.c_in;
        self.for_each_tap(|row, col, src| {
            let dst = row * plen + col;
            cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
        });
        cols
    }

    pub fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let plen = self.patch_len();
        let c = self.c_in;
        self.for_each_tap(|row, col, src| {
            let from = row * plen + col;
            for (g, v) in grad_input[src..src + c].iter_mut().zip(&cols[from..from + c]) {
                *g += v;
            }
        });
    }
}

/// Plain forward convolution without recording anything.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let geom = ConvGeom::new(input.shape(), kernel.shape(), spec)?;
    Ok(forward_with_geom(&geom, input, kernel).0)
}

/// Returns the output and, unless the convolution is pointwise, the im2col buffer.
pub(crate) fn forward_with_geom(
    geom: &ConvGeom,
    input: &Tensor,
    kernel: &Tensor,
) -> (Tensor, Option<Vec<f64>>) {
    let rows = geom.out_h * geom.out_w;
    let mut out = vec![0.0; rows * geom.c_out];
    let cols = if geom.is_pointwise() {
        None
    } else {
        Some(geom.im2col(input.data()))
    };
    let a = cols.as_deref().unwrap_or(input.data());
    gemm(
        rows,
        geom.patch_len(),
        geom.c_out,
        a,
        false,
        kernel.data(),
        false,
        &mut out,
        false,
    );
    let out = Tensor::new(vec![geom.out_h, geom.out_w, geom.c_out], out)
        .expect("conv output shape");
    (out, cols)
}
