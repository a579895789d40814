//! Grouped, strided, dilated 2d convolution with zero padding and no bias.
//!
//! One implementation covers every convolution in the search space: the stem
//! (groups 1), depthwise kernels (groups = channels), pointwise 1x1 mixes, and
//! strided 1x1 reduction adapters. Weight layout is
//! `(C_out, C_in / groups, KH, KW)`.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{BackwardOp, Tape, ValueId};
use crate::tensor::Shape;

/// Geometry of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn plain(stride: usize, pad: usize) -> Self {
        Conv2dSpec {
            stride,
            pad,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, pad: usize, dilation: usize, channels: usize) -> Self {
        Conv2dSpec {
            stride,
            pad,
            dilation,
            groups: channels,
        }
    }

    pub fn pointwise() -> Self {
        Conv2dSpec::plain(1, 0)
    }

    fn out_dim(&self, size: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        (size + 2 * self.pad).checked_sub(span).map(|d| d / self.stride + 1)
    }
}

struct Dims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

/// Output rows `o` for which `o * stride + off` lands in `[0, size)`.
fn valid_range(size_in: usize, size_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 {
        (((-off) as usize) + stride - 1) / stride
    } else {
        0
    };
    let last = size_in as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(size_out);
    (lo.min(hi), hi)
}

fn conv_forward(x: &[f64], w: &[f64], d: &Dims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.ho * d.wo];
    let cig = d.c_in / d.spec.groups;
    let cog = d.c_out / d.spec.groups;
    let s = d.spec.stride;
    let dil = d.spec.dilation;
    let p = d.spec.pad as isize;
    for n in 0..d.n {
        for g in 0..d.spec.groups {
            for col in 0..cog {
                let co = g * cog + col;
                let out_base = (n * d.c_out + co) * d.ho * d.wo;
                for cil in 0..cig {
                    let ci = g * cig + cil;
                    let in_base = (n * d.c_in + ci) * d.h * d.w;
                    for kh in 0..d.kh {
                        let off_h = (kh * dil) as isize - p;
                        let (oh0, oh1) = valid_range(d.h, d.ho, s, off_h);
                        for kw in 0..d.kw {
                            let off_w = (kw * dil) as isize - p;
                            let (ow0, ow1) = valid_range(d.w, d.wo, s, off_w);
                            let wv = w[((co * cig + cil) * d.kh + kh) * d.kw + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            for oh in oh0..oh1 {
                                let ih = (oh * s) as isize + off_h;
                                let in_row = in_base + ih as usize * d.w;
                                let out_row = out_base + oh * d.wo;
                                let mut iw = (ow0 * s) as isize + off_w;
                                for ow in ow0..ow1 {
                                    out[out_row + ow] += wv * x[in_row + iw as usize];
                                    iw += s as isize;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv2dBack {
    x: ValueId,
    w: ValueId,
    dims: Dims,
}

impl BackwardOp for Conv2dBack {
    fn backward(&self, out_grad: &[f64], vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        let d = &self.dims;
        let xv = &vals[self.x.0];
        let wv_all = &vals[self.w.0];
        let mut gx = grads[self.x.0].take();
        let mut gw = grads[self.w.0].take();
        let cig = d.c_in / d.spec.groups;
        let cog = d.c_out / d.spec.groups;
        let s = d.spec.stride;
        let dil = d.spec.dilation;
        let p = d.spec.pad as isize;
        for n in 0..d.n {
            for g in 0..d.spec.groups {
                for col in 0..cog {
                    let co = g * cog + col;
                    let out_base = (n * d.c_out + co) * d.ho * d.wo;
                    for cil in 0..cig {
                        let ci = g * cig + cil;
                        let in_base = (n * d.c_in + ci) * d.h * d.w;
                        for kh in 0..d.kh {
                            let off_h = (kh * dil) as isize - p;
                            let (oh0, oh1) = valid_range(d.h, d.ho, s, off_h);
                            for kw in 0..d.kw {
                                let off_w = (kw * dil) as isize - p;
                                let (ow0, ow1) = valid_range(d.w, d.wo, s, off_w);
                                let widx = ((co * cig + cil) * d.kh + kh) * d.kw + kw;
                                let wv = wv_all[widx];
                                let mut wsum = 0.0;
                                for oh in oh0..oh1 {
                                    let ih = (oh * s) as isize + off_h;
                                    let in_row = in_base + ih as usize * d.w;
                                    let out_row = out_base + oh * d.wo;
                                    let mut iw = (ow0 * s) as isize + off_w;
                                    match gx.as_mut() {
                                        Some(gx) => {
                                            for ow in ow0..ow1 {
                                                let go = out_grad[out_row + ow];
                                                wsum += xv[in_row + iw as usize] * go;
                                                gx[in_row + iw as usize] += wv * go;
                                                iw += s as isize;
                                            }
                                        }
                                        None => {
                                            for ow in ow0..ow1 {
                                                wsum += xv[in_row + iw as usize]
                                                    * out_grad[out_row + ow];
                                                iw += s as isize;
                                            }
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += wsum;
                                }
                            }
                        }
                    }
                }
            }
        }
        grads[self.x.0] = gx;
        grads[self.w.0] = gw;
    }
}

impl Tape {
    /// 2d convolution of `(N, C_in, H, W)` by weights
    /// `(C_out, C_in / groups, KH, KW)`. `ctx` names the owning edge or layer
    /// in shape diagnostics.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, spec: Conv2dSpec, ctx: &str) -> Result<ValueId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.rank() != 4 || ws.rank() != 4 {
            return Err(CoreError::ShapeMismatch(format!(
                "{ctx}: conv2d needs rank-4 input and weights, got {} and {}",
                xs.describe(),
                ws.describe()
            )));
        }
        let (n, c_in, h, wdim) = (xs.n(), xs.c(), xs.h(), xs.w());
        let (c_out, c_per_group, kh, kw) = (ws.0[0], ws.0[1], ws.0[2], ws.0[3]);
        if spec.groups == 0
            || c_in % spec.groups != 0
            || c_out % spec.groups != 0
            || c_per_group != c_in / spec.groups
        {
            return Err(CoreError::ShapeMismatch(format!(
                "{ctx}: conv2d weights {} incompatible with input {} at groups {}",
                ws.describe(),
                xs.describe(),
                spec.groups
            )));
        }
        let (ho, wo) = match (spec.out_dim(h, kh), spec.out_dim(wdim, kw)) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
            _ => {
                return Err(CoreError::ShapeMismatch(format!(
                    "{ctx}: conv2d kernel {kh}x{kw} does not fit input {}",
                    xs.describe()
                )))
            }
        };
        let dims = Dims {
            n,
            c_in,
            h,
            w: wdim,
            c_out,
            kh,
            kw,
            ho,
            wo,
            spec,
        };
        let out = conv_forward(self.value(x), self.value(w), &dims);
        let wants = self.wants_grad(x) || self.wants_grad(w);
        Ok(self.push(
            Shape::nchw(n, c_out, ho, wo),
            out,
            Some(Box::new(Conv2dBack { x, w, dims })),
            wants,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_kernel_passes_through() {
        let mut tape = Tape::no_grad();
        let x = tape.input(
            &Tensor::from_vec(Shape::nchw(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let w = tape.input(&Tensor::from_vec(Shape(vec![1, 1, 1, 1]), vec![1.0]).unwrap());
        let y = tape.conv2d(x, w, Conv2dSpec::pointwise(), "test").unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn three_by_three_same_padding_sums_neighborhood() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::filled(Shape::nchw(1, 1, 3, 3), 1.0));
        let w = tape.input(&Tensor::filled(Shape(vec![1, 1, 3, 3]), 1.0));
        let y = tape.conv2d(x, w, Conv2dSpec::plain(1, 1), "test").unwrap();
        // corner sees 4 cells, edge 6, center 9
        assert_eq!(
            tape.value(y),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::filled(Shape::nchw(1, 2, 6, 6), 1.0));
        let w = tape.input(&Tensor::filled(Shape(vec![4, 2, 1, 1]), 0.5));
        let spec = Conv2dSpec {
            stride: 2,
            pad: 0,
            dilation: 1,
            groups: 1,
        };
        let y = tape.conv2d(x, w, spec, "test").unwrap();
        assert_eq!(tape.shape(y), &Shape::nchw(1, 4, 3, 3));
        assert!(tape.value(y).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dilated_kernel_covers_wider_span() {
        // 3x3 kernel at dilation 2 spans 5 pixels; pad 2 keeps spatial size
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::filled(Shape::nchw(1, 1, 5, 5), 1.0));
        let w = tape.input(&Tensor::filled(Shape(vec![1, 1, 3, 3]), 1.0));
        let spec = Conv2dSpec {
            stride: 1,
            pad: 2,
            dilation: 2,
            groups: 1,
        };
        let y = tape.conv2d(x, w, spec, "test").unwrap();
        assert_eq!(tape.shape(y), &Shape::nchw(1, 1, 5, 5));
        // center output touches all 9 taps
        assert_eq!(tape.value(y)[12], 9.0);
        // corner output only the 4 taps that land inside
        assert_eq!(tape.value(y)[0], 4.0);
    }

    #[test]
    fn depthwise_groups_keep_channels_independent() {
        let mut tape = Tape::no_grad();
        let x = tape.input(
            &Tensor::from_vec(Shape::nchw(1, 2, 1, 1), vec![1.0, 10.0]).unwrap(),
        );
        let w = tape.input(&Tensor::from_vec(Shape(vec![2, 1, 1, 1]), vec![2.0, 3.0]).unwrap());
        let y = tape
            .conv2d(x, w, Conv2dSpec::depthwise(1, 0, 1, 2), "test")
            .unwrap();
        assert_eq!(tape.value(y), &[2.0, 30.0]);
    }

    #[test]
    fn rejects_mismatched_group_channels() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::zeros(Shape::nchw(1, 3, 2, 2)));
        let w = tape.input(&Tensor::zeros(Shape(vec![3, 1, 1, 1])));
        let err = tape.conv2d(x, w, Conv2dSpec::pointwise(), "edge7").unwrap_err();
        match err {
            CoreError::ShapeMismatch(msg) => assert!(msg.contains("edge7")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
