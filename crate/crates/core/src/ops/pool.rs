//! 3x3 pooling with pad 1 and global average pooling.
//!
//! Average pooling always divides by the full window area (9), padding
//! included, so border outputs are scaled down. Max pooling takes the maximum
//! over the window cells that land inside the image.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tape::{BackwardOp, Tape, ValueId};
use crate::tensor::Shape;

const K: usize = 3;
const PAD: isize = 1;

fn pooled_dim(size: usize, stride: usize) -> usize {
    // (size + 2*1 - 3) / stride + 1
    (size - 1) / stride + 1
}

struct AvgPoolBack {
    x: ValueId,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    planes: usize,
}

impl BackwardOp for AvgPoolBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            let inv = 1.0 / (K * K) as f64;
            for pl in 0..self.planes {
                let in_base = pl * self.h * self.w;
                let out_base = pl * self.ho * self.wo;
                for oh in 0..self.ho {
                    for ow in 0..self.wo {
                        let g = out_grad[out_base + oh * self.wo + ow] * inv;
                        for kh in 0..K {
                            let ih = (oh * self.stride) as isize + kh as isize - PAD;
                            if ih < 0 || ih >= self.h as isize {
                                continue;
                            }
                            for kw in 0..K {
                                let iw = (ow * self.stride) as isize + kw as isize - PAD;
                                if iw < 0 || iw >= self.w as isize {
                                    continue;
                                }
                                gx[in_base + ih as usize * self.w + iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct MaxPoolBack {
    x: ValueId,
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPoolBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            for (o, &src) in self.argmax.iter().enumerate() {
                gx[src] += out_grad[o];
            }
        }
    }
}

struct GlobalAvgPoolBack {
    x: ValueId,
    spatial: usize,
}

impl BackwardOp for GlobalAvgPoolBack {
    fn backward(&self, out_grad: &[f64], _vals: &[Vec<f64>], grads: &mut [Option<Vec<f64>>]) {
        if let Some(gx) = grads[self.x.0].as_mut() {
            let inv = 1.0 / self.spatial as f64;
            for (nc, &g) in out_grad.iter().enumerate() {
                let base = nc * self.spatial;
                for i in 0..self.spatial {
                    gx[base + i] += g * inv;
                }
            }
        }
    }
}

fn check_rank4(tape: &Tape, x: ValueId, ctx: &str) -> Result<()> {
    if tape.shape(x).rank() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "{ctx}: pooling needs a rank-4 input, got {}",
            tape.shape(x).describe()
        )));
    }
    Ok(())
}

impl Tape {
    /// 3x3 average pooling, pad 1, full-window divisor.
    pub fn avg_pool3(&mut self, x: ValueId, stride: usize, ctx: &str) -> Result<ValueId> {
        check_rank4(self, x, ctx)?;
        let s = self.shape(x).clone();
        let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
        let (ho, wo) = (pooled_dim(h, stride), pooled_dim(w, stride));
        let planes = n * c;
        let xv = self.value(x);
        let mut out = vec![0.0; planes * ho * wo];
        let inv = 1.0 / (K * K) as f64;
        for pl in 0..planes {
            let in_base = pl * h * w;
            let out_base = pl * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut sum = 0.0;
                    for kh in 0..K {
                        let ih = (oh * stride) as isize + kh as isize - PAD;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..K {
                            let iw = (ow * stride) as isize + kw as isize - PAD;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            sum += xv[in_base + ih as usize * w + iw as usize];
                        }
                    }
                    out[out_base + oh * wo + ow] = sum * inv;
                }
            }
        }
        let wants = self.wants_grad(x);
        Ok(self.push(
            Shape::nchw(n, c, ho, wo),
            out,
            Some(Box::new(AvgPoolBack {
                x,
                stride,
                h,
                w,
                ho,
                wo,
                planes,
            })),
            wants,
        ))
    }

    /// 3x3 max pooling, pad 1; the window is clipped to the image.
    pub fn max_pool3(&mut self, x: ValueId, stride: usize, ctx: &str) -> Result<ValueId> {
        check_rank4(self, x, ctx)?;
        let s = self.shape(x).clone();
        let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
        let (ho, wo) = (pooled_dim(h, stride), pooled_dim(w, stride));
        let planes = n * c;
        let xv = self.value(x);
        let mut out = vec![0.0; planes * ho * wo];
        let mut argmax = vec![0usize; planes * ho * wo];
        for pl in 0..planes {
            let in_base = pl * h * w;
            let out_base = pl * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..K {
                        let ih = (oh * stride) as isize + kh as isize - PAD;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..K {
                            let iw = (ow * stride) as isize + kw as isize - PAD;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = in_base + ih as usize * w + iw as usize;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_base + oh * wo + ow] = best;
                    argmax[out_base + oh * wo + ow] = best_idx;
                }
            }
        }
        let wants = self.wants_grad(x);
        Ok(self.push(
            Shape::nchw(n, c, ho, wo),
            out,
            Some(Box::new(MaxPoolBack { x, argmax })),
            wants,
        ))
    }

    /// Collapses `(N, C, H, W)` to `(N, C)` by spatial mean.
    pub fn global_avg_pool(&mut self, x: ValueId, ctx: &str) -> Result<ValueId> {
        check_rank4(self, x, ctx)?;
        let s = self.shape(x).clone();
        let (n, c, h, w) = (s.n(), s.c(), s.h(), s.w());
        let spatial = h * w;
        let xv = self.value(x);
        let mut out = vec![0.0; n * c];
        for nc in 0..n * c {
            let base = nc * spatial;
            let mut sum = 0.0;
            for i in 0..spatial {
                sum += xv[base + i];
            }
            out[nc] = sum / spatial as f64;
        }
        let wants = self.wants_grad(x);
        Ok(self.push(
            Shape(vec![n, c]),
            out,
            Some(Box::new(GlobalAvgPoolBack { x, spatial })),
            wants,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn avg_pool_uses_full_window_divisor_at_borders() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::filled(Shape::nchw(1, 1, 3, 3), 1.0));
        let y = tape.avg_pool3(x, 1, "test").unwrap();
        let v = tape.value(y);
        let want = [
            4.0 / 9.0,
            6.0 / 9.0,
            4.0 / 9.0,
            6.0 / 9.0,
            1.0,
            6.0 / 9.0,
            4.0 / 9.0,
            6.0 / 9.0,
            4.0 / 9.0,
        ];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn max_pool_on_constant_input_is_constant() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::filled(Shape::nchw(1, 1, 4, 4), 2.0));
        let y = tape.max_pool3(x, 1, "test").unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn stride_two_output_dims() {
        let mut tape = Tape::no_grad();
        let x = tape.input(&Tensor::zeros(Shape::nchw(2, 3, 8, 8)));
        let y = tape.max_pool3(x, 2, "test").unwrap();
        assert_eq!(tape.shape(y), &Shape::nchw(2, 3, 4, 4));
        let odd = tape.input(&Tensor::zeros(Shape::nchw(1, 1, 5, 5)));
        let yo = tape.avg_pool3(odd, 2, "test").unwrap();
        assert_eq!(tape.shape(yo), &Shape::nchw(1, 1, 3, 3));
    }

    #[test]
    fn global_avg_pool_means_each_plane() {
        let mut tape = Tape::no_grad();
        let x = tape.input(
            &Tensor::from_vec(
                Shape::nchw(1, 2, 1, 2),
                vec![1.0, 3.0, 10.0, 20.0],
            )
            .unwrap(),
        );
        let y = tape.global_avg_pool(x, "test").unwrap();
        assert_eq!(tape.value(y), &[2.0, 15.0]);
    }
}
