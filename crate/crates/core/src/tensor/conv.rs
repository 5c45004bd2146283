use super::gemm::sgemm;
use super::tape::{Backward, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec { stride, pad }
    }
}

/// Geometry of a convolution viewed from its (larger) input image.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &Geom, col: &mut [f32]) {
    let hw = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adds the columns back into image layout (adjoint of [`im2col`]).
fn col2im(col: &[f32], g: &Geom, x: &mut [f32]) {
    let hw = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], hw: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(grad: &[f32], batch: usize, channels: usize, hw: usize) -> Tensor {
    let mut gb = vec![0.0f32; channels];
    for b in 0..batch {
        for (c, g) in gb.iter_mut().enumerate() {
            let start = (b * channels + c) * hw;
            *g += grad[start..start + hw].iter().sum::<f32>();
        }
    }
    Tensor::new(vec![channels], gb).expect("bias shape")
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::invalid(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

/// 2-D cross-correlation. `x`: (B, Cin, H, W); `w`: (Cout, Cin, k, k);
/// optional `bias`: (Cout).
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
    let (batch, c_in, h, wd) = tape.value(x).dims4()?;
    let (c_out, wc_in, k, k2) = tape.value(w).dims4()?;
    if wc_in != c_in || k != k2 {
        return Err(Error::invalid(format!(
            "conv weight {:?} incompatible with input {:?}",
            tape.value(w).shape(),
            tape.value(x).shape()
        )));
    }
    if h + 2 * spec.pad < k || wd + 2 * spec.pad < k {
        return Err(Error::invalid("conv kernel larger than padded input"));
    }
    check_bias(bias.map(|b| tape.value(b)), c_out)?;
    let g = Geom {
        c: c_in,
        h,
        w: wd,
        k,
        stride: spec.stride,
        pad: spec.pad,
        ho: (h + 2 * spec.pad - k) / spec.stride + 1,
        wo: (wd + 2 * spec.pad - k) / spec.stride + 1,
    };
    let out_len = c_out * g.cols();
    let mut out = vec![0.0f32; batch * out_len];
    {
        let xs = tape.value(x).data();
        let ws = tape.value(w).data();
        let bs = bias.map(|b| tape.value(b).data());
        let in_len = c_in * h * wd;
        exec::for_each_chunk(&mut out, out_len, |b, ob| {
            let xb = &xs[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                sgemm(c_out, g.rows(), g.cols(), ws, false, xb, false, ob, 0.0);
            } else {
                let mut col = vec![0.0f32; g.rows() * g.cols()];
                im2col(xb, &g, &mut col);
                sgemm(c_out, g.rows(), g.cols(), ws, false, &col, false, ob, 0.0);
            }
            if let Some(bs) = bs {
                add_channel_bias(ob, bs, g.cols());
            }
        });
    }
    let value = Tensor::new(vec![batch, c_out, g.ho, g.wo], out)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(tape.push(value, inputs, Box::new(Conv2dBackward { g, c_out })))
}

struct Conv2dBackward {
    g: Geom,
    c_out: usize,
}

impl Backward for Conv2dBackward {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = self.g;
        let (x, w) = (inputs[0], inputs[1]);
        let batch = x.shape()[0];
        let in_len = g.c * g.h * g.w;
        let out_len = self.c_out * g.cols();
        let gs = grad.data();
        let xs = x.data();
        let ws = w.data();

        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; batch * in_len];
            exec::for_each_chunk(&mut gx, in_len, |b, gxb| {
                let gb = &gs[b * out_len..(b + 1) * out_len];
                if g.is_pointwise() {
                    sgemm(g.rows(), self.c_out, g.cols(), ws, true, gb, false, gxb, 0.0);
                } else {
                    let mut gcol = vec![0.0f32; g.rows() * g.cols()];
                    sgemm(g.rows(), self.c_out, g.cols(), ws, true, gb, false, &mut gcol, 0.0);
                    col2im(&gcol, &g, gxb);
                }
            });
            Tensor::new(x.shape().to_vec(), gx).expect("shape")
        });

        let gw = needs[1].then(|| {
            let wlen = self.c_out * g.rows();
            let parts = exec::map_indexed(batch, |b| {
                let xb = &xs[b * in_len..(b + 1) * in_len];
                let gb = &gs[b * out_len..(b + 1) * out_len];
                let mut part = vec![0.0f32; wlen];
                if g.is_pointwise() {
                    sgemm(self.c_out, g.cols(), g.rows(), gb, false, xb, true, &mut part, 0.0);
                } else {
                    let mut col = vec![0.0f32; g.rows() * g.cols()];
                    im2col(xb, &g, &mut col);
                    sgemm(self.c_out, g.cols(), g.rows(), gb, false, &col, true, &mut part, 0.0);
                }
                part
            });
            Tensor::new(w.shape().to_vec(), exec::ordered_sum(parts, wlen)).expect("shape")
        });

        let mut res = vec![gx, gw];
        if inputs.len() > 2 {
            res.push(needs[2].then(|| bias_grad(gs, batch, self.c_out, g.cols())));
        }
        res
    }
}

/// Transposed convolution (the adjoint of [`conv2d`] with the same
/// `spec`). `x`: (B, Cin, h, w); `w`: (Cin, Cout, k, k); output spatial size
/// `(h - 1) * stride - 2 * pad + k`.
pub fn conv_transpose2d(
    tape: &mut Tape,
    x: Var,
    w: Var,
    bias: Option<Var>,
    spec: ConvSpec,
) -> Result<Var> {
    let (batch, c_in, h, wd) = tape.value(x).dims4()?;
    let (wc_in, c_out, k, k2) = tape.value(w).dims4()?;
    if wc_in != c_in || k != k2 {
        return Err(Error::invalid(format!(
            "transposed-conv weight {:?} incompatible with input {:?}",
            tape.value(w).shape(),
            tape.value(x).shape()
        )));
    }
    let ho = ((h - 1) * spec.stride + k)
        .checked_sub(2 * spec.pad)
        .ok_or_else(|| Error::invalid("transposed-conv padding exceeds output"))?;
    let wo = ((wd - 1) * spec.stride + k)
        .checked_sub(2 * spec.pad)
        .ok_or_else(|| Error::invalid("transposed-conv padding exceeds output"))?;
    check_bias(bias.map(|b| tape.value(b)), c_out)?;
    // The forward pass of a transposed conv is the data-gradient of a conv
    // over the output image.
    let g = Geom {
        c: c_out,
        h: ho,
        w: wo,
        k,
        stride: spec.stride,
        pad: spec.pad,
        ho: h,
        wo: wd,
    };
    let in_len = c_in * h * wd;
    let out_len = c_out * ho * wo;
    let mut out = vec![0.0f32; batch * out_len];
    {
        let xs = tape.value(x).data();
        let ws = tape.value(w).data();
        let bs = bias.map(|b| tape.value(b).data());
        exec::for_each_chunk(&mut out, out_len, |b, ob| {
            let xb = &xs[b * in_len..(b + 1) * in_len];
            let mut col = vec![0.0f32; g.rows() * g.cols()];
            sgemm(g.rows(), c_in, g.cols(), ws, true, xb, false, &mut col, 0.0);
            col2im(&col, &g, ob);
            if let Some(bs) = bs {
                add_channel_bias(ob, bs, ho * wo);
            }
        });
    }
    let value = Tensor::new(vec![batch, c_out, ho, wo], out)?;
    let mut inputs = vec![x, w];
    inputs.extend(bias);
    Ok(tape.push(value, inputs, Box::new(ConvTransposeBackward { g, c_in })))
}

struct ConvTransposeBackward {
    g: Geom,
    c_in: usize,
}

impl Backward for ConvTransposeBackward {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = self.g;
        let (x, w) = (inputs[0], inputs[1]);
        let batch = x.shape()[0];
        let in_len = self.c_in * g.cols();
        let out_len = g.c * g.h * g.w;
        let gs = grad.data();
        let xs = x.data();
        let ws = w.data();

        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; batch * in_len];
            exec::for_each_chunk(&mut gx, in_len, |b, gxb| {
                let mut gcol = vec![0.0f32; g.rows() * g.cols()];
                im2col(&gs[b * out_len..(b + 1) * out_len], &g, &mut gcol);
                sgemm(self.c_in, g.rows(), g.cols(), ws, false, &gcol, false, gxb, 0.0);
            });
            Tensor::new(x.shape().to_vec(), gx).expect("shape")
        });

        let gw = needs[1].then(|| {
            let wlen = self.c_in * g.rows();
            let parts = exec::map_indexed(batch, |b| {
                let mut gcol = vec![0.0f32; g.rows() * g.cols()];
                im2col(&gs[b * out_len..(b + 1) * out_len], &g, &mut gcol);
                let mut part = vec![0.0f32; wlen];
                let xb = &xs[b * in_len..(b + 1) * in_len];
                sgemm(self.c_in, g.cols(), g.rows(), xb, false, &gcol, true, &mut part, 0.0);
                part
            });
            Tensor::new(w.shape().to_vec(), exec::ordered_sum(parts, wlen)).expect("shape")
        });

        let mut res = vec![gx, gw];
        if inputs.len() > 2 {
            res.push(needs[2].then(|| bias_grad(gs, batch, g.c, g.h * g.w)));
        }
        res
    }
}
