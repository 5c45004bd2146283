use super::gemm::sgemm;
use super::tape::{Backward, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

struct AddBackward;

impl Backward for AddBackward {
    fn backward(&self, _inputs: &[&Tensor], needs: &[bool], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
    }
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    if va.shape() != vb.shape() {
        return Err(Error::invalid(format!(
            "add: shapes {:?} and {:?} differ",
            va.shape(),
            vb.shape()
        )));
    }
    let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
    let value = Tensor::new(va.shape().to_vec(), data)?;
    Ok(tape.push(value, vec![a, b], Box::new(AddBackward)))
}

struct ReluBackward;

impl Backward for ReluBackward {
    fn backward(&self, _inputs: &[&Tensor], _needs: &[bool], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = out
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(out.shape().to_vec(), data).expect("shape"))]
    }
}

pub fn relu(tape: &mut Tape, x: Var) -> Var {
    let vx = tape.value(x);
    let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
    let value = Tensor::new(vx.shape().to_vec(), data).expect("shape");
    tape.push(value, vec![x], Box::new(ReluBackward))
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f32>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

struct BatchNormBackward {
    xhat: Vec<f32>,
    invstd: Vec<f32>,
    train: bool,
}

/// Per-channel batch normalization of a (B, C, H, W) tensor.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BatchNormMode<'_>,
    eps: f32,
) -> Result<(Var, Option<BnStats>)> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
        return Err(Error::invalid(format!("batch norm affine parameters must have {c} channels")));
    }
    let hw = h * w;
    let count = b * hw;
    let xs = tape.value(x).data();
    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for n in 0..b {
                    let start = (n * c + ch) * hw;
                    s += xs[start..start + hw].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0f64;
                for n in 0..b {
                    let start = (n * c + ch) * hw;
                    q += xs[start..start + hw]
                        .iter()
                        .map(|&v| (v as f64 - m).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = m as f32;
                var[ch] = (q / count as f64) as f32;
            }
            (mean, var)
        }
        BatchNormMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::invalid("running statistics have the wrong channel count"));
            }
            (mean.to_vec(), var.to_vec())
        }
    };
    let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gs = tape.value(gamma).data();
    let bs = tape.value(beta).data();
    let mut xhat = vec![0.0f32; xs.len()];
    let mut out = vec![0.0f32; xs.len()];
    for n in 0..b {
        for ch in 0..c {
            let start = (n * c + ch) * hw;
            for i in start..start + hw {
                let xh = (xs[i] - mean[ch]) * invstd[ch];
                xhat[i] = xh;
                out[i] = gs[ch] * xh + bs[ch];
            }
        }
    }
    let train = matches!(mode, BatchNormMode::Train);
    let value = Tensor::new(vec![b, c, h, w], out)?;
    let stats = train.then_some(BnStats { mean, var, count });
    let v = tape.push(
        value,
        vec![x, gamma, beta],
        Box::new(BatchNormBackward { xhat, invstd, train }),
    );
    Ok((v, stats))
}

impl Backward for BatchNormBackward {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let gamma = inputs[1].data();
        let (b, c, h, w) = x.dims4().expect("rank 4");
        let hw = h * w;
        let count = (b * hw) as f32;
        let gs = grad.data();
        let mut sum_g = vec![0.0f32; c];
        let mut sum_gx = vec![0.0f32; c];
        for n in 0..b {
            for ch in 0..c {
                let start = (n * c + ch) * hw;
                for i in start..start + hw {
                    sum_g[ch] += gs[i];
                    sum_gx[ch] += gs[i] * self.xhat[i];
                }
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; gs.len()];
            for n in 0..b {
                for ch in 0..c {
                    let start = (n * c + ch) * hw;
                    let scale = gamma[ch] * self.invstd[ch];
                    for i in start..start + hw {
                        gx[i] = if self.train {
                            scale / count * (count * gs[i] - sum_g[ch] - self.xhat[i] * sum_gx[ch])
                        } else {
                            scale * gs[i]
                        };
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), gx).expect("shape")
        });
        vec![
            gx,
            needs[1].then(|| Tensor::new(vec![c], sum_gx).expect("shape")),
            needs[2].then(|| Tensor::new(vec![c], sum_g).expect("shape")),
        ]
    }
}

struct PoolBackward;

impl Backward for PoolBackward {
    fn backward(&self, inputs: &[&Tensor], _needs: &[bool], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, c, h, w) = inputs[0].dims4().expect("rank 4");
        let hw = h * w;
        let mut gx = vec![0.0f32; b * c * hw];
        for (i, &g) in grad.data().iter().enumerate() {
            gx[i * hw..(i + 1) * hw].fill(g / hw as f32);
        }
        vec![Some(Tensor::new(vec![b, c, h, w], gx).expect("shape"))]
    }
}

/// (B, C, H, W) → (B, C) spatial mean.
pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    let hw = h * w;
    let data = tape
        .value(x)
        .data()
        .chunks(hw)
        .map(|p| p.iter().sum::<f32>() / hw as f32)
        .collect();
    let value = Tensor::new(vec![b, c], data)?;
    Ok(tape.push(value, vec![x], Box::new(PoolBackward)))
}

struct LinearBackward;

impl Backward for LinearBackward {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, fin) = x.dims2().expect("rank 2");
        let fout = w.shape()[0];
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0f32; b * fin];
            sgemm(b, fout, fin, grad.data(), false, w.data(), false, &mut gx, 0.0);
            Tensor::new(vec![b, fin], gx).expect("shape")
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0f32; fout * fin];
            sgemm(fout, b, fin, grad.data(), true, x.data(), false, &mut gw, 0.0);
            Tensor::new(vec![fout, fin], gw).expect("shape")
        });
        let gb = needs[2].then(|| {
            let mut gb = vec![0.0f32; fout];
            for row in grad.data().chunks(fout) {
                gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
            }
            Tensor::new(vec![fout], gb).expect("shape")
        });
        vec![gx, gw, gb]
    }
}

/// Affine map `x W^T + b`; `x`: (B, In), `w`: (Out, In), `b`: (Out).
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let (batch, fin) = tape.value(x).dims2()?;
    let (fout, wfin) = tape.value(w).dims2()?;
    if wfin != fin || tape.value(b).shape() != [fout] {
        return Err(Error::invalid(format!(
            "linear weight {:?} incompatible with input {:?}",
            tape.value(w).shape(),
            tape.value(x).shape()
        )));
    }
    let mut out = vec![0.0f32; batch * fout];
    sgemm(batch, fin, fout, tape.value(x).data(), false, tape.value(w).data(), true, &mut out, 0.0);
    for row in out.chunks_mut(fout) {
        row.iter_mut()
            .zip(tape.value(b).data())
            .for_each(|(o, bias)| *o += bias);
    }
    let value = Tensor::new(vec![batch, fout], out)?;
    Ok(tape.push(value, vec![x, w, b], Box::new(LinearBackward)))
}

struct ConcatBackward {
    channels: Vec<usize>,
}

impl Backward for ConcatBackward {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, total, h, w) = out.dims4().expect("rank 4");
        let hw = h * w;
        let mut offset = 0;
        let mut res = Vec::with_capacity(inputs.len());
        for (i, &c) in self.channels.iter().enumerate() {
            if needs[i] {
                let mut g = Vec::with_capacity(b * c * hw);
                for n in 0..b {
                    let start = (n * total + offset) * hw;
                    g.extend_from_slice(&grad.data()[start..start + c * hw]);
                }
                res.push(Some(Tensor::new(vec![b, c, h, w], g).expect("shape")));
            } else {
                res.push(None);
            }
            offset += c;
        }
        res
    }
}

/// Concatenates (B, C_i, H, W) tensors along the channel axis.
pub fn concat_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let first = xs.first().ok_or_else(|| Error::invalid("concat of an empty list"))?;
    let (b, _, h, w) = tape.value(*first).dims4()?;
    let mut channels = Vec::with_capacity(xs.len());
    for &x in xs {
        let (bx, cx, hx, wx) = tape.value(x).dims4()?;
        if (bx, hx, wx) != (b, h, w) {
            return Err(Error::invalid(format!(
                "concat: shape {:?} does not match {:?}",
                tape.value(x).shape(),
                tape.value(*first).shape()
            )));
        }
        channels.push(cx);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(b * total * hw);
    for n in 0..b {
        for (&x, &c) in xs.iter().zip(&channels) {
            let start = n * c * hw;
            data.extend_from_slice(&tape.value(x).data()[start..start + c * hw]);
        }
    }
    let value = Tensor::new(vec![b, total, h, w], data)?;
    Ok(tape.push(value, xs.to_vec(), Box::new(ConcatBackward { channels })))
}
