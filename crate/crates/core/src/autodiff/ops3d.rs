//! Volumetric (5-d) operations: direct 3D convolution, nearest-neighbor
//! upsampling, group normalization, channel softmax, and channel concat.
//!
//! Tensors are laid out `[n, c, D, H, W]` row-major with W fastest.
//! Convolution uses cross-correlation semantics (no kernel flip).

use serde::{Deserialize, Serialize};

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial padding policy for [`Graph::conv3d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero-pad (k-1)/2 on each side; output extent ceil(in/stride).
    Same,
    /// No padding; output extent (in-k)/stride + 1.
    Valid,
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if x.shape().len() != 5 {
        return Err(Error::Shape(format!(
            "conv3d input must be 5-d [n,c,D,H,W], got {:?}",
            x.shape()
        )));
    }
    if w.shape().len() != 5 || w.shape()[2] != w.shape()[3] || w.shape()[2] != w.shape()[4] {
        return Err(Error::Shape(format!(
            "conv3d weights must be [c_out,c_in,k,k,k], got {:?}",
            w.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv3d stride must be positive".into()));
    }
    let k = w.shape()[2];
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::Shape(format!(
            "conv3d input has {} channels but weights expect {}",
            x.shape()[1],
            w.shape()[1]
        )));
    }
    let pad = match padding {
        Padding::Same => {
            if k % 2 == 0 {
                return Err(Error::Invalid(format!(
                    "same padding requires odd kernel size, got {}",
                    k
                )));
            }
            (k - 1) / 2
        }
        Padding::Valid => 0,
    };
    let din = [x.shape()[2], x.shape()[3], x.shape()[4]];
    if padding == Padding::Valid && din.iter().any(|&e| e < k) {
        return Err(Error::Shape(format!(
            "valid conv3d needs extents >= k={}, got {:?}",
            k, din
        )));
    }
    Ok(ConvGeom {
        n: x.shape()[0],
        c_in: x.shape()[1],
        c_out: w.shape()[0],
        k,
        stride,
        pad,
        din,
        dout: [
            out_extent(din[0], k, stride, pad),
            out_extent(din[1], k, stride, pad),
            out_extent(din[2], k, stride, pad),
        ],
    })
}

/// Range of output positions whose input index `o*stride + ko - pad` lies
/// inside `[0, extent)`.
#[inline]
fn valid_out_range(extent: usize, stride: usize, ko: usize, pad: usize, out: usize) -> (usize, usize) {
    let off = ko as isize - pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + stride - 1) / stride
    };
    let hi_in = extent as isize - 1 - off;
    if hi_in < 0 {
        return (1, 0);
    }
    let hi = (hi_in as usize / stride).min(out - 1);
    (lo, hi)
}

fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let [di, hi, wi] = g.din;
    let [do_, ho, wo] = g.dout;
    let mut out = Tensor::zeros(&[g.n, g.c_out, do_, ho, wo]);
    let xin = x.data();
    let wt = w.data();
    let o = out.data_mut();
    let in_sp = di * hi * wi;
    let out_sp = do_ * ho * wo;
    let kk = g.k * g.k * g.k;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let obase = (n * g.c_out + co) * out_sp;
            if let Some(b) = bias {
                let bv = b.data()[co];
                o[obase..obase + out_sp].iter_mut().for_each(|v| *v = bv);
            }
            for ci in 0..g.c_in {
                let ibase = (n * g.c_in + ci) * in_sp;
                let wbase = (co * g.c_in + ci) * kk;
                for kd in 0..g.k {
                    let (dlo, dhi) = valid_out_range(di, g.stride, kd, g.pad, do_);
                    for kh in 0..g.k {
                        let (hlo, hhi) = valid_out_range(hi, g.stride, kh, g.pad, ho);
                        for kw in 0..g.k {
                            let (wlo, whi) = valid_out_range(wi, g.stride, kw, g.pad, wo);
                            if wlo > whi || hlo > hhi || dlo > dhi {
                                continue;
                            }
                            let wv = wt[wbase + (kd * g.k + kh) * g.k + kw];
                            if wv == T::zero() {
                                continue;
                            }
                            let woff = kw as isize - g.pad as isize;
                            for od in dlo..=dhi {
                                let id = od * g.stride + kd - g.pad;
                                for oh in hlo..=hhi {
                                    let ih = oh * g.stride + kh - g.pad;
                                    let orow = obase + (od * ho + oh) * wo;
                                    let irow = (ibase + (id * hi + ih) * wi) as isize + woff;
                                    for ow in wlo..=whi {
                                        let iw = irow + (ow * g.stride) as isize;
                                        o[orow + ow] += wv * xin[iw as usize];
                                    }
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

fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    has_bias: bool,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let [di, hi, wi] = g.din;
    let [do_, ho, wo] = g.dout;
    let xin = x.data();
    let wt = w.data();
    let go = gout.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let in_sp = di * hi * wi;
    let out_sp = do_ * ho * wo;
    let kk = g.k * g.k * g.k;
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        for n in 0..g.n {
            for co in 0..g.c_out {
                let obase = (n * g.c_out + co) * out_sp;
                for ci in 0..g.c_in {
                    let ibase = (n * g.c_in + ci) * in_sp;
                    let wbase = (co * g.c_in + ci) * kk;
                    for kd in 0..g.k {
                        let (dlo, dhi) = valid_out_range(di, g.stride, kd, g.pad, do_);
                        for kh in 0..g.k {
                            let (hlo, hhi) = valid_out_range(hi, g.stride, kh, g.pad, ho);
                            for kw in 0..g.k {
                                let (wlo, whi) = valid_out_range(wi, g.stride, kw, g.pad, wo);
                                if wlo > whi || hlo > hhi || dlo > dhi {
                                    continue;
                                }
                                let widx = wbase + (kd * g.k + kh) * g.k + kw;
                                let wv = wt[widx];
                                let woff = kw as isize - g.pad as isize;
                                let mut acc = T::zero();
                                for od in dlo..=dhi {
                                    let id = od * g.stride + kd - g.pad;
                                    for oh in hlo..=hhi {
                                        let ih = oh * g.stride + kh - g.pad;
                                        let orow = obase + (od * ho + oh) * wo;
                                        let irow = (ibase + (id * hi + ih) * wi) as isize + woff;
                                        for ow in wlo..=whi {
                                            let iw = (irow + (ow * g.stride) as isize) as usize;
                                            let gv = go[orow + ow];
                                            acc += gv * xin[iw];
                                            dxd[iw] += wv * gv;
                                        }
                                    }
                                }
                                dwd[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    let db = if has_bias {
        let mut db = Tensor::zeros(&[g.c_out]);
        for n in 0..g.n {
            for co in 0..g.c_out {
                let obase = (n * g.c_out + co) * out_sp;
                let mut acc = T::zero();
                for v in &go[obase..obase + out_sp] {
                    acc += *v;
                }
                db.data_mut()[co] += acc;
            }
        }
        Some(db)
    } else {
        None
    };
    (dx, dw, db)
}

impl<T: Scalar> Graph<T> {
    /// Strided 3D cross-correlation of `[n,c_in,D,H,W]` with
    /// `[c_out,c_in,k,k,k]` weights and optional per-channel bias.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = conv_geometry(self.value(x), self.value(w), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.c_out] {
                return Err(Error::Shape(format!(
                    "bias shape {:?} does not match c_out={}",
                    self.value(b).shape(),
                    geom.c_out
                )));
            }
        }
        let out = conv3d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let has_bias = bias.is_some();
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push_op(
            out,
            parents,
            Box::new(move |ctx| {
                let (dx, dw, db) =
                    conv3d_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad, has_bias, &geom);
                let mut grads = vec![dx, dw];
                if let Some(db) = db {
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    /// Nearest-neighbor upsampling of each spatial extent by `factor`.
    pub fn upsample3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Invalid("upsample factor must be positive".into()));
        }
        let v = self.value(x);
        if v.shape().len() != 5 {
            return Err(Error::Shape(format!(
                "upsample3d expects 5-d input, got {:?}",
                v.shape()
            )));
        }
        let (n, c, d, h, w) = (
            v.shape()[0],
            v.shape()[1],
            v.shape()[2],
            v.shape()[3],
            v.shape()[4],
        );
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
        {
            let src = v.data();
            let dst = out.data_mut();
            for nc in 0..n * c {
                let sbase = nc * d * h * w;
                let dbase = nc * od * oh * ow;
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            dst[dbase + (zd * oh + zh) * ow + zw] = src
                                [sbase + ((zd / factor) * h + zh / factor) * w + zw / factor];
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut dx = Tensor::zeros(ctx.inputs[0].shape());
                let go = ctx.grad.data();
                let dxd = dx.data_mut();
                for nc in 0..n * c {
                    let sbase = nc * d * h * w;
                    let dbase = nc * od * oh * ow;
                    for zd in 0..od {
                        for zh in 0..oh {
                            for zw in 0..ow {
                                dxd[sbase + ((zd / factor) * h + zh / factor) * w + zw / factor] +=
                                    go[dbase + (zd * oh + zh) * ow + zw];
                            }
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Group normalization over channel groups of a 5-d tensor, followed by
    /// a per-channel affine transform.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 5 {
            return Err(Error::Shape(format!(
                "group_norm expects 5-d input, got {:?}",
                v.shape()
            )));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Invalid(format!(
                "channel count {} not divisible by {} groups",
                c, groups
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("gamma/beta must have shape [c]".into()));
        }
        let spatial: usize = v.shape()[2..].iter().product();
        let cg = c / groups;
        let group_len = cg * spatial;
        let out = {
            let xd = v.data();
            let gam = self.value(gamma).data();
            let bet = self.value(beta).data();
            let mut out = Tensor::zeros(v.shape());
            let od = out.data_mut();
            for nn in 0..n {
                for gi in 0..groups {
                    let base = (nn * c + gi * cg) * spatial;
                    let (mean, var) = mean_var(&xd[base..base + group_len]);
                    let inv = (var + eps).sqrt().recip();
                    for cc in 0..cg {
                        let ch = gi * cg + cc;
                        let rb = base + cc * spatial;
                        for i in rb..rb + spatial {
                            od[i] = gam[ch] * ((xd[i] - mean) * inv) + bet[ch];
                        }
                    }
                }
            }
            out
        };
        Ok(self.push_op(
            out,
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let xd = ctx.inputs[0].data();
                let gam = ctx.inputs[1].data();
                let go = ctx.grad.data();
                let mut dx = Tensor::zeros(ctx.inputs[0].shape());
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let dxd = dx.data_mut();
                let m = T::from_usize(group_len).unwrap();
                for nn in 0..n {
                    for gi in 0..groups {
                        let base = (nn * c + gi * cg) * spatial;
                        let (mean, var) = mean_var(&xd[base..base + group_len]);
                        let inv = (var + eps).sqrt().recip();
                        // h = upstream * gamma, fed into the normalized value
                        let mut sum_h = T::zero();
                        let mut sum_hx = T::zero();
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let rb = base + cc * spatial;
                            for i in rb..rb + spatial {
                                let xhat = (xd[i] - mean) * inv;
                                let h = go[i] * gam[ch];
                                sum_h += h;
                                sum_hx += h * xhat;
                                dgamma.data_mut()[ch] += go[i] * xhat;
                                dbeta.data_mut()[ch] += go[i];
                            }
                        }
                        let mh = sum_h / m;
                        let mhx = sum_hx / m;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            let rb = base + cc * spatial;
                            for i in rb..rb + spatial {
                                let xhat = (xd[i] - mean) * inv;
                                dxd[i] = inv * (go[i] * gam[ch] - mh - xhat * mhx);
                            }
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    /// Softmax over the channel axis of a 5-d tensor, stabilized by
    /// max-subtraction. Every voxel's channel scores sum to one.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 5 {
            return Err(Error::Shape(format!(
                "softmax_channel expects 5-d input, got {:?}",
                v.shape()
            )));
        }
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let spatial: usize = v.shape()[2..].iter().product();
        let mut out = Tensor::zeros(v.shape());
        {
            let xd = v.data();
            let od = out.data_mut();
            for nn in 0..n {
                let base = nn * c * spatial;
                for sp in 0..spatial {
                    let mut mx = T::neg_infinity();
                    for ch in 0..c {
                        mx = mx.max(xd[base + ch * spatial + sp]);
                    }
                    let mut denom = T::zero();
                    for ch in 0..c {
                        let e = (xd[base + ch * spatial + sp] - mx).exp();
                        od[base + ch * spatial + sp] = e;
                        denom += e;
                    }
                    for ch in 0..c {
                        od[base + ch * spatial + sp] /= denom;
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            vec![x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let go = ctx.grad.data();
                let mut dx = Tensor::zeros(ctx.inputs[0].shape());
                let dxd = dx.data_mut();
                for nn in 0..n {
                    let base = nn * c * spatial;
                    for sp in 0..spatial {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = base + ch * spatial + sp;
                            dot += go[i] * y[i];
                        }
                        for ch in 0..c {
                            let i = base + ch * spatial + sp;
                            dxd[i] = y[i] * (go[i] - dot);
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Concatenate 5-d tensors along the channel axis.
    pub fn concat_channels(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let first = self.value(vars[0]).shape().to_vec();
        if first.len() != 5 {
            return Err(Error::Shape("concat_channels expects 5-d inputs".into()));
        }
        let mut channels = Vec::with_capacity(vars.len());
        for v in vars {
            let sh = self.value(*v).shape();
            if sh[0] != first[0] || sh[2..] != first[2..] {
                return Err(Error::Shape(format!(
                    "concat extents mismatch: {:?} vs {:?}",
                    sh, first
                )));
            }
            channels.push(sh[1]);
        }
        let n = first[0];
        let spatial: usize = first[2..].iter().product();
        let c_total: usize = channels.iter().sum();
        let mut shape = first.clone();
        shape[1] = c_total;
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            let mut coff = 0usize;
            for v in vars {
                let src = self.nodes[v.0].value.data();
                let c = self.nodes[v.0].value.shape()[1];
                for nn in 0..n {
                    let dst = (nn * c_total + coff) * spatial;
                    let sb = nn * c * spatial;
                    od[dst..dst + c * spatial].copy_from_slice(&src[sb..sb + c * spatial]);
                }
                coff += c;
            }
        }
        Ok(self.push_op(
            out,
            vars.to_vec(),
            Box::new(move |ctx| {
                let go = ctx.grad.data();
                let mut grads = Vec::with_capacity(channels.len());
                let mut coff = 0usize;
                for (idx, &c) in channels.iter().enumerate() {
                    let mut gi = Tensor::zeros(ctx.inputs[idx].shape());
                    {
                        let gd = gi.data_mut();
                        for nn in 0..n {
                            let src = (nn * c_total + coff) * spatial;
                            let db = nn * c * spatial;
                            gd[db..db + c * spatial]
                                .copy_from_slice(&go[src..src + c * spatial]);
                        }
                    }
                    grads.push(gi);
                    coff += c;
                }
                grads
            }),
        ))
    }
}

fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    let m = T::from_usize(xs.len()).unwrap();
    let mut sum = T::zero();
    for &v in xs {
        sum += v;
    }
    let mean = sum / m;
    let mut acc = T::zero();
    for &v in xs {
        let d = v - mean;
        acc += d * d;
    }
    (mean, acc / m)
}
