use super::tensor::Tensor;
use crate::error::{Error, Result};

fn map_unary(
    name: &'static str,
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    backward: super::tensor::BackwardFn,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(name, x.shape().to_vec(), data, vec![x.clone()], backward)
}

/// Elementwise `x` for `x >= 0`, `slope·x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    map_unary(
        "leaky_relu",
        x,
        move |v| if v >= 0.0 { v } else { slope * v },
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx
                .upstream
                .iter()
                .zip(x.iter())
                .map(|(&u, &v)| if v >= 0.0 { u } else { slope * u })
                .collect();
            vec![Some(g)]
        }),
    )
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map_unary(
        "sigmoid",
        x,
        sigmoid_scalar,
        Box::new(|ctx| {
            let g = ctx
                .upstream
                .iter()
                .zip(ctx.output)
                .map(|(&u, &s)| u * s * (1.0 - s))
                .collect();
            vec![Some(g)]
        }),
    )
}

/// Splits a rank ≥ 2 shape into (batch, channels, spatial size).
fn channel_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, "rank", format!("need batch and channel axes, got {s:?}")));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Softmax across the channel axis at every voxel.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let (batch, k, sp) = channel_layout("channel_softmax", x)?;
    if k < 2 {
        return Err(Error::shape("channel_softmax", "channels", "need at least 2 channels"));
    }
    let out = {
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut buf = vec![0.0; k];
        for b in 0..batch {
            let base = b * k * sp;
            for p in 0..sp {
                let mut max = f64::NEG_INFINITY;
                for c in 0..k {
                    buf[c] = xd[base + c * sp + p];
                    max = max.max(buf[c]);
                }
                let mut total = 0.0;
                for v in buf.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for c in 0..k {
                    out[base + c * sp + p] = buf[c] / total;
                }
            }
        }
        out
    };
    Ok(Tensor::from_op(
        "channel_softmax",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let (y, dy) = (ctx.output, ctx.upstream);
            let mut dx = vec![0.0; y.len()];
            for b in 0..batch {
                let base = b * k * sp;
                for p in 0..sp {
                    let dot: f64 = (0..k).map(|c| y[base + c * sp + p] * dy[base + c * sp + p]).sum();
                    for c in 0..k {
                        let i = base + c * sp + p;
                        dx[i] = y[i] * (dy[i] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Mean over every spatial position: `[B, K, ...] -> [B, K]`.
pub fn global_avg_pool3d(x: &Tensor) -> Result<Tensor> {
    let (batch, k, sp) = channel_layout("global_avg_pool3d", x)?;
    let out: Vec<f64> = {
        let xd = x.data();
        xd.chunks(sp).map(|c| c.iter().sum::<f64>() / sp as f64).collect()
    };
    Ok(Tensor::from_op(
        "global_avg_pool3d",
        vec![batch, k],
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let inv = 1.0 / sp as f64;
            let dx = ctx
                .upstream
                .iter()
                .flat_map(|&u| std::iter::repeat_n(u * inv, sp))
                .collect();
            vec![Some(dx)]
        }),
    ))
}

/// Affine map `x·Wᵀ + b` for `x: [B, Din]`, `W: [Dout, Din]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 2 || weight.rank() != 2 {
        return Err(Error::shape("dense", "rank", "input and weight must be rank 2"));
    }
    let (batch, din) = (x.shape()[0], x.shape()[1]);
    let dout = weight.shape()[0];
    if weight.shape()[1] != din {
        return Err(Error::shape(
            "dense",
            "features",
            format!("input has {din} features, weight expects {}", weight.shape()[1]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape("dense", "bias", format!("expected [{dout}], got {:?}", b.shape())));
        }
    }
    let out = {
        let (xd, wd) = (x.data(), weight.data());
        let bd = bias.map(|b| b.to_vec());
        let mut out = vec![0.0; batch * dout];
        for n in 0..batch {
            for o in 0..dout {
                let mut acc = bd.as_ref().map_or(0.0, |b| b[o]);
                for i in 0..din {
                    acc += wd[o * din + i] * xd[n * din + i];
                }
                out[n * dout + o] = acc;
            }
        }
        out
    };
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Tensor::from_op(
        "dense",
        vec![batch, dout],
        out,
        inputs,
        Box::new(move |ctx| {
            let dy = ctx.upstream;
            let dx = ctx.needs[0].then(|| {
                let wd = ctx.inputs[1].data();
                let mut dx = vec![0.0; batch * din];
                for n in 0..batch {
                    for o in 0..dout {
                        let u = dy[n * dout + o];
                        for i in 0..din {
                            dx[n * din + i] += u * wd[o * din + i];
                        }
                    }
                }
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let xd = ctx.inputs[0].data();
                let mut dw = vec![0.0; dout * din];
                for n in 0..batch {
                    for o in 0..dout {
                        let u = dy[n * dout + o];
                        for i in 0..din {
                            dw[o * din + i] += u * xd[n * din + i];
                        }
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut db = vec![0.0; dout];
                    for n in 0..batch {
                        for o in 0..dout {
                            db[o] += dy[n * dout + o];
                        }
                    }
                    db
                }));
            }
            grads
        }),
    ))
}

/// Concatenates along the channel axis; `a`'s channels come first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa.len() < 2 {
        return Err(Error::shape("concat_channels", "rank", format!("{sa:?} vs {sb:?}")));
    }
    if sa[0] != sb[0] {
        return Err(Error::shape("concat_channels", "batch", format!("{} vs {}", sa[0], sb[0])));
    }
    if sa[2..] != sb[2..] {
        return Err(Error::shape(
            "concat_channels",
            "spatial",
            format!("{:?} vs {:?}", &sa[2..], &sb[2..]),
        ));
    }
    let batch = sa[0];
    let (ka, kb) = (sa[1], sb[1]);
    let sp: usize = sa[2..].iter().product();
    let out = {
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for n in 0..batch {
            out.extend_from_slice(&ad[n * ka * sp..(n + 1) * ka * sp]);
            out.extend_from_slice(&bd[n * kb * sp..(n + 1) * kb * sp]);
        }
        out
    };
    let mut shape = sa.to_vec();
    shape[1] = ka + kb;
    Ok(Tensor::from_op(
        "concat_channels",
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let dy = ctx.upstream;
            let k = ka + kb;
            let da = ctx.needs[0].then(|| {
                (0..batch)
                    .flat_map(|n| dy[n * k * sp..(n * k + ka) * sp].iter().copied())
                    .collect()
            });
            let db = ctx.needs[1].then(|| {
                (0..batch)
                    .flat_map(|n| dy[(n * k + ka) * sp..(n + 1) * k * sp].iter().copied())
                    .collect()
            });
            vec![da, db]
        }),
    ))
}

/// Elementwise sum of equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", "shape", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let g = ctx.upstream.to_vec();
            vec![ctx.needs[0].then(|| g.clone()), ctx.needs[1].then_some(g)]
        }),
    ))
}

/// Elementwise product of equally shaped tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", "shape", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        "mul",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let dy = ctx.upstream;
            let da = ctx.needs[0].then(|| {
                let b = ctx.inputs[1].data();
                dy.iter().zip(b.iter()).map(|(u, v)| u * v).collect()
            });
            let db = ctx.needs[1].then(|| {
                let a = ctx.inputs[0].data();
                dy.iter().zip(a.iter()).map(|(u, v)| u * v).collect()
            });
            vec![da, db]
        }),
    ))
}

pub fn mul_scalar(x: &Tensor, k: f64) -> Tensor {
    map_unary(
        "mul_scalar",
        x,
        move |v| v * k,
        Box::new(move |ctx| vec![Some(ctx.upstream.iter().map(|u| u * k).collect())]),
    )
}

/// Sum of every element, as a `[1]` scalar.
pub fn sum(x: &Tensor) -> Tensor {
    let total = x.data().iter().sum();
    let n = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |ctx| vec![Some(vec![ctx.upstream[0]; n])]),
    )
}

/// Per-channel broadcast multiply: `x[b, k, ...] * s[b, k]`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (batch, k, sp) = channel_layout("scale_channels", x)?;
    if s.shape() != [batch, k] {
        return Err(Error::shape(
            "scale_channels",
            "channels",
            format!("scale {:?} does not match [{batch}, {k}]", s.shape()),
        ));
    }
    let out = {
        let (xd, sd) = (x.data(), s.data());
        let mut out = xd.clone();
        for (i, chunk) in out.chunks_mut(sp).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sd[i]);
        }
        out
    };
    Ok(Tensor::from_op(
        "scale_channels",
        x.shape().to_vec(),
        out,
        vec![x.clone(), s.clone()],
        Box::new(move |ctx| {
            let dy = ctx.upstream;
            let dx = ctx.needs[0].then(|| {
                let sd = ctx.inputs[1].data();
                let mut dx = dy.to_vec();
                for (i, chunk) in dx.chunks_mut(sp).enumerate() {
                    chunk.iter_mut().for_each(|v| *v *= sd[i]);
                }
                dx
            });
            let ds = ctx.needs[1].then(|| {
                let xd = ctx.inputs[0].data();
                dy.chunks(sp)
                    .zip(xd.chunks(sp))
                    .map(|(u, v)| u.iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect()
            });
            vec![dx, ds]
        }),
    ))
}

/// Max pooling with window = stride = `k`; ties go to the first element
/// in scan order.
pub fn max_pool3d(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 5 {
        return Err(Error::shape("max_pool3d", "rank", format!("expected rank 5, got {:?}", x.shape())));
    }
    if k == 0 {
        return Err(Error::shape("max_pool3d", "kernel", "window must be positive"));
    }
    let s = x.shape();
    let (bk, dims) = (s[0] * s[1], [s[2], s[3], s[4]]);
    for (a, name) in ["slices", "height", "width"].iter().enumerate() {
        if dims[a] < k {
            return Err(Error::shape("max_pool3d", *name, format!("size {} < window {k}", dims[a])));
        }
    }
    let od = [dims[0] / k, dims[1] / k, dims[2] / k];
    let (in_sp, out_sp) = (dims.iter().product::<usize>(), od.iter().product::<usize>());
    let mut argmax = vec![0usize; bk * out_sp];
    let out = {
        let xd = x.data();
        let mut out = vec![0.0; bk * out_sp];
        for c in 0..bk {
            for os in 0..od[0] {
                for oh in 0..od[1] {
                    for ow in 0..od[2] {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for a in 0..k {
                            for b in 0..k {
                                for d in 0..k {
                                    let i = c * in_sp
                                        + ((os * k + a) * dims[1] + oh * k + b) * dims[2]
                                        + ow * k
                                        + d;
                                    if xd[i] > best {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = c * out_sp + (os * od[1] + oh) * od[2] + ow;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        out
    };
    let n = x.numel();
    Ok(Tensor::from_op(
        "max_pool3d",
        vec![s[0], s[1], od[0], od[1], od[2]],
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let mut dx = vec![0.0; n];
            for (o, &i) in argmax.iter().enumerate() {
                dx[i] += ctx.upstream[o];
            }
            vec![Some(dx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[2], vec![2.0, -3.0]).unwrap();
        let y = leaky_relu(&x, 0.01).to_vec();
        assert_eq!(y[0], 2.0);
        assert!((y[1] + 0.03).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let x = Tensor::new(&[3], vec![0.0, 40.0, -800.0]).unwrap();
        let y = sigmoid(&x).to_vec();
        assert_eq!(y[0], 0.5);
        assert!((y[1] - 1.0).abs() < 1e-12);
        assert!(y[2].is_finite() && y[2] >= 0.0);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let x = Tensor::full(&[1, 10, 1, 1, 2], 3.7);
        for p in channel_softmax(&x).unwrap().to_vec() {
            assert!((p - 0.1).abs() < 1e-15);
        }
        let x = Tensor::full(&[1, 3, 1, 1, 1], 1000.0);
        for p in channel_softmax(&x).unwrap().to_vec() {
            assert!(p.is_finite());
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(channel_softmax(&Tensor::zeros(&[1, 1, 2])).is_err());
    }

    #[test]
    fn avg_pool_counts() {
        let x = Tensor::full(&[1, 1, 2, 2, 2], 4.5);
        assert_eq!(global_avg_pool3d(&x).unwrap().to_vec(), vec![4.5]);
        let mut d = vec![0.0; 8];
        d[5] = 1.0;
        let x = Tensor::new(&[1, 1, 2, 2, 2], d).unwrap();
        assert_eq!(global_avg_pool3d(&x).unwrap().to_vec(), vec![0.125]);
    }

    #[test]
    fn dense_hand_arithmetic() {
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(&[1], vec![0.5]).unwrap();
        assert_eq!(dense(&x, &w, Some(&b)).unwrap().to_vec(), vec![3.5]);
        let w = Tensor::new(&[1, 3], vec![1.0; 3]).unwrap();
        assert!(dense(&x, &w, None).is_err());
    }

    #[test]
    fn dense_identity() {
        let x = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0]).unwrap();
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn concat_puts_a_first() {
        let a = Tensor::full(&[2, 2, 1, 1, 2], 1.0);
        let b = Tensor::full(&[2, 3, 1, 1, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 1, 1, 2]);
        let d = c.to_vec();
        assert_eq!(&d[..4], &[1.0; 4]);
        assert_eq!(&d[4..10], &[2.0; 6]);
        assert_eq!(&d[10..14], &[1.0; 4]);
        assert!(concat_channels(&a, &Tensor::zeros(&[2, 3, 1, 2, 2])).is_err());
    }

    #[test]
    fn scale_channels_identity_and_zero() {
        let x = Tensor::parameter(&[1, 2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let ones = Tensor::full(&[1, 2], 1.0);
        assert_eq!(scale_channels(&x, &ones).unwrap().to_vec(), x.to_vec());
        let s = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let y = scale_channels(&x, &s).unwrap();
        assert!(y.to_vec()[..4].iter().all(|&v| v == 0.0));
        sum(&y).backward().unwrap();
        let g = x.grad().unwrap();
        assert!(g[..4].iter().all(|&v| v == 0.0));
        assert!(g[4..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::new(&[1, 1, 2, 2, 2], vec![0.0, 5.0, 1.0, 2.0, 3.0, 4.0, -1.0, 0.5]).unwrap();
        assert_eq!(max_pool3d(&x, 2).unwrap().to_vec(), vec![5.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let x = Tensor::parameter(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
        x.zero_grad();
        let half = mul_scalar(&sum(&mul(&x, &x).unwrap()), 0.5);
        half.backward().unwrap();
        assert_eq!(x.grad().unwrap(), x.to_vec());
        // Accumulates without a reset.
        half.backward().unwrap();
        let twice: Vec<f64> = x.to_vec().iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap(), twice);
    }
}
