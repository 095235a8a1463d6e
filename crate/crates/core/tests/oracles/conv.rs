use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg::volgrid::*;

/// Direct nested-loop cross-correlation.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (bn, kin, dims) = (xs[0], xs[1], [xs[2], xs[3], xs[4]]);
    let (kout, k) = (ws[0], [ws[2], ws[3], ws[4]]);
    let od: Vec<usize> = (0..3).map(|a| (dims[a] + 2 * pad[a] - k[a]) / stride[a] + 1).collect();
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; bn * kout * od[0] * od[1] * od[2]];
    let mut idx = 0;
    for n in 0..bn {
        for o in 0..kout {
            for s in 0..od[0] {
                for h in 0..od[1] {
                    for ww in 0..od[2] {
                        let mut acc = b[o];
                        for c in 0..kin {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for cc in 0..k[2] {
                                        let zs = (s * stride[0] + a) as isize - pad[0] as isize;
                                        let zh = (h * stride[1] + bb) as isize - pad[1] as isize;
                                        let zw = (ww * stride[2] + cc) as isize - pad[2] as isize;
                                        if zs < 0 || zh < 0 || zw < 0 {
                                            continue;
                                        }
                                        let (zs, zh, zw) = (zs as usize, zh as usize, zw as usize);
                                        if zs >= dims[0] || zh >= dims[1] || zw >= dims[2] {
                                            continue;
                                        }
                                        let xi = (((n * kin + c) * dims[0] + zs) * dims[1] + zh) * dims[2] + zw;
                                        let wi = (((o * kin + c) * k[0] + a) * k[1] + bb) * k[2] + cc;
                                        acc += xd[xi] * wd[wi];
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    (vec![bn, kout, od[0], od[1], od[2]], out)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| x * y).sum()
}

/// Largest absolute deviation of `conv3d` from the nested loops over random instances.
pub fn conv_sweep(seed: u64, instances: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let kin = rng.random_range(1..4);
        let kout = rng.random_range(1..4);
        let k: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..4));
        let stride: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..3));
        let pad: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..k[a]));
        let dims: [usize; 3] = std::array::from_fn(|a| rng.random_range(k[a].max(2)..7));
        let bn = rng.random_range(1..3);
        let x = random(&mut rng, &[bn, kin, dims[0], dims[1], dims[2]]);
        let w = random(&mut rng, &[kout, kin, k[0], k[1], k[2]]);
        let b = random(&mut rng, &[kout]);
        let y = conv3d(&x, &w, Some(&b), stride, pad).map_err(|e| e.to_string())?;
        let (shape, expect) = naive_conv(&x, &w, &b.to_vec(), stride, pad);
        if y.shape() != &shape[..] {
            return Err(format!("shape {:?} vs {:?}", y.shape(), shape));
        }
        let err = y.to_vec().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Largest |<Ax, y> - <x, A^T y>| over random conv / transposed-conv pairs.
pub fn adjoint_sweep(seed: u64, instances: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let (kin, kout) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..k);
        let od = rng.random_range(2..5);
        let d = (od - 1) * stride + k - 2 * pad;
        if d == 0 {
            continue;
        }
        let x = random(&mut rng, &[1, kin, d, d, d]);
        let w = random(&mut rng, &[kout, kin, k, k, k]);
        let ax = conv3d(&x, &w, None, [stride; 3], [pad; 3]).map_err(|e| e.to_string())?;
        let y = random(&mut rng, ax.shape());
        let aty = conv_transpose3d(&y, &w, None, [stride; 3], [pad; 3]).map_err(|e| e.to_string())?;
        if aty.shape() != x.shape() {
            return Err(format!("adjoint shape {:?} vs {:?}", aty.shape(), x.shape()));
        }
        worst = worst.max((dot(&ax, &y) - dot(&x, &aty)).abs());
        done += 1;
    }
    Ok(worst)
}
