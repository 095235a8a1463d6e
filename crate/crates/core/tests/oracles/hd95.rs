use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg::metrics::{hd95, LabelVolume};

pub fn blobs(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> Vec<u8> {
    (0..dims.iter().product::<usize>())
        .map(|_| u8::from(rng.random_bool(density)))
        .collect()
}

/// Quadratic all-pairs oracle over independently extracted surfaces.
pub fn brute_hd95(a: &[bool], b: &[bool], dims: [usize; 3], sp: [f64; 3]) -> Option<f64> {
    let surface = |m: &[bool]| -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for s in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    if !m[(s * dims[1] + h) * dims[2] + w] {
                        continue;
                    }
                    let p = [s as isize, h as isize, w as isize];
                    let edge = (0..3).any(|ax| {
                        [-1isize, 1].iter().any(|&d| {
                            let mut q = p;
                            q[ax] += d;
                            if q[ax] < 0 || q[ax] >= dims[ax] as isize {
                                return true;
                            }
                            !m[((q[0] as usize) * dims[1] + q[1] as usize) * dims[2] + q[2] as usize]
                        })
                    });
                    if edge {
                        out.push([s, h, w]);
                    }
                }
            }
        }
        out
    };
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| {
                to.iter()
                    .map(|q| {
                        (0..3)
                            .map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let r = 0.95 * (d.len() - 1) as f64;
        let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
        d[lo] + (d[hi] - d[lo]) * (r - lo as f64)
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

/// Largest deviation of `hd95` from the brute-force oracle over random mask pairs up to 16^3.
pub fn hd95_sweep(seed: u64, instances: usize) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..17));
        let sp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..3.0));
        let density = rng.random_range(0.02..0.6);
        let a = blobs(&mut rng, dims, density);
        let b = blobs(&mut rng, dims, density);
        let va = LabelVolume::new(dims, a.clone(), sp, 2).map_err(|e| e.to_string())?;
        let vb = LabelVolume::new(dims, b.clone(), sp, 2).map_err(|e| e.to_string())?;
        let ma: Vec<bool> = a.iter().map(|&x| x == 1).collect();
        let mb: Vec<bool> = b.iter().map(|&x| x == 1).collect();
        let got = hd95(&va, &vb, 1).map_err(|e| e.to_string())?;
        match (got, brute_hd95(&ma, &mb, dims, sp)) {
            (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
            (None, None) => {}
            other => return Err(format!("presence mismatch {other:?}")),
        }
    }
    Ok(worst)
}
