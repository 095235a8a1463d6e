use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg::blocks::{merge_skip, Block, BlockKind, MergeKind, MergeMode, ParamList};
use vseg::losses::{
    cross_entropy_loss, dice_loss, exp_log_dice_loss, focal_loss, hybrid_loss, masked_weighted_dice,
    masked_weighted_focal, one_hot, AnnotationMask, ClassWeights, LossConfig, LossFamily,
};
use vseg::net::{build, NetworkConfig};
use vseg::volgrid::gradcheck::{check, Coverage, GradCheckReport};
use vseg::volgrid::*;

pub const H: f64 = 1e-5;

pub fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = numel(shape);
    Tensor::parameter(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn rand_const(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear read-out so every output element matters.
fn project(y: &Tensor, r: &Tensor) -> vseg::Result<Tensor> {
    Ok(sum(&mul(y, r)?))
}

/// Tolerance for single ops, blocks and losses.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for the full network.
pub const END_TO_END_TOL: f64 = 1e-5;

/// Largest error seen and element counts over a group of checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct Summary {
    pub worst: f64,
    pub checked: usize,
    pub straddled: usize,
}

impl Summary {
    fn absorb(&mut self, rep: &GradCheckReport) {
        self.worst = self.worst.max(rep.max_rel_err);
        self.checked += rep.checked;
        self.straddled += rep.straddled;
    }

    pub fn merge(&mut self, other: Summary) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.straddled += other.straddled;
    }
}

/// Runs one check, failing past `tol` and folding the report into `worst`.
fn grad_ok(
    worst: &mut Summary,
    name: &str,
    params: &[Tensor],
    tol: f64,
    f: impl Fn() -> vseg::Result<Tensor>,
) -> Result<(), String> {
    let rep = check(params, H, tol, Coverage::All, f).map_err(|e| format!("{name}: {e}"))?;
    worst.absorb(&rep);
    if rep.max_rel_err < tol {
        Ok(())
    } else {
        Err(format!("{name}: {rep:?}"))
    }
}

pub fn conv_ops(seeds: u64) -> Result<Summary, String> {
    let mut worst = Summary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_param(&mut rng, &[1, 2, 4, 5, 3], 1.0);
        let w = rand_param(&mut rng, &[3, 2, 3, 3, 3], 0.5);
        let b = rand_param(&mut rng, &[3], 0.5);
        let y = conv3d(&x, &w, Some(&b), [2, 1, 1], [1, 1, 1]).map_err(|e| e.to_string())?;
        let r = rand_const(&mut rng, y.shape());
        grad_ok(&mut worst, "conv3d", &[x.clone(), w.clone(), b.clone()], PRIMITIVE_TOL, || {
            project(&conv3d(&x, &w, Some(&b), [2, 1, 1], [1, 1, 1])?, &r)
        })?;

        let wt = rand_param(&mut rng, &[2, 3, 2, 2, 2], 0.5);
        let y = conv_transpose3d(&x, &wt, Some(&b), [2, 2, 2], [0, 0, 0]).map_err(|e| e.to_string())?;
        let r = rand_const(&mut rng, y.shape());
        grad_ok(&mut worst, "conv_transpose3d", &[x.clone(), wt.clone(), b.clone()], PRIMITIVE_TOL, || {
            project(&conv_transpose3d(&x, &wt, Some(&b), [2, 2, 2], [0, 0, 0])?, &r)
        })?;
    }
    Ok(worst)
}

pub fn elementwise_and_pooling_ops(seeds: u64) -> Result<Summary, String> {
    let mut worst = Summary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_param(&mut rng, &[2, 3, 2, 4, 4], 1.0);
        let y = rand_param(&mut rng, &[2, 3, 2, 4, 4], 1.0);
        let r = rand_const(&mut rng, x.shape());
        grad_ok(&mut worst, "leaky_relu", &[x.clone()], PRIMITIVE_TOL, || project(&leaky_relu(&x, 0.01), &r))?;
        grad_ok(&mut worst, "sigmoid", &[x.clone()], PRIMITIVE_TOL, || project(&sigmoid(&x), &r))?;
        grad_ok(&mut worst, "softmax", &[x.clone()], PRIMITIVE_TOL, || project(&channel_softmax(&x)?, &r))?;
        grad_ok(&mut worst, "add", &[x.clone(), y.clone()], PRIMITIVE_TOL, || project(&add(&x, &y)?, &r))?;
        grad_ok(&mut worst, "mul", &[x.clone(), y.clone()], PRIMITIVE_TOL, || project(&mul(&x, &y)?, &r))?;
        grad_ok(&mut worst, "mul_scalar", &[x.clone()], PRIMITIVE_TOL, || project(&mul_scalar(&x, -1.7), &r))?;

        let rp = rand_const(&mut rng, &[2, 3, 1, 2, 2]);
        grad_ok(&mut worst, "max_pool3d", &[x.clone()], PRIMITIVE_TOL, || project(&max_pool3d(&x, 2)?, &rp))?;
        let rg = rand_const(&mut rng, &[2, 3]);
        grad_ok(&mut worst, "global_avg_pool3d", &[x.clone()], PRIMITIVE_TOL, || project(&global_avg_pool3d(&x)?, &rg))?;

        let s = rand_param(&mut rng, &[2, 3], 1.0);
        grad_ok(&mut worst, "scale_channels", &[x.clone(), s.clone()], PRIMITIVE_TOL, || {
            project(&scale_channels(&x, &s)?, &r)
        })?;
        let z = rand_param(&mut rng, &[2, 2, 2, 4, 4], 1.0);
        let rc = rand_const(&mut rng, &[2, 5, 2, 4, 4]);
        grad_ok(&mut worst, "concat_channels", &[x.clone(), z.clone()], PRIMITIVE_TOL, || {
            project(&concat_channels(&x, &z)?, &rc)
        })?;

        let v = rand_param(&mut rng, &[3, 4], 1.0);
        let w = rand_param(&mut rng, &[5, 4], 1.0);
        let b = rand_param(&mut rng, &[5], 1.0);
        let rd = rand_const(&mut rng, &[3, 5]);
        grad_ok(&mut worst, "dense", &[v.clone(), w.clone(), b.clone()], PRIMITIVE_TOL, || {
            project(&dense(&v, &w, Some(&b))?, &rd)
        })?;
        let rr = rand_const(&mut rng, &[6, 2, 4, 4]);
        grad_ok(&mut worst, "reshape", &[x.clone()], PRIMITIVE_TOL, || project(&x.reshape(&[6, 2, 4, 4])?, &rr))?;
    }
    Ok(worst)
}

fn block_params(b: &Block) -> Vec<Tensor> {
    let mut p = ParamList::new();
    b.collect_parameters("b", &mut p);
    p.into_iter().map(|(_, t)| t).collect()
}

pub fn blocks(seeds: u64) -> Result<Summary, String> {
    let mut worst = Summary::default();
    for seed in 0..seeds {
        for kind in [BlockKind::Plain, BlockKind::Residual, BlockKind::SeResidual] {
            for (cin, cout, stride) in [(3, 3, 1), (2, 4, 2)] {
                let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
                let block = Block::new(&mut rng, kind, cin, cout, stride, 2, 0.01);
                let x = rand_param(&mut rng, &[2, cin, 4, 4, 4], 1.0);
                let y = block.forward(&x).map_err(|e| e.to_string())?;
                let r = rand_const(&mut rng, y.shape());
                let mut params = block_params(&block);
                params.push(x.clone());
                grad_ok(&mut worst, &format!("{kind:?} {cin}->{cout}"), &params, PRIMITIVE_TOL, || {
                    project(&block.forward(&x)?, &r)
                })?;
            }
        }
        for kind in [MergeKind::Concat, MergeKind::Sum] {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mode = MergeMode::new(&mut rng, kind, 3, 2);
            let d = rand_param(&mut rng, &[2, 3, 2, 2, 2], 1.0);
            let e = rand_param(&mut rng, &[2, 2, 2, 2, 2], 1.0);
            let y = merge_skip(&d, &e, &mode).map_err(|e| e.to_string())?;
            let r = rand_const(&mut rng, y.shape());
            let mut p = ParamList::new();
            mode.collect_parameters("m", &mut p);
            let mut params: Vec<Tensor> = p.into_iter().map(|(_, t)| t).collect();
            params.extend([d.clone(), e.clone()]);
            grad_ok(&mut worst, &format!("merge {kind:?}"), &params, PRIMITIVE_TOL, || project(&merge_skip(&d, &e, &mode)?, &r))?;
        }
    }
    Ok(worst)
}

pub fn losses_through_softmax(seeds: u64) -> Result<Summary, String> {
    let mut worst = Summary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (c, n) = (3, 32);
        let logits = rand_param(&mut rng, &[1, c, n], 2.0);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..c as u8)).collect();
        let g = one_hot(&labels, c).map_err(|e| e.to_string())?;
        let probs = || channel_softmax(&logits).and_then(|p| p.reshape(&[c, n]));
        let mask = AnnotationMask::new(vec![false, true, false]).map_err(|e| e.to_string())?;
        let w = ClassWeights::new(vec![0.3, 0.5, 0.7]).map_err(|e| e.to_string())?;
        for family in LossFamily::ALL {
            let cfg = LossConfig::for_family(family);
            grad_ok(&mut worst, &format!("{family:?}"), &[logits.clone()], PRIMITIVE_TOL, || hybrid_loss(&probs()?, &g, &cfg))?;
        }
        let cfg = LossConfig::default();
        grad_ok(&mut worst, "dice", &[logits.clone()], PRIMITIVE_TOL, || dice_loss(&probs()?, &g, &cfg))?;
        grad_ok(&mut worst, "focal", &[logits.clone()], PRIMITIVE_TOL, || focal_loss(&probs()?, &g, &cfg))?;
        grad_ok(&mut worst, "ce", &[logits.clone()], PRIMITIVE_TOL, || cross_entropy_loss(&probs()?, &g, &cfg))?;
        grad_ok(&mut worst, "explog", &[logits.clone()], PRIMITIVE_TOL, || exp_log_dice_loss(&probs()?, &g, &cfg))?;
        grad_ok(&mut worst, "masked dice", &[logits.clone()], PRIMITIVE_TOL, || {
            masked_weighted_dice(&probs()?, &g, &mask, &w, &cfg)
        })?;
        grad_ok(&mut worst, "masked focal", &[logits.clone()], PRIMITIVE_TOL, || {
            masked_weighted_focal(&probs()?, &g, &mask, &w, &cfg)
        })?;
    }
    Ok(worst)
}

pub fn composite_graph(seeds: u64) -> Result<Summary, String> {
    let mut worst = Summary::default();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = rand_param(&mut rng, &[1, 2, 4, 4, 4], 1.0);
        let w = rand_param(&mut rng, &[3, 2, 3, 3, 3], 0.5);
        let wd = rand_param(&mut rng, &[3, 3], 1.0);
        let r = rand_const(&mut rng, &[1, 5, 4, 4, 4]);
        grad_ok(&mut worst, "composite", &[x.clone(), w.clone(), wd.clone()], PRIMITIVE_TOL, || {
            let h = leaky_relu(&conv3d(&x, &w, None, [1; 3], [1; 3])?, 0.01);
            let s = sigmoid(&dense(&global_avg_pool3d(&h)?, &wd, None)?);
            let y = add(&scale_channels(&h, &s)?, &mul(&h, &h)?)?;
            project(&channel_softmax(&concat_channels(&y, &x)?)?, &r)
        })?;
    }
    Ok(worst)
}

pub fn mini_network_end_to_end(seeds: u64) -> Result<Summary, String> {
    let mut worst = Summary::default();
    for seed in 0..seeds {
        let cfg = NetworkConfig::anatomynet_mini();
        let net = build(&cfg, seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = rand_const(&mut rng, &[1, 1, 8, 8, 8]);
        let labels: Vec<u8> = (0..512).map(|_| rng.random_range(0..10)).collect();
        let g = one_hot(&labels, 10).map_err(|e| e.to_string())?;
        let loss = LossConfig::default();
        let objective = || hybrid_loss(&net.forward(&x)?.reshape(&[10, 512])?, &g, &loss);
        let params = net.parameters();
        let first = check(&params[..1], H, END_TO_END_TOL, Coverage::All, objective).map_err(|e| e.to_string())?;
        let all = check(&params, H, END_TO_END_TOL, Coverage::Strided { step: 17, limit: 2 }, objective).map_err(|e| e.to_string())?;
        worst.absorb(&first);
        worst.absorb(&all);
        if first.max_rel_err >= END_TO_END_TOL {
            return Err(format!("first layer, seed {seed}: {first:?}"));
        }
        if all.max_rel_err >= END_TO_END_TOL || all.checked <= 50 {
            return Err(format!("network, seed {seed}: {all:?}"));
        }
    }
    Ok(worst)
}
