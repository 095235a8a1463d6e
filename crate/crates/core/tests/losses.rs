use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg::losses::*;
use vseg::metrics::{dsc_binary, LabelVolume};
use vseg::phantom::ANNOTATION_COUNTS;
use vseg::volgrid::{channel_softmax, Tensor};

fn random_probs(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Tensor {
    let logits: Vec<f64> = (0..c * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Tensor::new(&[1, c, n], logits).unwrap();
    Tensor::parameter(&[c, n], channel_softmax(&x).unwrap().to_vec()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..c as u8)).collect()
}

fn loss_grad(loss: Tensor, p: &Tensor) -> Vec<f64> {
    p.zero_grad();
    loss.backward().unwrap();
    p.grad().unwrap()
}

#[test]
fn soft_confusion_cases() {
    let g = one_hot(&[0, 0], 2).unwrap();
    let p = Tensor::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
    let s = soft_confusion(&p, &g).unwrap();
    assert_eq!((s.tp[0], s.fn_[0], s.fp[0]), (1.0, 1.0, 0.0));

    let labels = [0u8, 2, 1, 2, 2];
    let g = one_hot(&labels, 3).unwrap();
    let s = soft_confusion(&g, &g).unwrap();
    assert_eq!(s.tp, vec![1.0, 1.0, 3.0]);
    assert_eq!(s.fn_, vec![0.0; 3]);
    assert_eq!(s.fp, vec![0.0; 3]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_probs(&mut rng, 3, 20);
    let labels = random_labels(&mut rng, 3, 20);
    let s = soft_confusion(&p, &one_hot(&labels, 3).unwrap()).unwrap();
    for c in 0..3 {
        let count = labels.iter().filter(|&&l| l == c as u8).count() as f64;
        assert!((s.tp[c] + s.fn_[c] - count).abs() < 1e-12);
    }
}

#[test]
fn dice_single_voxel_arithmetic() {
    let cfg = LossConfig::for_family(LossFamily::Dice);
    let p = Tensor::new(&[2, 1], vec![0.5, 0.5]).unwrap();
    let g = one_hot(&[0], 2).unwrap();
    let l = dice_loss(&p, &g, &cfg).unwrap().item();
    let eps = cfg.epsilon;
    let expect = 2.0 - (0.5 + eps) / (0.75 + eps) - eps / (0.25 + eps);
    assert!((l - expect).abs() < 1e-12);
    assert!((l - 4.0 / 3.0).abs() < 1e-4);
}

#[test]
fn tversky_half_half_is_soft_dice_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let p = random_probs(&mut rng, 4, 30);
        let g = one_hot(&random_labels(&mut rng, 4, 30), 4).unwrap();
        let s = soft_confusion(&p, &g).unwrap();
        for c in 0..4 {
            let t = tversky_term(s.tp[c], s.fn_[c], s.fp[c], 0.5, 0.5, 0.0);
            assert_eq!(t, 2.0 * s.tp[c] / (2.0 * s.tp[c] + s.fn_[c] + s.fp[c]));
        }
    }
}

#[test]
fn perfect_prediction_losses_vanish() {
    let labels: Vec<u8> = (0..64).map(|i| (i % 5) as u8).collect();
    let g = one_hot(&labels, 5).unwrap();
    let cfg = LossConfig::default();
    for l in [
        dice_loss(&g, &g, &cfg).unwrap().item(),
        focal_loss(&g, &g, &cfg).unwrap().item(),
        cross_entropy_loss(&g, &g, &cfg).unwrap().item(),
        exp_log_dice_loss(&g, &g, &cfg).unwrap().item(),
    ] {
        assert!((0.0..1e-3).contains(&l), "{l}");
    }
}

#[test]
fn focal_and_ce_values() {
    let cfg = LossConfig::default();
    let p = Tensor::new(&[2, 1], vec![0.5, 0.5]).unwrap();
    let g = one_hot(&[0], 2).unwrap();
    assert!((focal_loss(&p, &g, &cfg).unwrap().item() - 0.25 * 2f64.ln()).abs() < 1e-12);

    let p = Tensor::full(&[10, 7], 0.1);
    let g = one_hot(&[0, 1, 2, 3, 4, 5, 9], 10).unwrap();
    assert!((cross_entropy_loss(&p, &g, &cfg).unwrap().item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn ce_is_focal_without_modulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = random_probs(&mut rng, 3, 25);
        let g = one_hot(&random_labels(&mut rng, 3, 25), 3).unwrap();
        let cfg = LossConfig {
            focal_exponent: 0.0,
            ..LossConfig::default()
        };
        let a = focal_loss(&p, &g, &cfg).unwrap().item();
        let b = cross_entropy_loss(&p, &g, &LossConfig::default()).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn exp_log_values_and_closed_form_gradient() {
    assert!((exp_log_class_term(0.5, 0.3, 1e-7) - 0.8959).abs() < 1e-4);
    for d in [0.5, 0.9, 0.99] {
        let h = 1e-6;
        let fd = (exp_log_class_term(d + h, 0.3, 1e-7) - exp_log_class_term(d - h, 0.3, 1e-7)) / (2.0 * h);
        let closed = -0.3 / (d * (-f64::ln(d)).powf(0.7));
        assert!(((fd - closed) / closed).abs() < 1e-4, "D = {d}: {fd} vs {closed}");
        assert!(((exp_log_class_grad(d, 0.3, 1e-7) - closed) / closed).abs() < 1e-12);
    }
}

#[test]
fn hybrid_is_linear_combination() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_probs(&mut rng, 3, 40);
    let g = one_hot(&random_labels(&mut rng, 3, 40), 3).unwrap();
    let mut cfg = LossConfig::for_family(LossFamily::DiceFocal);
    let dice = dice_loss(&p, &g, &cfg).unwrap().item();
    let focal = focal_loss(&p, &g, &cfg).unwrap().item();
    assert!((hybrid_loss(&p, &g, &cfg).unwrap().item() - (dice + 0.5 * focal)).abs() < 1e-12);
    cfg.lambda = 0.0;
    assert_eq!(hybrid_loss(&p, &g, &cfg).unwrap().item(), dice);

    let cfg = LossConfig::for_family(LossFamily::DiceCrossEntropy);
    assert_eq!(cfg.lambda, 0.1);
    let ce = cross_entropy_loss(&p, &g, &cfg).unwrap().item();
    assert!((hybrid_loss(&p, &g, &cfg).unwrap().item() - (dice + 0.1 * ce)).abs() < 1e-12);
}

#[test]
fn masked_variants_reduce_to_plain_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_probs(&mut rng, 4, 30);
    let g = one_hot(&random_labels(&mut rng, 4, 30), 4).unwrap();
    let (m, w) = (AnnotationMask::full(4), ClassWeights::uniform(4));
    let cfg = LossConfig::default();
    let pairs = [
        (dice_loss(&p, &g, &cfg), masked_weighted_dice(&p, &g, &m, &w, &cfg)),
        (focal_loss(&p, &g, &cfg), masked_weighted_focal(&p, &g, &m, &w, &cfg)),
        (cross_entropy_loss(&p, &g, &cfg), masked_weighted_cross_entropy(&p, &g, &m, &w, &cfg)),
        (exp_log_dice_loss(&p, &g, &cfg), masked_weighted_exp_log(&p, &g, &m, &w, &cfg)),
    ];
    for (a, b) in pairs {
        assert!((a.unwrap().item() - b.unwrap().item()).abs() < 1e-12);
    }
}

#[test]
fn doubling_weights_doubles_dice_deficit() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_probs(&mut rng, 4, 30);
    let g = one_hot(&random_labels(&mut rng, 4, 30), 4).unwrap();
    let m = AnnotationMask::new(vec![false, true, false, true]).unwrap();
    let w = ClassWeights::new(vec![0.2, 0.7, 1.3, 0.4]).unwrap();
    let cfg = LossConfig::default();
    let a = masked_weighted_dice(&p, &g, &m, &w, &cfg).unwrap().item() - 4.0;
    let b = masked_weighted_dice(&p, &g, &m, &w.scaled(2.0).unwrap(), &cfg).unwrap().item() - 4.0;
    assert!((b - 2.0 * a).abs() < 1e-12);
}

#[test]
fn masked_class_gets_exactly_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, n) = (5, 40);
    let w = ClassWeights::new((1..=c).map(|k| k as f64 / 3.0).collect()).unwrap();
    for masked in 1..c {
        let mut flags = vec![true; c];
        flags[0] = false;
        flags[masked] = false;
        let m = AnnotationMask::new(flags).unwrap();
        let p = random_probs(&mut rng, c, n);
        let g = one_hot(&random_labels(&mut rng, c, n), c).unwrap();
        for family in LossFamily::ALL {
            let cfg = LossConfig::for_family(family);
            let grads = [
                loss_grad(masked_objective(&p, &g, &m, &w, &cfg).unwrap(), &p),
                loss_grad(masked_weighted_dice(&p, &g, &m, &w, &cfg).unwrap(), &p),
                loss_grad(masked_weighted_focal(&p, &g, &m, &w, &cfg).unwrap(), &p),
            ];
            for grad in grads {
                assert!(grad[masked * n..(masked + 1) * n].iter().all(|&v| v == 0.0));
                assert!(grad[0..n].iter().all(|&v| v == 0.0));
                assert!(grad.iter().any(|&v| v != 0.0));
            }
        }
    }
}

#[test]
fn table_one_weights() {
    let w = class_weights_from_counts(&[196, 129]).unwrap();
    assert_eq!(w.values(), &[1.0 / 196.0, 1.0 / 129.0]);
    assert!((w.get(0) / w.get(1) - 129.0 / 196.0).abs() < 1e-15);
    let counts: Vec<u64> = ANNOTATION_COUNTS.iter().map(|&c| c as u64).collect();
    let w = class_weights_from_counts(&counts).unwrap();
    // brain stem is anatomy 1, chiasm anatomy 2
    assert!((w.get(0) / w.get(1) - 129.0 / 196.0).abs() < 1e-15);
    let w = class_weights_from_counts(&[4, 8, 4]).unwrap();
    assert_eq!(w.get(0), 2.0 * w.get(1));
    assert_eq!(w.get(0), w.get(2));
    assert!(class_weights_from_counts(&[3, 0]).is_err());
}

#[test]
fn soft_dice_on_one_hot_equals_hard_dsc() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let dims = [3, 4, 5];
        let pred = random_labels(&mut rng, 4, 60);
        let truth = random_labels(&mut rng, 4, 60);
        let pv = LabelVolume::new(dims, pred.clone(), [1.0; 3], 4).unwrap();
        let tv = LabelVolume::new(dims, truth.clone(), [1.0; 3], 4).unwrap();
        let s = soft_confusion(&one_hot(&pred, 4).unwrap(), &one_hot(&truth, 4).unwrap()).unwrap();
        for c in 0..4 {
            let soft = tversky_term(s.tp[c], s.fn_[c], s.fp[c], 0.5, 0.5, 0.0);
            let soft = if soft.is_nan() { 1.0 } else { soft };
            assert_eq!(soft, dsc_binary(&pv, &tv, c).unwrap());
        }
    }
}

fn raise_true_class(p: &[f64], g: &[u8], c: usize, n: usize, voxel: usize, delta: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    let t = g[voxel] as usize;
    let room = 1.0 - q[t * n + voxel];
    let step = delta * room;
    for k in 0..c {
        let i = k * n + voxel;
        if k == t {
            q[i] += step;
        } else {
            q[i] -= step * q[i] / room;
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_non_negative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_probs(&mut rng, 4, 16);
        let g = one_hot(&random_labels(&mut rng, 4, 16), 4).unwrap();
        let cfg = LossConfig::default();
        for l in [
            dice_loss(&p, &g, &cfg).unwrap().item(),
            focal_loss(&p, &g, &cfg).unwrap().item(),
            cross_entropy_loss(&p, &g, &cfg).unwrap().item(),
            exp_log_dice_loss(&p, &g, &cfg).unwrap().item(),
        ] {
            prop_assert!(l >= 0.0);
        }
        let focal = focal_loss(&p, &g, &cfg).unwrap().item();
        let ce = cross_entropy_loss(&p, &g, &cfg).unwrap().item();
        prop_assert!(focal <= ce);
    }

    #[test]
    fn raising_true_probability_never_hurts(seed in 0u64..10_000, voxel in 0usize..16, delta in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, n) = (4, 16);
        let p = random_probs(&mut rng, c, n).to_vec();
        let labels = random_labels(&mut rng, c, n);
        let g = one_hot(&labels, c).unwrap();
        let q = raise_true_class(&p, &labels, c, n, voxel, delta);
        let (pt, qt) = (Tensor::new(&[c, n], p).unwrap(), Tensor::new(&[c, n], q).unwrap());
        let cfg = LossConfig::default();
        prop_assert!(focal_loss(&qt, &g, &cfg).unwrap().item() <= focal_loss(&pt, &g, &cfg).unwrap().item() + 1e-12);
        prop_assert!(
            cross_entropy_loss(&qt, &g, &cfg).unwrap().item() <= cross_entropy_loss(&pt, &g, &cfg).unwrap().item() + 1e-12
        );
        prop_assert!(dice_loss(&qt, &g, &cfg).unwrap().item() <= dice_loss(&pt, &g, &cfg).unwrap().item() + 1e-12);
    }
}
