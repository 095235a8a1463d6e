use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vseg::blocks::{BlockKind, MergeKind};
use vseg::io::*;
use vseg::losses::AnnotationMask;
use vseg::metrics::LabelVolume;
use vseg::net::*;
use vseg::volgrid::{no_grad, sum, Tensor};

fn volume(dims: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims * dims * dims;
    Tensor::new(&[1, 1, dims, dims, dims], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn table_two_encoder_sizes_at_64() {
    let expected: [(PoolScheme, [usize; 4]); 4] = [
        (PoolScheme::Pool1, [32, 32, 32, 32]),
        (PoolScheme::Pool2, [32, 16, 16, 16]),
        (PoolScheme::Pool3, [32, 16, 8, 8]),
        (PoolScheme::Pool4, [32, 16, 8, 4]),
    ];
    for (scheme, sides) in expected {
        let cfg = NetworkConfig {
            pool_scheme: scheme,
            ..NetworkConfig::anatomynet()
        };
        let shapes = feature_map_shapes(&cfg, [64; 3]).unwrap();
        for (i, side) in sides.iter().enumerate() {
            let s = &shapes[i];
            assert_eq!(s.name, format!("encoder{i}"));
            assert_eq!(s.dims, [*side; 3], "{} encoder {i}", scheme.label());
            assert_eq!(s.channels, cfg.encoder_channels[i]);
        }
        assert_eq!(shapes.last().unwrap().dims, [64; 3]);
        assert_eq!(shapes.last().unwrap().channels, 10);
    }
}

#[test]
fn reported_shapes_match_forward() {
    let cfg = NetworkConfig {
        pool_scheme: PoolScheme::Pool3,
        ..NetworkConfig::anatomynet_mini()
    };
    let net = build(&cfg, 0).unwrap();
    let out = no_grad(|| net.forward(&volume(16, 1))).unwrap();
    let last = feature_map_shapes(&cfg, [16; 3]).unwrap().pop().unwrap();
    assert_eq!(out.shape(), &[1, last.channels, 16, 16, 16]);
    assert!(build(&cfg, 0).unwrap().forward(&volume(12, 1)).is_err());
}

#[test]
fn build_and_forward_are_deterministic() {
    let cfg = NetworkConfig::anatomynet_mini();
    let (a, b) = (build(&cfg, 42).unwrap(), build(&cfg, 42).unwrap());
    assert_eq!(a.flat_parameters(), b.flat_parameters());
    assert_ne!(a.flat_parameters(), build(&cfg, 43).unwrap().flat_parameters());
    let x = volume(16, 2);
    let (ya, yb) = (no_grad(|| a.forward(&x)).unwrap(), no_grad(|| a.forward(&x)).unwrap());
    assert_eq!(ya.to_vec(), yb.to_vec());
}

#[test]
fn mini_output_is_a_distribution() {
    let net = build(&NetworkConfig::anatomynet_mini(), 3).unwrap();
    let out = no_grad(|| net.forward(&volume(32, 3))).unwrap();
    assert_eq!(out.shape(), &[1, 10, 32, 32, 32]);
    let p = out.to_vec();
    let n = 32 * 32 * 32;
    for v in 0..n {
        let s: f64 = (0..10).map(|c| p[c * n + v]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_biases_and_bounded_weights_at_init() {
    let net = build(&NetworkConfig::anatomynet_mini(), 4).unwrap();
    for (name, t) in net.named_parameters() {
        let v = t.to_vec();
        if name.ends_with("bias") {
            assert!(v.iter().all(|&x| x == 0.0), "{name}");
        } else {
            let s = t.shape();
            let fan_in = if name.contains(".up.") {
                s[0]
            } else {
                s[1..].iter().product()
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(v.iter().all(|x| x.abs() <= bound), "{name}");
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k * k + cout
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

fn se_block(cin: usize, cout: usize, strided: bool, r: usize) -> usize {
    let h = (cout / r).max(1);
    let shortcut = if cin != cout || strided { conv(cin, cout, 1) } else { 0 };
    conv(cin, cout, 3) + conv(cout, cout, 3) + shortcut + dense(cout, h) + dense(h, cout)
}

#[test]
fn mini_parameter_count_by_hand() {
    let w = [8, 10, 12, 14];
    let encoders = se_block(1, w[0], true, 2) + se_block(w[0], w[1], false, 2) + se_block(w[1], w[2], false, 2)
        + se_block(w[2], w[3], false, 2);
    // Pool 1: no decoder up-sampling, concatenated skips
    let decoders = se_block(w[3] + w[2], w[2], false, 2) + se_block(w[2] + w[1], w[1], false, 2)
        + se_block(w[1] + w[0], w[0], false, 2);
    let head = (w[0] * w[0] * 8 + w[0]) + conv(w[0] + 1, 8, 3) + conv(8, 10, 3);
    let net = build(&NetworkConfig::anatomynet_mini(), 0).unwrap();
    assert_eq!(net.parameter_count(), encoders + decoders + head);
}

#[test]
fn every_variant_runs_and_trains_every_parameter() {
    for kind in [BlockKind::Plain, BlockKind::Residual, BlockKind::SeResidual] {
        for merge in [MergeKind::Concat, MergeKind::Sum] {
            for scheme in PoolScheme::ALL {
                let cfg = NetworkConfig {
                    block_kind: kind,
                    merge,
                    pool_scheme: scheme,
                    encoder_channels: [4, 5, 6, 7],
                    head_channels: 4,
                    ..NetworkConfig::anatomynet_mini()
                };
                let net = build(&cfg, 5).unwrap();
                let x = volume(32, 6);
                let y = net.forward(&x).unwrap();
                assert_eq!(y.shape(), &[1, 10, 32, 32, 32]);
                let n: usize = 32 * 32 * 32;
                let r: Vec<f64> = (0..10 * n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
                let r = Tensor::new(y.shape(), r).unwrap();
                net.zero_grad();
                sum(&vseg::volgrid::mul(&y, &r).unwrap()).backward().unwrap();
                for (name, t) in net.named_parameters() {
                    let g = t.grad().unwrap_or_default();
                    assert!(g.iter().any(|&v| v != 0.0), "{kind:?}/{merge:?}/{} {name}", scheme.label());
                }
            }
        }
    }
}

#[test]
fn near_uniform_output_at_init() {
    let net = build(&NetworkConfig::anatomynet_mini(), 7).unwrap();
    let p = no_grad(|| net.forward(&volume(16, 7))).unwrap().to_vec();
    assert!(p.iter().all(|&v| v > 0.01 && v < 0.5));
}

#[test]
fn argmax_breaks_ties_low() {
    let p = Tensor::new(&[1, 3, 1, 1, 2], vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
    assert_eq!(predict_labels(&p).unwrap().labels(), &[0, 2]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = NetworkConfig {
        merge: MergeKind::Sum,
        pool_scheme: PoolScheme::Pool2,
        ..NetworkConfig::anatomynet_mini()
    };
    let net = build(&cfg, 8).unwrap();
    let bytes = checkpoint_bytes(&net).unwrap();
    let back = network_from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.config(), net.config());
    assert_eq!(back.flat_parameters(), net.flat_parameters());
    assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&net, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().flat_parameters(), net.flat_parameters());
    assert!(network_from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(network_from_checkpoint_bytes(&bad).is_err());
}

#[test]
fn volume_files_round_trip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = [3, 4, 5];
    let data: Vec<f64> = (0..60).map(|_| rng.random_range(-1e3..1e3)).collect();
    let t = Tensor::new(&[1, 1, 3, 4, 5], data.clone()).unwrap();
    let f = VolumeFile::from_intensities(&t, [0.7, 1.1, 2.5]);
    let back = VolumeFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
    assert_eq!(back, f);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.to_tensor().unwrap().to_vec()), bits(&data));

    let labels = LabelVolume::new(dims, (0..60).map(|_| rng.random_range(0..10)).collect(), [1.0, 2.0, 3.0], 10).unwrap();
    let mask = AnnotationMask::from_anatomies(&[true, false, true, true, false, true, true, true, true]);
    let f = VolumeFile::from_labels(&labels, &mask);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.vol");
    f.write(&path).unwrap();
    let (l2, m2) = VolumeFile::read(&path).unwrap().to_labels().unwrap();
    assert_eq!(l2, labels);
    assert_eq!(m2, mask);
    assert!(VolumeFile::from_bytes(&f.to_bytes().unwrap()[..20]).is_err());
}
