mod common;

use common::{normal_vec, rng};
use velonet::dataio::{synthesize, PathType, SyntheticConfig};
use velonet::nn::Mode;
use velonet::reconstruct::reconstruct;
use velonet::tensor::{Parameterized, Tensor};
use velonet::velonet::{CbamPlacement, VeloNet, VeloNetConfig};
use velonet::Error;

/// Parameter count from the layer formulas, independent of the model code.
fn expected_params(cfg: &VeloNetConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let block = |i: usize, m: usize, o: usize, stride: usize| {
        let w = m / 4;
        let mut p = i * m + bn(m) + 4 * (3 * w * w + bn(w)) + m * o + bn(o);
        if stride != 1 || i != o {
            p += i * o + bn(o);
        }
        p
    };
    let cbam = |c: usize| {
        let h = (c / 16).max(1);
        (c * h + h) + (h * c + c) + 2 * 7
    };
    let bw = cfg.base_width;
    let mut total = 6 * bw * 7 + bn(bw);
    let mut inc = bw;
    for (l, &count) in cfg.layer_blocks.iter().enumerate() {
        let (m, o) = (bw << l, 4 * (bw << l));
        for b in 0..count {
            total += block(if b == 0 { inc } else { o }, m, o, if b == 0 && l > 0 { 2 } else { 1 });
        }
        inc = o;
    }
    let before = [bw, 4 * bw, 8 * bw, 16 * bw][cfg.cbam_placement.layer_index()];
    total + cbam(before) + cbam(32 * bw) + 32 * bw * 2 + 2
}

#[test]
fn parameter_counts() {
    // Frozen values, cross-checked by a separate script.
    let frozen = [
        (CbamPlacement::P1, 13_658_338, 91_703),
        (CbamPlacement::P2, 13_666_222, 91_840),
        (CbamPlacement::P3, 13_691_070, 92_258),
        (CbamPlacement::P4, 13_789_918, 93_862),
    ];
    for (placement, full, tiny) in frozen {
        let cfg = VeloNetConfig { cbam_placement: placement, ..Default::default() };
        let net = VeloNet::build(&cfg).unwrap();
        assert_eq!(net.num_params(), full, "{placement}");
        assert_eq!(expected_params(&cfg), full);
        let cfg = VeloNetConfig { cbam_placement: placement, ..VeloNetConfig::tiny(64) };
        assert_eq!(VeloNet::build(&cfg).unwrap().num_params(), tiny, "{placement}");
        assert_eq!(expected_params(&cfg), tiny);
    }
    let odd = VeloNetConfig { layer_blocks: vec![2, 1, 3, 2], base_width: 12, ..VeloNetConfig::tiny(100) };
    assert_eq!(VeloNet::build(&odd).unwrap().num_params(), expected_params(&odd));
}

#[test]
fn default_network_maps_windows_to_velocities() {
    let mut net = VeloNet::build(&VeloNetConfig::default()).unwrap();
    let x = Tensor::new(&[2, 6, 200], normal_vec(&mut rng(1), 2 * 6 * 200)).unwrap();
    let v = net.predict(&x).unwrap();
    assert_eq!(v.len(), 2);
    assert!(v.iter().flatten().all(|x| x.is_finite()));
    // Rows are independent in eval mode.
    let one = Tensor::new(&[1, 6, 200], x.data()[1200..].to_vec()).unwrap();
    let v1 = net.predict(&one).unwrap();
    assert!((v1[0][0] - v[1][0]).abs() < 1e-9 && (v1[0][1] - v[1][1]).abs() < 1e-9);
    assert_eq!(net.mode(), Mode::Train);
}

#[test]
fn weights_round_trip_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let cfg = VeloNetConfig { rng_seed: 4, cbam_placement: CbamPlacement::P2, ..VeloNetConfig::tiny(64) };
    let mut net = VeloNet::build(&cfg).unwrap();
    // Non-default running statistics must survive as well.
    for (name, t) in net.named_tensors_mut() {
        if name.ends_with("running_var") {
            let n = t.numel();
            t.assign(&vec![1.5; n]).unwrap();
        }
    }
    net.save_weights(&path).unwrap();
    let loaded = VeloNet::load_weights(&path, &cfg).unwrap();
    assert_eq!(loaded.to_bytes(), net.to_bytes());
    let x = Tensor::new(&[3, 6, 64], normal_vec(&mut rng(2), 3 * 6 * 64)).unwrap();
    assert_eq!(loaded.clone().predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn architecture_mismatch_is_reported() {
    let cfg = VeloNetConfig::tiny(64);
    let bytes = VeloNet::build(&cfg).unwrap().to_bytes();
    for other in [
        VeloNetConfig { base_width: 16, ..cfg.clone() },
        VeloNetConfig { cbam_placement: CbamPlacement::P1, ..cfg.clone() },
        VeloNetConfig { window_n: 128, ..cfg.clone() },
    ] {
        assert!(matches!(VeloNet::from_bytes(&bytes, &other), Err(Error::ConfigMismatch(_))));
    }
    assert!(matches!(VeloNet::from_bytes(&bytes[..bytes.len() - 3], &cfg), Err(Error::CorruptFile(_))));
    assert!(matches!(VeloNet::from_bytes(b"not a weight file", &cfg), Err(Error::CorruptFile(_))));
    // Dropout is not part of the architecture.
    assert!(VeloNet::from_bytes(&bytes, &VeloNetConfig { dropout_rate: 0.1, ..cfg }).is_ok());
}

#[test]
fn zero_head_reconstructs_a_bias_line() {
    let cfg = VeloNetConfig::tiny(64);
    let mut net = VeloNet::build(&cfg).unwrap();
    net.head.weight.assign(&vec![0.0; net.head.weight.numel()]).unwrap();
    net.head.bias.assign(&[0.3, -0.4]).unwrap();
    let synth = SyntheticConfig { path_type: PathType::Circle, duration: 5.0, origin: [2.0, 1.0], ..Default::default() };
    let seq = synthesize(&synth).unwrap().record;
    let rec = reconstruct(&mut net, &seq, None).unwrap();
    // 1001 samples hold 15 windows of 64.
    assert_eq!(rec.trajectory.len(), 16);
    assert_eq!(rec.sample_indices, (0..=15).map(|k| k * 64).collect::<Vec<_>>());
    for i in 0..rec.trajectory.len() {
        let t = rec.trajectory.timestamps[i];
        assert!((t - (i * 64) as f64 / 200.0).abs() < 1e-12);
        assert!((rec.trajectory.px[i] - (2.0 + 0.3 * t)).abs() < 1e-9);
        assert!((rec.trajectory.py[i] - (1.0 - 0.4 * t)).abs() < 1e-9);
    }
    let gt = rec.ground_truth(&seq).unwrap();
    assert_eq!(gt.position(0), [2.0, 1.0]);
    assert_eq!(gt.timestamps, rec.trajectory.timestamps);

    let dense = reconstruct(&mut net, &seq, Some(16)).unwrap();
    let covered = *dense.sample_indices.last().unwrap();
    assert_eq!(dense.trajectory.len(), covered + 1);
    assert!((dense.trajectory.last()[0] - (2.0 + 0.3 * covered as f64 / 200.0)).abs() < 1e-9);
    assert!(reconstruct(&mut net, &seq, Some(65)).is_err());
}

#[test]
fn short_sequences_cannot_be_reconstructed() {
    let mut net = VeloNet::build(&VeloNetConfig::tiny(64)).unwrap();
    let seq = synthesize(&SyntheticConfig { duration: 0.3, ..Default::default() }).unwrap().record;
    assert_eq!(seq.len(), 61);
    assert!(reconstruct(&mut net, &seq, None).is_err());
}
