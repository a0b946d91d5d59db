mod common;

use rand::Rng;
use sscd_core::engine::{correlation_displacements, Reduction, Tape, Tensor};
use sscd_core::nn::{
    decode_weights, encode_weights, load_weights, load_weights_as, mask_tensor, save_weights, Architecture,
    CscdNetConfig, CsscdNetConfig, EncoderConfig, Mode, Model, ModelKind, SscdNetConfig,
};
use sscd_core::{ChangeMask, Error};

fn cscd() -> Architecture {
    Architecture::Change(CscdNetConfig::default())
}

fn sscd(k: usize) -> Architecture {
    Architecture::Semantic(SscdNetConfig {
        num_classes: k,
        ..Default::default()
    })
}

fn csscd(k: usize) -> Architecture {
    Architecture::Direct(CsscdNetConfig {
        trunk: CscdNetConfig::default(),
        num_classes: k,
    })
}

fn image(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
    let mut rng = common::rng(seed);
    Tensor::from_fn(&[n, 3, h, w], |_| rng.random_range(-1.0f32..1.0))
}

fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + 2 * cout
}

/// Closed-form trainable count of a batch-normed encoder/decoder with a
/// 1x1 biased head, written from the architecture description alone.
fn closed_form_count(widths: &[usize], blocks: usize, in_ch: usize, branches: usize, corr: &[usize], d: usize, out: usize) -> usize {
    let mut total = conv_bn(in_ch, widths[0], 3);
    let mut prev = widths[0];
    for (s, &w) in widths.iter().enumerate() {
        for b in 0..blocks {
            let cin = if b == 0 { prev } else { w };
            total += conv_bn(cin, w, 3) + conv_bn(w, w, 3);
            if b == 0 && (s > 0 || cin != w) {
                total += conv_bn(cin, w, 1);
            }
        }
        prev = w;
    }
    let cost = (2 * d + 1) * (2 * d + 1);
    let mut up = 0;
    for s in (0..widths.len()).rev() {
        let extra = if corr.contains(&s) { cost } else { 0 };
        total += conv_bn(up + branches * widths[s] + extra, widths[s], 3);
        up = widths[s];
    }
    total += conv_bn(up + branches * widths[0], widths[0], 3);
    total + widths[0] * out + out
}

#[test]
fn parameter_count_matches_closed_form_and_layer_table() {
    let m = Model::build(cscd(), 1).unwrap();
    let expected = closed_form_count(&[16, 32, 64, 128], 2, 3, 2, &[2, 3], 4, 2);
    assert_eq!(m.parameter_count(), expected);
    let per_layer: usize = m.layout().layers().iter().map(|l| l.trainable_count()).sum();
    assert_eq!(per_layer, expected);

    let s = Model::build(sscd(11), 1).unwrap();
    assert_eq!(s.parameter_count(), closed_form_count(&[16, 32, 64, 128], 2, 7, 1, &[], 0, 22));
}

#[test]
fn csscd_count_is_cscd_with_wider_head() {
    let c = Model::build(cscd(), 0).unwrap().parameter_count();
    let d = Model::build(csscd(11), 0).unwrap().parameter_count();
    assert_eq!(d, c - (16 * 2 + 2) + (16 * 22 + 22));
}

#[test]
fn sscd_head_has_2k_outputs() {
    let m = Model::build(sscd(11), 0).unwrap();
    assert_eq!(m.params().get("head.weight").unwrap().tensor.shape(), &[22, 16, 1, 1]);
    assert_eq!(m.params().get("enc.stem.weight").unwrap().tensor.shape(), &[16, 7, 3, 3]);
}

#[test]
fn same_seed_same_bytes() {
    for arch in [cscd(), sscd(4), csscd(11)] {
        let a = encode_weights(&Model::build(arch.clone(), 42).unwrap());
        let b = encode_weights(&Model::build(arch.clone(), 42).unwrap());
        let c = encode_weights(&Model::build(arch, 43).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}

#[test]
fn kaiming_fan_in_scale() {
    let m = Model::build(cscd(), 5).unwrap();
    let w = &m.params().get("enc.s3.b1.conv2.weight").unwrap().tensor;
    let n = w.numel() as f64;
    let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let target = 2.0 / (128.0 * 9.0);
    assert!(mean.abs() < 1e-3, "mean {mean}");
    assert!((var / target - 1.0).abs() < 0.02, "var {var} vs {target}");
    assert!(m.params().get("enc.stem.bn.gamma").unwrap().tensor.data().iter().all(|&g| g == 1.0));
    assert!(m.params().get("head.bias").unwrap().tensor.data().iter().all(|&b| b == 0.0));
}

#[test]
fn rejects_bad_configs() {
    let c = CscdNetConfig { correlation_stages: vec![1, 7], ..Default::default() };
    assert!(matches!(Model::build(Architecture::Change(c), 0), Err(Error::Config(_))));
    assert!(Model::build(sscd(1), 0).is_err());
}

#[test]
fn change_shape_and_probabilities() {
    let m = Model::build(cscd(), 3).unwrap();
    let i1 = image(1, 2, 64, 64);
    let out = m.predict_change(&i1, &i1).unwrap();
    assert_eq!(out.shape(), &[2, 2, 64, 64]);
    assert!(out.all_finite());
    let mut tape = Tape::new();
    let v = tape.constant(out);
    let p = tape.softmax_channels(v).unwrap();
    let p = tape.value(p).data();
    for i in 0..2 * 64 * 64 {
        let (b, r) = (i / 4096, i % 4096);
        let s = p[b * 8192 + r] + p[b * 8192 + 4096 + r];
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn shape_closure_for_other_sizes() {
    let m = Model::build(cscd(), 3).unwrap();
    let i = image(2, 1, 32, 48);
    assert_eq!(m.predict_change(&i, &i).unwrap().shape(), &[1, 2, 32, 48]);
    let s = Model::build(sscd(3), 3).unwrap();
    let mask = mask_tensor(&[ChangeMask::zeros(48, 32)]).unwrap();
    let (p1, p2) = s.predict_semantic(&i, &i, &mask).unwrap();
    assert_eq!(p1.shape(), &[1, 3, 32, 48]);
    assert_eq!(p2.shape(), &[1, 3, 32, 48]);
}

#[test]
fn indivisible_size_is_rejected_with_divisor() {
    let m = Model::build(cscd(), 0).unwrap();
    let i = image(0, 1, 40, 64);
    let err = m.predict_change(&i, &i).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("16"), "{err}");
}

#[test]
fn wrong_kind_forward_is_rejected() {
    let m = Model::build(sscd(4), 0).unwrap();
    let i = image(0, 1, 32, 32);
    assert!(matches!(m.predict_change(&i, &i), Err(Error::CheckpointMismatch { .. })));
}

#[test]
fn semantic_shapes() {
    let m = Model::build(sscd(4), 9).unwrap();
    let i1 = image(1, 1, 64, 64);
    let i2 = image(2, 1, 64, 64);
    let mask = mask_tensor(&[ChangeMask::ones(64, 64)]).unwrap();
    let (p1, p2) = m.predict_semantic(&i1, &i2, &mask).unwrap();
    assert_eq!(p1.shape(), &[1, 4, 64, 64]);
    assert_eq!(p2.shape(), &[1, 4, 64, 64]);

    let d = Model::build(csscd(11), 9).unwrap();
    let (q1, q2) = d.predict_semantic_direct(&i1, &i2).unwrap();
    assert_eq!(q1.shape(), &[1, 11, 64, 64]);
    assert_eq!(q2.shape(), &[1, 11, 64, 64]);
}

#[test]
fn mask_channel_is_live() {
    let m = Model::build(sscd(4), 11).unwrap();
    let i1 = image(1, 1, 32, 32);
    let i2 = image(2, 1, 32, 32);
    let zeros = mask_tensor(&[ChangeMask::zeros(32, 32)]).unwrap();
    let ones = mask_tensor(&[ChangeMask::ones(32, 32)]).unwrap();
    let (a, _) = m.predict_semantic(&i1, &i2, &zeros).unwrap();
    let (b, _) = m.predict_semantic(&i1, &i2, &ones).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn non_binary_mask_is_rejected() {
    let m = Model::build(sscd(4), 0).unwrap();
    let i = image(0, 1, 16, 16);
    let mut mask = Tensor::zeros(&[1, 1, 16, 16]);
    mask.data_mut()[5] = 0.5;
    assert!(matches!(m.predict_semantic(&i, &i, &mask), Err(Error::NonBinaryTarget { index: 5, .. })));
}

#[test]
fn shared_encoder_receives_gradient_from_both_branches() {
    let m = Model::build(cscd(), 4).unwrap();
    let i1 = image(1, 1, 32, 32);
    let grad_of_stem = |i2: &Tensor| {
        let mut s = m.session(Mode::Train);
        let out = s.forward_change(&i1, i2).unwrap();
        let loss = s.tape.bce_change_loss(out, &[ChangeMask::zeros(32, 32)], Reduction::Sum).unwrap();
        let g = s.tape.backward(loss).unwrap();
        let grads = s.param_grads(&g);
        assert_eq!(grads.len(), m.params().len());
        grads[m.params().position("enc.stem.weight").unwrap()].clone()
    };
    let a = grad_of_stem(&image(2, 1, 32, 32));
    let b = grad_of_stem(&image(3, 1, 32, 32));
    assert!(a.iter().any(|&v| v != 0.0));
    assert_ne!(a, b, "second image must reach the shared stem");
}

#[test]
fn batch_stats_update_running_averages() {
    let mut m = Model::build(cscd(), 4).unwrap();
    let i1 = image(1, 2, 32, 32);
    let stats = {
        let mut s = m.session(Mode::Train);
        s.forward_change(&i1, &i1).unwrap();
        s.take_batch_stats()
    };
    // One record per branch pass through the shared stem, folded in order.
    let stem: Vec<_> = stats.iter().filter(|(n, _)| n == "enc.stem").map(|(_, s)| s.clone()).collect();
    assert_eq!(stem.len(), 2);
    m.apply_batch_stats(&stats).unwrap();
    let rm = m.params().get("enc.stem.bn.running_mean").unwrap().tensor.data().to_vec();
    let rv = m.params().get("enc.stem.bn.running_var").unwrap().tensor.data().to_vec();
    for c in 0..16 {
        let (mut em, mut ev) = (0.0f64, 1.0f64);
        for s in &stem {
            em = 0.9 * em + 0.1 * s.mean[c];
            ev = 0.9 * ev + 0.1 * s.var[c];
        }
        assert!((rm[c] as f64 - em).abs() < 1e-6);
        assert!((rv[c] as f64 - ev).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, arch) in [cscd(), sscd(4), csscd(5)].into_iter().enumerate() {
        let m = Model::build(arch, 77).unwrap();
        let p = dir.path().join(format!("m{i}.bin"));
        save_weights(&m, &p).unwrap();
        assert!(dir.path().join(format!("m{i}.bin.cfg")).exists());
        let back = load_weights(&p).unwrap();
        assert_eq!(back, m);
        let p2 = dir.path().join(format!("m{i}b.bin"));
        save_weights(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}

#[test]
fn loaded_model_forward_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::build(cscd(), 8).unwrap();
    let p = dir.path().join("w.bin");
    save_weights(&m, &p).unwrap();
    let back = load_weights(&p).unwrap();
    let i1 = image(1, 1, 32, 32);
    let i2 = image(2, 1, 32, 32);
    let a = m.predict_change(&i1, &i2).unwrap();
    let b = back.predict_change(&i1, &i2).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn truncated_checkpoint_is_rejected_with_offset() {
    let m = Model::build(sscd(3), 0).unwrap();
    let bytes = encode_weights(&m);
    let path = std::path::Path::new("t.bin");
    for cut in [0, 5, 10, 40, bytes.len() / 2, bytes.len() - 1] {
        match decode_weights(&bytes[..cut], path) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_weights(&extra, path), Err(Error::Format { .. })));
}

#[test]
fn version_and_kind_mismatch_are_reported() {
    let m = Model::build(sscd(3), 0).unwrap();
    let mut bytes = encode_weights(&m);
    bytes[8] = 9;
    let err = decode_weights(&bytes, std::path::Path::new("x")).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch { .. }));
    assert!(err.to_string().contains("version 1") && err.to_string().contains("version 9"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.bin");
    save_weights(&m, &p).unwrap();
    let err = load_weights_as(&p, ModelKind::Cscdnet).unwrap_err();
    assert_eq!(err.to_string(), "checkpoint mismatch: expected cscdnet, found sscdnet");
    assert!(load_weights_as(&p, ModelKind::Sscdnet).is_ok());
}

#[test]
fn full_preset_has_resnet18_widths() {
    let arch = Architecture::Change(CscdNetConfig::with_encoder(EncoderConfig::full()));
    let m = Model::build(arch, 0).unwrap();
    assert_eq!(m.params().get("enc.s3.b1.conv2.weight").unwrap().tensor.shape(), &[512, 512, 3, 3]);
}

/// Swapping the two feature maps transposes the cost volume:
/// corr(f1, f2)[dy, dx](y, x) == corr(f2, f1)[-dy, -dx](y + dy, x + dx).
#[test]
fn correlation_swap_is_displacement_transpose() {
    let (n, c, h, w, d) = (2, 3, 7, 6, 2);
    let mut rng = common::rng(31);
    let f1 = common::random_vec(&mut rng, n * c * h * w);
    let f2 = common::random_vec(&mut rng, n * c * h * w);
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![n, c, h, w], f1).unwrap());
    let b = tape.constant(Tensor::new(vec![n, c, h, w], f2).unwrap());
    let ab = tape.correlation(a, b, d).unwrap();
    let ba = tape.correlation(b, a, d).unwrap();
    let (ab, ba) = (tape.value(ab).data(), tape.value(ba).data());
    let disp = correlation_displacements(d);
    let nd = disp.len();
    let mut checked = 0;
    for bi in 0..n {
        for (k, &(dy, dx)) in disp.iter().enumerate() {
            let k2 = disp.iter().position(|&p| p == (-dy, -dx)).unwrap();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (y2, x2) = (y + dy, x + dx);
                    if y2 < 0 || x2 < 0 || y2 >= h as isize || x2 >= w as isize {
                        continue;
                    }
                    let i = ((bi * nd + k) * h + y as usize) * w + x as usize;
                    let j = ((bi * nd + k2) * h + y2 as usize) * w + x2 as usize;
                    assert!((ab[i] - ba[j]).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 0);
}
