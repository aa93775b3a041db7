mod support;

use sqlc::bundle::ModelBundle;
use sqlc::entropy::rate_bits;
use sqlc::metrics::{ms_ssim, MsSsimConfig};
use sqlc::models::*;
use sqlc::stain::{make_z, NormRanges, StainMatrix};
use sqlc::Tensor;
use support::*;
use sqlc_tensor::{grad_check, GradCheckConfig, Graph, TensorError};

fn lift(e: sqlc::Error) -> TensorError {
    TensorError::Argument { op: "model", detail: e.to_string() }
}

#[test]
fn se_shapes_range_and_determinism() {
    let se = SeModel::new(DEFAULT_LATENT_CHANNELS, &mut seeded(1));
    for (h, w) in [(16, 16), (23, 40)] {
        let z = image(vec![6, h, w], 2);
        let x = se.encode_tensor(&z).unwrap();
        assert_eq!(x.shape(), &[3, h, w]);
        assert!(x.is_finite());
        assert_eq!(x, se.encode_tensor(&z).unwrap());
        let back = se.decode_tensor(&x).unwrap();
        assert_eq!(back.shape(), &[6, h, w]);
        assert!(back.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
    assert!(se.encode_tensor(&image(vec![3, 16, 16], 3)).is_err());
    assert!(se.parameter_count() < 30_000);
}

#[test]
fn nicm_latent_and_output_shapes() {
    let m = NicmModel::new(3, 8, 6, &mut seeded(4));
    let mut g = Graph::<f32>::new();
    let vars = m.bind(&mut g, false);
    let x = g.constant(image(vec![2, 3, 64, 64], 5));
    let y = m.analyze(&mut g, &vars, x).unwrap();
    assert_eq!(g.shape(y), &[2, 6, 4, 4]);
    let r = m.synthesize(&mut g, &vars, y).unwrap();
    assert_eq!(g.shape(r), &[2, 3, 64, 64]);
    assert!(g.value(r).data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

/// make_z → SE encode → pad → analysis → round → synthesis → crop → SE
/// decode → RGB planes.
fn sqlc_forward(se: &SeModel, nicm: &NicmModel, rgb: &Tensor) -> Tensor {
    let z = make_z(rgb, &StainMatrix::ruifrok(), &NormRanges::default()).unwrap().z;
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let mut g = Graph::<f32>::new();
    let sv = se.bind(&mut g, false);
    let nv = nicm.bind(&mut g, false);
    let (zb, _) = batch4(&z).unwrap();
    let zv = g.constant(zb);
    let x = se.encode(&mut g, &sv, zv).unwrap();
    let padded = pad_to_stride(&mut g, x).unwrap();
    let y = nicm.analyze(&mut g, &nv, padded).unwrap();
    let rounded = g.value(y).map(|v| v.round());
    let yq = g.constant(rounded);
    let xr = nicm.synthesize(&mut g, &nv, yq).unwrap();
    let cropped = g.crop(xr, 0, 0, h, w).unwrap();
    let zr = se.decode(&mut g, &sv, cropped).unwrap();
    let rgb_hat = g.slice_channels(zr, 0, 3).unwrap();
    unbatch(g.value(rgb_hat).clone(), true).unwrap()
}

#[test]
fn end_to_end_forward_preserves_shape() {
    let se = SeModel::new(3, &mut seeded(6));
    let nicm = NicmModel::new(3, 4, 4, &mut seeded(7));
    for (h, w) in [(32, 32), (33, 47), (50, 64), (97, 40)] {
        let rgb = image(vec![3, h, w], 8);
        let out = sqlc_forward(&se, &nicm, &rgb);
        assert_eq!(out.shape(), rgb.shape());
        assert!(out.is_finite());
    }
}

#[test]
fn rd_loss_closed_forms() {
    let cfg = MsSsimConfig::default();
    let a = image(vec![1, 3, 32, 32], 9);
    let b = image(vec![1, 3, 32, 32], 10).map(|v| 0.5 * v + 0.25);
    let mut g = Graph::<f64>::new();
    let va = g.constant(a.cast());
    let vb = g.constant(b.cast());
    let rate = g.constant(Tensor::scalar(2048.0));
    let pixels = 32 * 32;

    let zero = rd_loss(&mut g, va, vb, rate, 0.0, pixels, &cfg).unwrap();
    assert_eq!(g.item(zero.loss), 2.0);
    let perfect = rd_loss(&mut g, va, va, rate, 0.5, pixels, &cfg).unwrap();
    assert!((g.item(perfect.loss) - 2.0).abs() < 1e-9);
    assert!(g.item(perfect.distortion).abs() < 1e-9);

    let l1 = rd_loss(&mut g, va, vb, rate, 0.01, pixels, &cfg).unwrap();
    let l2 = rd_loss(&mut g, va, vb, rate, 0.03, pixels, &cfg).unwrap();
    let d = g.item(l1.distortion);
    assert!(d > 0.0);
    let slope = (g.item(l2.loss) - g.item(l1.loss)) / 0.02;
    assert!((slope - d * 255.0 * 255.0).abs() < 1e-6 * slope.abs());
    assert!((d - (1.0 - ms_ssim(&a, &b, &cfg).unwrap())).abs() < 1e-9);
}

#[test]
fn finetune_loss_degenerate_cases() {
    let cfg = MsSsimConfig::default();
    let mut g = Graph::<f64>::new();
    let x = g.constant(image(vec![1, 3, 32, 32], 11).cast());
    let x_hat = g.constant(image(vec![1, 3, 32, 32], 12).cast());
    let z = g.constant(image(vec![1, 6, 32, 32], 13).cast());
    let z2 = g.constant(image(vec![1, 6, 32, 32], 14).cast());
    let rate = g.constant(Tensor::scalar(100.0));
    let rd = rd_loss(&mut g, x, x_hat, rate, 0.1, 1024, &cfg).unwrap();
    let (same, euclid) = sqlc_finetune_loss(&mut g, x, x_hat, z, z, rate, 0.1, 1.0, 1024, &cfg).unwrap();
    assert_eq!(g.item(euclid), 0.0);
    assert_eq!(g.item(same.loss), g.item(rd.loss));
    let (no_mu, _) = sqlc_finetune_loss(&mut g, x, x_hat, z, z2, rate, 0.1, 0.0, 1024, &cfg).unwrap();
    assert_eq!(g.item(no_mu.loss), g.item(rd.loss));
    let (with_mu, e) = sqlc_finetune_loss(&mut g, x, x_hat, z, z2, rate, 0.1, 2.0, 1024, &cfg).unwrap();
    let extra = g.item(with_mu.loss) - g.item(rd.loss);
    assert!((extra - 2.0 * 255.0 * 255.0 * g.item(e)).abs() < 1e-6 * extra);
}

#[test]
fn channelwise_loss_consistent_with_metric() {
    let cfg = MsSsimConfig::default();
    let a = image(vec![6, 32, 32], 15);
    let b = image(vec![6, 32, 32], 16).map(|v| 0.3 * v + 0.5);
    let mut g = Graph::<f64>::new();
    let va = g.constant(batch4(&a).unwrap().0.cast());
    let vb = g.constant(batch4(&b).unwrap().0.cast());
    let ab = channelwise_msssim_loss(&mut g, va, vb, &cfg).unwrap();
    let ba = channelwise_msssim_loss(&mut g, vb, va, &cfg).unwrap();
    let aa = channelwise_msssim_loss(&mut g, va, va, &cfg).unwrap();
    assert!((g.item(ab) - (1.0 - ms_ssim(&a, &b, &cfg).unwrap())).abs() < 1e-9);
    assert!((g.item(ab) - g.item(ba)).abs() < 1e-9);
    assert!(g.item(aa).abs() < 1e-9);
}

#[test]
fn se_loss_gradient_matches_finite_differences() {
    let se = SeModel::new(3, &mut seeded(17));
    let z = image(vec![1, 6, 24, 24], 18).cast::<f64>();
    let initial = se.decode_tensor(&se.encode_tensor(&z.cast()).unwrap()).unwrap().cast::<f64>();
    let target = correlated_target(&initial, 31);
    let cfg = MsSsimConfig::default();
    let report = grad_check(
        &f64_params(se.named_parameters()),
        |g: &mut Graph<f64>, p| {
            let vars = SeVars::from_vars(p.to_vec());
            let zv = g.constant(z.clone());
            let x = se.encode(g, &vars, zv).map_err(lift)?;
            let zr = se.decode(g, &vars, x).map_err(lift)?;
            let tv = g.constant(target.clone());
            channelwise_msssim_loss(g, tv, zr, &cfg).map_err(lift)
        },
        GradCheckConfig { max_samples_per_param: 8, step: 1e-5, ..Default::default() },
    )
    .unwrap();
    assert!(report.fraction_within() >= 0.95, "{report:?}");
}

#[test]
fn rd_loss_gradient_matches_finite_differences() {
    let report = rd_loss_grad_report();
    assert!(report.passed(1e-4), "{report:?}");
}

#[test]
fn finetune_loss_gradient_matches_finite_differences() {
    let report = finetune_loss_grad_report();
    assert!(report.passed(1e-4), "{report:?}");
}

#[test]
fn frozen_stain_encoder_gets_no_gradient() {
    let se = SeModel::new(3, &mut seeded(26));
    let m = NicmModel::new(3, 4, 3, &mut seeded(27));
    let mut g = Graph::<f32>::new();
    let sv = se.bind(&mut g, false);
    let nv = m.bind(&mut g, true);
    let z = g.constant(image(vec![1, 6, 32, 32], 28));
    let x = se.encode(&mut g, &sv, z).unwrap();
    let y = m.analyze(&mut g, &nv, x).unwrap();
    let x_hat = m.synthesize(&mut g, &nv, y).unwrap();
    let z_hat = se.decode(&mut g, &sv, x).unwrap();
    let z_hat2 = se.decode(&mut g, &sv, x_hat).unwrap();
    let lik = m.entropy.likelihood(&mut g, y, &nv.entropy).unwrap();
    let bits = rate_bits(&mut g, lik);
    let (terms, _) =
        sqlc_finetune_loss(&mut g, x, x_hat, z_hat, z_hat2, bits, 0.1, 1.0, 1024, &MsSsimConfig::default()).unwrap();
    g.backward(terms.loss).unwrap();
    for &v in sv.vars() {
        assert!(g.grad_or_zeros(v).iter().all(|x| *x == 0.0));
    }
    assert!(nv.vars().iter().any(|&v| g.grad_or_zeros(v).iter().any(|x| *x != 0.0)));
}

#[test]
fn models_survive_bundle_round_trip() {
    let se = SeModel::new(3, &mut seeded(29));
    let m = NicmModel::new(3, 8, 5, &mut seeded(30));
    let mut b = ModelBundle::new(2, 5, NormRanges::default(), StainMatrix::ruifrok());
    for (n, t) in se.named_parameters() {
        b.insert(n, t.clone()).unwrap();
    }
    for (n, t) in m.bundle_entries() {
        b.insert(n, t).unwrap();
    }
    let back = ModelBundle::from_bytes(&b.to_bytes()).unwrap();
    assert_eq!(SeModel::from_bundle(&back).unwrap(), se);
    assert_eq!(NicmModel::from_bundle(&back).unwrap(), m);
    assert!(back.contains("nicm.ent.ch4.stage3.h"));
    assert!(back.contains("se.enc.0.w"));
}

#[test]
fn quality_grid() {
    assert_eq!(QUALITY_LAMBDAS.len(), 8);
    assert!(QUALITY_LAMBDAS.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(lambda_for_quality(1).unwrap(), 0.0016);
    assert_eq!(lambda_for_quality(5).unwrap(), 0.101);
}
