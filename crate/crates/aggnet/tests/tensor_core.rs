//! Forward/backward contracts of the tensor core: hand-computed cases,
//! loop-oracle equivalence, the conv/deconv adjoint identity, and
//! finite-difference checks of the primitive operations.

use aggnet::gradcheck::{check_params, default_tol, oracle_tol, probe_loss};
use aggnet::nn::{ParamKind, ParamSet};
use aggnet::reference;
use aggnet::rng::Rng;
use aggnet::{Error, Graph, Mode, Real, Shape, Tensor};

fn rt(shape: Shape, rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, rng, lo, hi)
}

fn assert_close(a: &[Real], b: &[Real], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: lengths differ");
    for i in 0..a.len() {
        let (x, y) = (a[i] as f64, b[i] as f64);
        let err = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
        assert!(err <= tol, "{what}: element {i}: {x} vs {y} (rel {err:.3e})");
    }
}

// ── conv2d ──────────────────────────────────────────────────────────

#[test]
fn conv_delta_kernel_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
    let mut wt = Tensor::zeros(Shape::new(1, 1, 3, 3));
    wt.data_mut()[4] = 1.0;
    let w = g.constant(wt);
    let b = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn conv_pointwise_affine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap());
    let b = g.constant(Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap());
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0, 9.0]);
}

#[test]
fn conv_stride2_shape_and_oracle() {
    let mut rng = Rng::new(101);
    let mut g = Graph::new();
    let xt = rt(Shape::new(2, 3, 8, 8), &mut rng, -1.0, 1.0);
    let wt = rt(Shape::new(4, 3, 3, 3), &mut rng, -1.0, 1.0);
    let bt = rt(Shape::new(1, 4, 1, 1), &mut rng, -0.5, 0.5);
    let x = g.constant(xt.clone());
    let w = g.constant(wt.clone());
    let b = g.constant(bt.clone());
    let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), Shape::new(2, 4, 4, 4));
    let oracle = reference::conv2d(&xt, &wt, bt.data(), 2, 1);
    assert_close(g.value(y).data(), oracle.data(), oracle_tol(), "conv stride 2");
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 2, 4, 4)));
    let w = g.constant(Tensor::ones(Shape::new(1, 3, 3, 3)));
    match g.conv2d(x, w, None, 1, 1) {
        Err(Error::Shape(msg)) => assert!(msg.contains("channels")),
        other => panic!("expected shape error, got {other:?}"),
    }
}

// ── deconv2d ────────────────────────────────────────────────────────

#[test]
fn deconv_delta_kernel_stride1_is_identity() {
    let mut g = Graph::new();
    let xt = Tensor::new(
        Shape::new(1, 1, 2, 2),
        vec![1.0, -2.0, 3.0, 0.5],
    )
    .unwrap();
    let x = g.constant(xt.clone());
    let mut wt = Tensor::zeros(Shape::new(1, 1, 3, 3));
    wt.data_mut()[4] = 1.0;
    let w = g.constant(wt);
    let y = g.deconv2d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y).data(), xt.data());
}

#[test]
fn deconv_hand_unrolled_single_pixel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap());
    let w = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let y = g.deconv2d(x, w, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), Shape::new(1, 1, 2, 2));
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn deconv_matches_scatter_oracle() {
    let mut rng = Rng::new(55);
    for case in 0..5 {
        let (ci, co) = (2 + case % 2, 1 + case % 3);
        let xt = rt(Shape::new(2, ci, 4, 4), &mut rng, -1.0, 1.0);
        let wt = rt(Shape::new(ci, co, 3, 3), &mut rng, -1.0, 1.0);
        let bt = rt(Shape::new(1, co, 1, 1), &mut rng, -0.5, 0.5);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let b = g.constant(bt.clone());
        let y = g.deconv2d(x, w, Some(b), 2).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(2, co, 8, 8));
        let oracle = reference::deconv2d(&xt, &wt, bt.data(), 2);
        assert_close(g.value(y).data(), oracle.data(), oracle_tol(), "deconv");
    }
}

/// <conv(x), y> == <x, deconv_wT(y)> for matching shapes.
#[test]
fn conv_deconv_adjoint_identity() {
    let mut rng = Rng::new(77);
    for &stride in &[1usize, 2] {
        let (ci, co, k) = (2usize, 3usize, 3usize);
        let xt = rt(Shape::new(1, ci, 4, 4), &mut rng, -1.0, 1.0);
        let wt = rt(Shape::new(co, ci, k, k), &mut rng, -1.0, 1.0);
        let oh = 4usize.div_ceil(stride);
        let yt = rt(Shape::new(1, co, oh, oh), &mut rng, -1.0, 1.0);

        // The transposed-conv weight layout (c_in, c_out, k, k) is exactly
        // the conv weight (c_out, c_in, k, k) read as its own transpose, so
        // the same tensor expresses W^T.
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let conv = g.conv2d(x, w, None, stride, k / 2).unwrap();
        let lhs: f64 = g
            .value(conv)
            .data()
            .iter()
            .zip(yt.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();

        let mut g2 = Graph::new();
        let y = g2.constant(yt.clone());
        let w2 = g2.constant(wt.clone());
        let back = g2.deconv2d(y, w2, None, stride).unwrap();
        assert_eq!(g2.value(back).shape(), xt.shape());
        let rhs: f64 = g2
            .value(back)
            .data()
            .iter()
            .zip(xt.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();

        let err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
        assert!(err < oracle_tol(), "adjoint stride {stride}: {lhs} vs {rhs}");
    }
}

#[test]
fn stride2_conv_then_deconv_round_trips_even_dims() {
    for &(h, w) in &[(8usize, 8usize), (16, 12), (32, 64)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(Shape::new(1, 2, h, w)));
        let cw = g.constant(Tensor::ones(Shape::new(3, 2, 3, 3)));
        let y = g.conv2d(x, cw, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 3, h / 2, w / 2));
        let dw = g.constant(Tensor::ones(Shape::new(3, 2, 3, 3)));
        let z = g.deconv2d(y, dw, None, 2).unwrap();
        assert_eq!(g.value(z).shape(), Shape::new(1, 2, h, w));
    }
}

// ── fully connected ─────────────────────────────────────────────────

#[test]
fn fc_identity_weight() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(Shape::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let mut eye = Tensor::zeros(Shape::new(3, 3, 1, 1));
    for i in 0..3 {
        let s = eye.shape();
        eye.data_mut()[s.idx(i, i, 0, 0)] = 1.0;
    }
    let w = g.constant(eye);
    let y = g.fully_connected(x, w, None).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn fc_hand_example() {
    // x = [1,2], w = [[1,1],[0,1]], b = [1,0] -> [1+2+1, 2+0] = [4,2]
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(Shape::new(2, 2, 1, 1), vec![1.0, 1.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, 0.0]).unwrap());
    let y = g.fully_connected(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 2.0]);
}

#[test]
fn fc_matches_loop_oracle() {
    let mut rng = Rng::new(202);
    let (rows, l, m) = (3usize, 5usize, 4usize);
    let xt = rt(Shape::new(rows, l, 1, 1), &mut rng, -2.0, 2.0);
    let wt = rt(Shape::new(m, l, 1, 1), &mut rng, -1.0, 1.0);
    let bt = rt(Shape::new(1, m, 1, 1), &mut rng, -1.0, 1.0);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let w = g.constant(wt.clone());
    let b = g.constant(bt.clone());
    let y = g.fully_connected(x, w, Some(b)).unwrap();
    let oracle = reference::fully_connected(xt.data(), rows, l, wt.data(), m, bt.data());
    let tol = if cfg!(feature = "f64") { 1e-12 } else { 1e-5 };
    assert_close(g.value(y).data(), &oracle, tol, "fc");
}

// ── elementwise suite ───────────────────────────────────────────────

#[test]
fn elementwise_hand_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.scalar(s).unwrap(), 0.5);

    let ones = g.constant(Tensor::ones(Shape::new(1, 2, 2, 2)));
    let half = g.constant(Tensor::full(Shape::new(1, 2, 2, 2), 0.5));
    let m = g.mul(ones, half).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == 0.5));

    let neg = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), -2.0));
    let l = g.leaky_relu(neg, 0.2).unwrap();
    let got = g.scalar(l).unwrap() as f64;
    assert!((got - (-0.4)).abs() < 1e-7);
}

// ── batch norm ──────────────────────────────────────────────────────

#[test]
fn batch_norm_standardized_input_passes_through() {
    // Per-channel mean 0 variance 1 already: output differs only by the
    // epsilon in the denominator.
    let data = vec![-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
    let xt = Tensor::new(Shape::new(2, 1, 2, 2), data.clone()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(xt);
    let gamma = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
    let beta = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
    let stats = aggnet::tensor::BnStats::fresh(1);
    let (y, _) = g.batch_norm(x, gamma, beta, &stats, Mode::Train).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&data) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn batch_norm_constant_channel_collapses_to_beta() {
    let xt = Tensor::full(Shape::new(1, 2, 3, 3), 7.5);
    let mut g = Graph::new();
    let x = g.constant(xt);
    let gamma = g.constant(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let beta = g.constant(Tensor::full(Shape::new(1, 2, 1, 1), 3.25));
    let stats = aggnet::tensor::BnStats::fresh(2);
    let (y, _) = g.batch_norm(x, gamma, beta, &stats, Mode::Train).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 3.25).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_train_needs_two_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let gamma = g.constant(Tensor::ones(Shape::new(1, 2, 1, 1)));
    let beta = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let stats = aggnet::tensor::BnStats::fresh(2);
    assert!(g.batch_norm(x, gamma, beta, &stats, Mode::Train).is_err());
    assert!(g.batch_norm(x, gamma, beta, &stats, Mode::Eval).is_ok());
}

// ── backward contracts ──────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(Shape::new(1, 1, 2, 3), 4.0), true);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_half_square_gives_x() {
    let mut rng = Rng::new(8);
    let xt = rt(Shape::new(1, 2, 2, 2), &mut rng, -2.0, 2.0);
    let mut g = Graph::new();
    let x = g.leaf(xt.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    g.backward(loss).unwrap();
    let tol = if cfg!(feature = "f64") { 1e-12 } else { 1e-6 };
    assert_close(g.grad(x).unwrap(), xt.data(), tol, "grad of sum(x*x)/2");
}

#[test]
fn backward_accumulates_across_calls() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(Shape::new(1, 1, 1, 2)), true);
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn backward_rejects_foreign_and_non_scalar() {
    let mut g1 = Graph::new();
    let x = g1.leaf(Tensor::ones(Shape::new(1, 1, 1, 1)), true);
    let mut g2 = Graph::new();
    match g2.backward(x) {
        Err(Error::Graph(_)) => {}
        other => panic!("expected graph error, got {other:?}"),
    }
    let y = g1.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
    assert!(matches!(g1.backward(y), Err(Error::Graph(_))));
}

// ── oracle equivalence over many random cases ───────────────────────

#[test]
fn conv_matches_oracle_on_twenty_random_cases() {
    let mut rng = Rng::new(3001);
    for case in 0..20 {
        let n = 1 + (case % 2);
        let ci = 1 + (case % 3);
        let co = 1 + ((case / 2) % 3);
        let k = if case % 2 == 0 { 3 } else { 1 };
        let stride = 1 + (case % 2);
        let h = 4 + 2 * (case % 3);
        let xt = rt(Shape::new(n, ci, h, h), &mut rng, -2.0, 2.0);
        let wt = rt(Shape::new(co, ci, k, k), &mut rng, -1.0, 1.0);
        let bt = rt(Shape::new(1, co, 1, 1), &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let b = g.constant(bt.clone());
        let y = g.conv2d(x, w, Some(b), stride, k / 2).unwrap();
        let oracle = reference::conv2d(&xt, &wt, bt.data(), stride, k / 2);
        assert_close(g.value(y).data(), oracle.data(), oracle_tol(), "conv case");
    }
}

#[test]
fn deconv_matches_oracle_on_twenty_random_cases() {
    let mut rng = Rng::new(3002);
    for case in 0..20 {
        let n = 1 + (case % 2);
        let ci = 1 + (case % 3);
        let co = 1 + ((case / 3) % 3);
        let k = [2, 3, 7][case % 3];
        let stride = 1 + (case % 2);
        let h = 3 + (case % 4);
        let xt = rt(Shape::new(n, ci, h, h), &mut rng, -2.0, 2.0);
        let wt = rt(Shape::new(ci, co, k, k), &mut rng, -1.0, 1.0);
        let bt = rt(Shape::new(1, co, 1, 1), &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let b = g.constant(bt.clone());
        let y = g.deconv2d(x, w, Some(b), stride).unwrap();
        let oracle = reference::deconv2d(&xt, &wt, bt.data(), stride);
        assert_eq!(g.value(y).shape(), oracle.shape());
        assert_close(g.value(y).data(), oracle.data(), oracle_tol(), "deconv case");
    }
}

#[test]
fn fc_matches_oracle_on_twenty_random_cases() {
    let mut rng = Rng::new(3003);
    for case in 0..20 {
        let rows = 1 + (case % 4);
        let l = 1 + (case % 7);
        let m = 1 + ((case / 2) % 5);
        let xt = rt(Shape::new(rows, l, 1, 1), &mut rng, -2.0, 2.0);
        let wt = rt(Shape::new(m, l, 1, 1), &mut rng, -1.0, 1.0);
        let bt = rt(Shape::new(1, m, 1, 1), &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let w = g.constant(wt.clone());
        let b = g.constant(bt.clone());
        let y = g.fully_connected(x, w, Some(b)).unwrap();
        let oracle = reference::fully_connected(xt.data(), rows, l, wt.data(), m, bt.data());
        assert_close(g.value(y).data(), &oracle, oracle_tol(), "fc case");
    }
}

// ── finite differences on the primitive ops ─────────────────────────

#[test]
fn primitive_ops_pass_gradcheck() {
    let mut rng = Rng::new(9001);
    let mut p = ParamSet::new();
    p.insert("x", ParamKind::Weight, rt(Shape::new(2, 2, 4, 4), &mut rng, -1.0, 1.0)).unwrap();
    p.insert("w", ParamKind::Weight, rt(Shape::new(3, 2, 3, 3), &mut rng, -0.7, 0.7)).unwrap();
    p.insert("b", ParamKind::Bias, rt(Shape::new(1, 3, 1, 1), &mut rng, -0.3, 0.3)).unwrap();
    p.insert("dw", ParamKind::Weight, rt(Shape::new(3, 2, 3, 3), &mut rng, -0.7, 0.7)).unwrap();
    let probe1 = rt(Shape::new(2, 3, 2, 2), &mut rng, -1.0, 1.0);
    let probe2 = rt(Shape::new(2, 2, 4, 4), &mut rng, -1.0, 1.0);

    // conv stride 2, then deconv stride 2 of the conv output.
    let report = check_params(&mut p, Mode::Eval, |s, p| {
        let x = s.param(p, "x")?;
        let w = s.param(p, "w")?;
        let b = s.param(p, "b")?;
        let y = s.graph.conv2d(x, w, Some(b), 2, 1)?;
        let l1 = probe_loss(s, y, &probe1)?;
        let dw = s.param(p, "dw")?;
        let up = s.graph.deconv2d(y, dw, None, 2)?;
        let l2 = probe_loss(s, up, &probe2)?;
        s.graph.add(l1, l2)
    })
    .unwrap();
    assert!(
        report.max_rel_err() < default_tol(),
        "conv/deconv gradcheck failed: {:?}",
        report.worst()
    );
}

#[test]
fn elementwise_and_reduction_ops_pass_gradcheck() {
    let mut rng = Rng::new(9002);
    let mut p = ParamSet::new();
    // Values kept away from the relu/abs/huber/clamp kinks.
    p.insert("a", ParamKind::Weight, rt(Shape::new(1, 2, 3, 3), &mut rng, 0.3, 1.5)).unwrap();
    p.insert("b", ParamKind::Weight, rt(Shape::new(1, 2, 3, 3), &mut rng, -1.5, -0.3)).unwrap();
    let probe = rt(Shape::new(1, 4, 3, 3), &mut rng, -1.0, 1.0);
    let gt = rt(Shape::new(1, 2, 3, 3), &mut rng, 2.0, 3.0);

    let report = check_params(&mut p, Mode::Eval, |s, p| {
        let a = s.param(p, "a")?;
        let b = s.param(p, "b")?;
        let m = s.graph.mul(a, b)?;
        let sum = s.graph.add(m, a)?;
        let sg = s.graph.sigmoid(sum)?;
        let rl = s.graph.leaky_relu(b, 0.2)?;
        let cat = s.graph.concat_channels(&[sg, rl])?;
        let l1 = probe_loss(s, cat, &probe)?;

        let gt_v = s.input(gt.clone());
        let hub = s.graph.huber_elem(a, gt_v, 1.0)?;
        let l2 = s.graph.sum(hub)?;
        let ad = s.graph.abs_diff(a, gt_v)?;
        let l3 = s.graph.sum(ad)?;
        let dv = s.graph.diff_rows(a)?;
        let l4 = s.graph.sum(dv)?;
        let dh = s.graph.diff_cols(a)?;
        let l5 = s.graph.sum(dh)?;
        let cl = s.graph.clamp_min(b, -1.0)?;
        let l6 = s.graph.sum(cl)?;

        let t = s.graph.add(l1, l2)?;
        let t = s.graph.add(t, l3)?;
        let t = s.graph.add(t, l4)?;
        let t = s.graph.add(t, l5)?;
        let t = s.graph.scale(t, 0.5)?;
        s.graph.add(t, l6)
    })
    .unwrap();
    assert!(
        report.max_rel_err() < default_tol(),
        "elementwise gradcheck failed: {:?}",
        report.worst()
    );
}

#[test]
fn finiteness_preserved_by_forward_ops() {
    let mut rng = Rng::new(4004);
    let mut g = Graph::new();
    let x = g.constant(rt(Shape::new(2, 3, 8, 8), &mut rng, -50.0, 50.0));
    let w = g.constant(rt(Shape::new(4, 3, 3, 3), &mut rng, -3.0, 3.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let s = g.sigmoid(y).unwrap();
    let r = g.leaky_relu(s, 0.2).unwrap();
    assert!(g.value(r).all_finite());
    // Sigmoid is saturation-safe at extreme inputs.
    let big = g.constant(Tensor::new(Shape::new(1, 1, 1, 2), vec![-1e9 as Real, 1e9 as Real]).unwrap());
    let sb = g.sigmoid(big).unwrap();
    assert!(g.value(sb).all_finite());
}
