mod common;

use common::*;
use proptest::prelude::*;
use uniseg::autodiff::ParamKind;
use uniseg::{Error, Graph, ParamStore, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv3d_delta_kernel_is_identity() {
    let x = random(&[1, 3, 4, 5], 1);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let w = g.input(t(&[1, 1, 1, 1, 1], vec![1.0]));
    let b = g.input(t(&[1], vec![0.0]));
    let y = g.conv3d(xv, w, Some(b), [1, 1, 1], [0, 0, 0]).unwrap();
    assert!(g.value(y).bitwise_eq(&x));
}

#[test]
fn conv3d_full_overlap_sums_products() {
    // 1^2 + 2^2 + ... + 8^2 = 204
    let vals: Vec<f64> = (1..=8).map(f64::from).collect();
    let mut g = Graph::new();
    let x = g.input(t(&[1, 2, 2, 2], vals.clone()));
    let w = g.input(t(&[1, 1, 2, 2, 2], vals));
    let b = g.input(t(&[1], vec![0.0]));
    let y = g.conv3d(x, w, Some(b), [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data()[0], 204.0);
}

#[test]
fn conv3d_output_extent_formula() {
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::zeros(&[2, 7, 8, 9]));
    let w = g.input(Tensor::zeros(&[4, 2, 3, 3, 3]));
    let y = g.conv3d(x, w, None, [2, 1, 2], [1, 1, 1]).unwrap();
    // floor((n + 2 - 3) / s) + 1
    assert_eq!(g.value(y).shape(), &[4, 4, 8, 5]);
    let w2 = g.input(Tensor::zeros(&[4, 3, 3, 3, 3]));
    let err = g.conv3d(x, w2, None, [1, 1, 1], [1, 1, 1]).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn conv_transpose_broadcasts_constant() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 1, 1, 1], vec![1.0]));
    let w = g.input(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let b = g.input(t(&[1], vec![0.0]));
    let y = g.conv_transpose3d(x, w, Some(b), [2, 2, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));
}

#[test]
fn conv_transpose_rejects_stride_three() {
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::zeros(&[1, 2, 2, 2]));
    let w = g.input(Tensor::zeros(&[1, 1, 3, 3, 3]));
    assert!(matches!(
        g.conv_transpose3d(x, w, None, [3, 3, 3]),
        Err(Error::Config(_))
    ));
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    for (stride, kernel, dims) in [
        ([2, 2, 2], [2, 2, 2], [4, 6, 8]),
        ([1, 2, 2], [1, 2, 2], [3, 4, 4]),
        ([1, 1, 1], [1, 1, 1], [2, 3, 4]),
    ] {
        let x = random(&[3, dims[0], dims[1], dims[2]], 2);
        let w = random(&[4, 3, kernel[0], kernel[1], kernel[2]], 3);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w);
        let cx = g.conv3d(xv, wv, None, stride, [0, 0, 0]).unwrap();
        let y = random(g.value(cx).shape(), 4);
        let yv = g.input(y.clone());
        let ty = g.conv_transpose3d(yv, wv, None, stride).unwrap();
        assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = inner(g.value(cx), &y);
        let rhs = inner(&x, g.value(ty));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn instance_norm_constant_channel_collapses_to_beta() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 2, 2, 2], 3.5));
    let gm = g.input(t(&[1], vec![1.0]));
    let bt = g.input(t(&[1], vec![0.0]));
    let y = g.instance_norm(x, gm, bt, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn instance_norm_standardises_each_channel() {
    let mut g = Graph::new();
    let x = g.input(random(&[2, 4, 4, 4], 5));
    let gm = g.input(Tensor::full(&[2], 1.0));
    let bt = g.input(Tensor::zeros(&[2]));
    let y = g.instance_norm(x, gm, bt, 1e-5).unwrap();
    for ch in g.value(y).data().chunks(64) {
        let m = ch.iter().sum::<f64>() / 64.0;
        let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-10);
        assert!((1.0 - 1e-3..=1.0 + 1e-3).contains(&v), "{v}");
    }
}

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], vec![-1.0, 0.0, 2.0]));
    let y = g.leaky_relu(x, 0.01);
    assert_eq!(g.value(y).data(), &[-0.01, 0.0, 2.0]);
    let id = g.leaky_relu(x, 1.0);
    assert_eq!(g.value(id).data(), &[-1.0, 0.0, 2.0]);
}

#[test]
fn leaky_relu_subgradient_at_zero_is_slope() {
    let mut g = Graph::new();
    let x = g.variable(t(&[1], vec![0.0]));
    let y = g.leaky_relu(x, 0.01);
    let s = g.sum(y);
    assert_eq!(g.backward(s).unwrap().wrt(x).unwrap(), &[0.01]);
}

#[test]
fn concat_single_part_and_channel_order() {
    let a = random(&[3, 2, 2, 2], 6);
    let b = random(&[5, 2, 2, 2], 7);
    let mut g = Graph::new();
    let av = g.input(a.clone());
    let bv = g.input(b);
    let one = g.concat_channels(&[av]).unwrap();
    assert!(g.value(one).bitwise_eq(&a));
    let c = g.concat_channels(&[av, bv]).unwrap();
    assert_eq!(g.value(c).shape(), &[8, 2, 2, 2]);
    assert_eq!(&g.value(c).data()[..24], a.data());
}

#[test]
fn concat_spatial_mismatch_names_part() {
    let mut g = Graph::new();
    let a = g.input(Tensor::<f64>::zeros(&[1, 2, 2, 2]));
    let b = g.input(Tensor::zeros(&[1, 2, 2, 3]));
    let msg = g.concat_channels(&[a, a, b]).unwrap_err().to_string();
    assert!(msg.contains("part 2"), "{msg}");
}

#[test]
fn split_channel_indexed_constants() {
    let x = Tensor::from_fn(&[4, 2, 2, 2], |i| (i / 8) as f64);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let whole = g.split_channels(xv, &[4]).unwrap();
    assert!(g.value(whole[0]).bitwise_eq(&x));
    let parts = g.split_channels(xv, &[2, 2]).unwrap();
    let vals = |v| {
        let mut s: Vec<f64> = g.value(v).data().to_vec();
        s.dedup();
        s
    };
    assert_eq!(vals(parts[0]), vec![0.0, 1.0]);
    assert_eq!(vals(parts[1]), vec![2.0, 3.0]);
    assert!(g.split_channels(xv, &[2, 3]).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let one = g.input(random(&[1, 2, 2, 2], 8));
    let p1 = g.softmax_channel(one).unwrap();
    assert!(g.value(p1).data().iter().all(|&v| v == 1.0));
    let z = g.input(t(&[2, 1], vec![0.0, 0.0]));
    let pz = g.softmax_channel(z).unwrap();
    assert_eq!(g.value(pz).data(), &[0.5, 0.5]);
    let big = g.input(t(&[2, 1], vec![1000.0, 0.0]));
    let pb = g.softmax_channel(big).unwrap();
    let p = g.value(pb).data();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
}

#[test]
fn backward_errors_and_unreachable_parameters() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", random(&[2, 2], 9), ParamKind::Weight).unwrap();
    let unused = store.add("unused", random(&[3], 10), ParamKind::Bias).unwrap();
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let _ = g.param(&store, unused);
    let sq = g.square(u);
    assert!(matches!(g.backward(sq), Err(Error::Usage(_))));
    let s = g.sum(sq);
    store.zero_grad();
    g.backward_into(s, &mut store, 1.0).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    assert!(store.get(unused).grad.data().iter().all(|&v| v == 0.0));
    let p = store.get(used);
    for (gv, v) in p.grad.data().iter().zip(p.value.data()) {
        assert_eq!(*gv, 2.0 * v);
    }
}

#[test]
fn non_trainable_parameter_enters_as_constant() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("frozen", random(&[4], 11), ParamKind::Prompt).unwrap();
    store.set_trainable(id, false);
    let mut g = Graph::new();
    let p = g.param(&store, id);
    assert!(!g.requires_grad(p));
    let s = g.sum(p);
    store.zero_grad();
    g.backward_into(s, &mut store, 1.0).unwrap();
    assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn operations_are_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.variable(random(&[2, 4, 6, 6], 12));
        let w = g.variable(random(&[3, 2, 3, 3, 3], 13));
        let c = g.conv3d(x, w, None, [1, 2, 2], [1, 1, 1]).unwrap();
        let gm = g.input(Tensor::full(&[3], 1.0));
        let bt = g.input(Tensor::zeros(&[3]));
        let n = g.instance_norm(c, gm, bt, 1e-5).unwrap();
        let a = g.leaky_relu(n, 0.01);
        let s = project(&mut g, a, 14);
        let grads = g.backward(s).unwrap();
        (g.value(a).clone(), grads.wrt(w).unwrap().to_vec())
    };
    let (a1, g1) = run();
    let (a2, g2) = run();
    assert!(a1.bitwise_eq(&a2));
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concat_split_round_trip(ca in 1usize..5, cb in 1usize..5, d in 1usize..4, seed in 0u64..1000) {
        let a = random(&[ca, d, 2, 3], seed);
        let b = random(&[cb, d, 2, 3], seed + 1);
        let mut g = Graph::new();
        let av = g.input(a.clone());
        let bv = g.input(b.clone());
        let c = g.concat_channels(&[av, bv]).unwrap();
        let parts = g.split_channels(c, &[ca, cb]).unwrap();
        prop_assert!(g.value(parts[0]).bitwise_eq(&a));
        prop_assert!(g.value(parts[1]).bitwise_eq(&b));
        let back = g.concat_channels(&parts).unwrap();
        prop_assert!(g.value(back).bitwise_eq(g.value(c)));
    }

    #[test]
    fn softmax_normalised_and_shift_invariant(k in 1usize..6, seed in 0u64..1000, shift in -50.0f64..50.0) {
        let x = random(&[k, 2, 3, 3], seed).map(|v| v * 10.0);
        let offsets = random(&[1, 2, 3, 3], seed + 7).map(|v| v * shift);
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + offsets.data()[i % 18]);
        let mut g = Graph::new();
        let xv = g.input(x);
        let sv = g.input(shifted);
        let p = g.softmax_channel(xv).unwrap();
        let q = g.softmax_channel(sv).unwrap();
        for v in 0..18 {
            let s: f64 = (0..k).map(|c| g.value(p).data()[c * 18 + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        for (a, b) in g.value(p).data().iter().zip(g.value(q).data()) {
            prop_assert!(*a > 0.0);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
