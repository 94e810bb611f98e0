use super::*;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "component {i}: {x} vs {y}");
    }
}

#[test]
fn forward_values() {
    let a = t(&[1.0, 2.0, 3.0], &[3]);
    let b = t(&[4.0, 5.0, 6.0], &[3]);
    assert_eq!(a.add(&b).unwrap().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(a.sub(&b).unwrap().data(), &[-3.0, -3.0, -3.0]);
    assert_eq!(a.mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
    assert_eq!(b.div(&a).unwrap().data(), &[4.0, 2.5, 2.0]);
    // scalar operand broadcasts on either side
    let s = Tensor::scalar(2.0);
    assert_eq!(a.mul(&s).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(s.sub(&a).unwrap().data(), &[1.0, 0.0, -1.0]);

    let m = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
    let n = t(&[7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
    let p = m.matmul(&n).unwrap();
    assert_eq!(p.shape(), &[2, 2]);
    assert_eq!(p.data(), &[58.0, 64.0, 139.0, 154.0]);

    assert_eq!(t(&[-1.0, 0.0, 2.0], &[3]).relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    assert_close(&[t(&[0.0], &[1]).sigmoid().unwrap().item()], &[0.5], 1e-15);
    assert_close(&[t(&[1.0], &[1]).exp().unwrap().item()], &[std::f64::consts::E], 1e-12);
    assert_close(
        &[t(&[std::f64::consts::E], &[1]).log().unwrap().item()],
        &[1.0],
        1e-12,
    );

    assert_eq!(m.sum().unwrap().item(), 21.0);
    assert_eq!(m.mean().unwrap().item(), 3.5);
    assert_eq!(m.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(m.sum_axis(1).unwrap().data(), &[6.0, 15.0]);
    assert_eq!(m.mean_axis(1).unwrap().data(), &[2.0, 5.0]);

    assert_eq!(t(&[3.0, 4.0], &[2]).l2norm().unwrap().item(), 5.0);
    assert_eq!(
        t(&[3.0, 4.0, 6.0, 8.0], &[2, 2]).l2norm_rows().unwrap().data(),
        &[5.0, 10.0]
    );
    assert_eq!(t(&[-1.0, 2.0, -3.0], &[3]).l1norm().unwrap().item(), 6.0);

    let sm = t(&[0.0, 0.0, 1.0, 1.0], &[2, 2]).softmax().unwrap();
    assert_close(sm.data(), &[0.5, 0.5, 0.5, 0.5], 1e-15);

    let c = Tensor::concat(&[&t(&[1.0, 2.0], &[2, 1]), &t(&[3.0, 4.0], &[2, 1])]).unwrap();
    assert_eq!(c.shape(), &[2, 2]);
    assert_eq!(c.data(), &[1.0, 3.0, 2.0, 4.0]);

    let g = m.index_rows(&[1, 0, 1]).unwrap();
    assert_eq!(g.shape(), &[3, 3]);
    assert_eq!(g.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

    let br = t(&[1.0, 2.0], &[2]).broadcast_to(&[3, 2]).unwrap();
    assert_eq!(br.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

    let rs = m.reshape(&[3, 2]).unwrap();
    assert_eq!(rs.shape(), &[3, 2]);
    assert_eq!(rs.data(), m.data());

    let img = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 4, 1]);
    let pooled = img.avg_pool2().unwrap();
    assert_eq!(pooled.shape(), &[1, 2, 1]);
    assert_eq!(pooled.data(), &[3.5, 5.5]);
}

#[test]
fn bilinear_forward_pixel_centers() {
    // 2x2 grid: value at sample centers must reproduce the samples,
    // and the grid midpoint must average all four.
    let grid = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let q = t(&[0.5, 0.5, 1.5, 0.5, 1.0, 1.0], &[3, 2]);
    let out = grid.bilinear_gather(&q).unwrap();
    assert_close(out.data(), &[1.0, 2.0, 2.5], 1e-15);
    // border clamp: far outside returns the corner sample
    let far = t(&[-10.0, -10.0], &[1, 2]);
    assert_eq!(grid.bilinear_gather(&far).unwrap().data(), &[1.0]);
}

#[test]
fn backward_simple_chain() {
    let tape = Tape::new();
    let x = tape.var(vec![3.0], &[1]).unwrap();
    let y = x.mul(&x).unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.wrt(&x).data(), &[6.0]);
}

#[test]
fn backward_l2norm_analytic() {
    let tape = Tape::new();
    let x = tape.var(vec![3.0, 4.0], &[2]).unwrap();
    let y = x.l2norm().unwrap();
    let g = tape.backward(&y).unwrap();
    assert_close(g.wrt(&x).data(), &[0.6, 0.8], 1e-15);
}

#[test]
fn gradient_accumulates_over_consumers() {
    // x feeds two consumers; gradient equals the single-consumer rewrite.
    let tape = Tape::new();
    let x = tape.var(vec![1.5, -2.0, 0.5], &[3]).unwrap();
    let y = x.mul(&x).unwrap();
    let z = y.add(&y).unwrap().sum().unwrap();
    let g1 = tape.backward(&z).unwrap().wrt(&x);

    let tape2 = Tape::new();
    let x2 = tape2.var(vec![1.5, -2.0, 0.5], &[3]).unwrap();
    let w = x2.mul(&x2).unwrap().scale(2.0).unwrap().sum().unwrap();
    let g2 = tape2.backward(&w).unwrap().wrt(&x2);
    assert_eq!(g1.data(), g2.data());
}

#[test]
fn unreached_leaf_gets_zeros() {
    let tape = Tape::new();
    let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
    let unused = tape.var(vec![5.0], &[1]).unwrap();
    let y = x.sum().unwrap();
    let g = tape.backward(&y).unwrap();
    assert_eq!(g.wrt(&unused).data(), &[0.0]);
    assert!(g.slot(&unused).is_none());
}

#[test]
fn detach_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.var(vec![2.0], &[1]).unwrap();
    let y = x.mul(&x.detach()).unwrap();
    let g = tape.backward(&y).unwrap();
    // d/dx (x * const 2) = 2, not 4
    assert_eq!(g.wrt(&x).data(), &[2.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let tape = Tape::new();
    let x = tape.var(vec![0.3, -1.2, 2.7, 0.01], &[4]).unwrap();
    let y = x
        .tanh()
        .unwrap()
        .mul(&x)
        .unwrap()
        .softmax()
        .unwrap()
        .l2norm()
        .unwrap();
    let a = tape.backward(&y).unwrap().wrt(&x);
    let b = tape.backward(&y).unwrap().wrt(&x);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.data()), bits(b.data()));
}

#[test]
fn grad_check_per_op() {
    let eps = 1e-5;
    let tol = 1e-6;
    let x = t(&[0.37, -0.81, 1.42, -0.05, 0.9, 2.1], &[2, 3]);
    let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
        ("add", Box::new(|x: &Tensor| x.add(&t(&[1.0, -2.0, 0.5, 3.0, -1.0, 0.2], &[2, 3]))?.sum())),
        ("sub_scalar", Box::new(|x: &Tensor| Tensor::scalar(2.0).sub(x)?.l2norm())),
        ("mul", Box::new(|x: &Tensor| x.mul(&t(&[1.0, -2.0, 0.5, 3.0, -1.0, 0.2], &[2, 3]))?.sum())),
        ("div", Box::new(|x: &Tensor| t(&[1.0; 6], &[2, 3]).div(&x.add_scalar(5.0)?)?.sum())),
        ("matmul", Box::new(|x: &Tensor| x.matmul(&t(&[0.3, -0.7, 1.1, 0.2, -0.4, 0.6], &[3, 2]))?.l2norm())),
        ("tanh", Box::new(|x: &Tensor| x.tanh()?.sum())),
        ("relu", Box::new(|x: &Tensor| x.relu()?.sum())),
        ("sigmoid", Box::new(|x: &Tensor| x.sigmoid()?.sum())),
        ("exp", Box::new(|x: &Tensor| x.exp()?.sum())),
        ("log", Box::new(|x: &Tensor| x.add_scalar(3.0)?.log()?.sum())),
        ("mean", Box::new(|x: &Tensor| x.mean())),
        ("sum_axis", Box::new(|x: &Tensor| x.sum_axis(0)?.l2norm())),
        ("mean_axis", Box::new(|x: &Tensor| x.mean_axis(1)?.l2norm())),
        ("l2norm", Box::new(|x: &Tensor| x.l2norm())),
        ("l2norm_rows", Box::new(|x: &Tensor| x.l2norm_rows()?.sum())),
        ("l1norm", Box::new(|x: &Tensor| x.l1norm())),
        ("l1norm_rows", Box::new(|x: &Tensor| x.l1norm_rows()?.sum())),
        ("softmax", Box::new(|x: &Tensor| x.softmax()?.l2norm())),
        ("concat", Box::new(|x: &Tensor| {
            Tensor::concat(&[x, &x.mul(x)?])?.l2norm()
        })),
        ("index", Box::new(|x: &Tensor| x.index_rows(&[1, 1, 0])?.l2norm())),
        ("broadcast", Box::new(|x: &Tensor| {
            x.reshape(&[1, 2, 3])?.broadcast_to(&[4, 2, 3])?.l2norm()
        })),
        ("reshape", Box::new(|x: &Tensor| x.reshape(&[6])?.softmax()?.l2norm())),
        ("square_chain", Box::new(|x: &Tensor| x.square()?.mean())),
        ("abs", Box::new(|x: &Tensor| x.abs()?.sum())),
    ];
    for (name, f) in cases {
        let err = grad_check(f, &x, eps).unwrap();
        assert!(err < tol, "{name}: max rel grad error {err}");
    }
}

#[test]
fn grad_check_bilinear_and_pool() {
    let grid = t(
        &[0.1, 0.9, -0.3, 0.5, 0.7, -0.2, 0.4, 0.0, 1.3, -0.8, 0.6, 0.2],
        &[3, 4],
    );
    // grid gradient
    let q = t(&[1.2, 1.7, 2.6, 0.9], &[2, 2]);
    let err = grad_check(|g| g.bilinear_gather(&q)?.l2norm(), &grid, 1e-5).unwrap();
    assert!(err < 1e-6, "bilinear grid grad error {err}");
    // coord gradient, queries away from sample-center breakpoints
    let err = grad_check(|c| grid.bilinear_gather(c)?.l2norm(), &q, 1e-5).unwrap();
    assert!(err < 1e-6, "bilinear coord grad error {err}");

    let img = t(
        &(0..24).map(|i| (i as f64 * 0.61).sin()).collect::<Vec<_>>(),
        &[4, 3, 2],
    );
    let err = grad_check(|x| x.avg_pool2()?.l2norm(), &img, 1e-5).unwrap();
    assert!(err < 1e-6, "avg_pool2 grad error {err}");
}

#[test]
fn apply_dispatch_matches_methods() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[0.5, 0.5, 0.5, 0.5], &[2, 2]);
    let via_kind = apply(&OpKind::Matmul, &[&a, &b]).unwrap();
    let direct = a.matmul(&b).unwrap();
    assert_eq!(via_kind.data(), direct.data());
    let via_kind = apply(&OpKind::Softmax, &[&a]).unwrap();
    assert_eq!(via_kind.data(), a.softmax().unwrap().data());
    assert!(apply(&OpKind::Matmul, &[&a]).is_err());
}

#[test]
fn custom_op_roundtrip() {
    struct Triple;
    impl CustomOp for Triple {
        fn name(&self) -> &'static str {
            "triple"
        }
        fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().map(|v| 3.0 * v).collect())]
        }
    }
    let tape = Tape::new();
    let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
    let y_data: Vec<f64> = x.data().iter().map(|v| 3.0 * v).collect();
    let y = Tensor::custom(&[&x], (y_data, vec![2]), Box::new(Triple)).unwrap();
    let loss = y.sum().unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&x).data(), &[3.0, 3.0]);

    // constants skip the tape entirely
    let c = t(&[1.0], &[1]);
    let out = Tensor::custom(&[&c], (vec![3.0], vec![1]), Box::new(Triple)).unwrap();
    assert!(!out.is_tracked());
}

#[test]
fn error_paths() {
    let a = t(&[1.0, 2.0], &[2]);
    let b = t(&[1.0, 2.0, 3.0], &[3]);
    let err = a.add(&b).unwrap_err().to_string();
    assert!(err.contains("add"), "unexpected message: {err}");

    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "unexpected message: {err}");

    // loss must be a tracked scalar
    let tape = Tape::new();
    let x = tape.var(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    assert!(matches!(tape.backward(&a), Err(Error::Contract(_))));

    // mixing tapes is rejected
    let other = Tape::new();
    let y = other.var(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(x.add(&y), Err(Error::Argument(_))));

    assert!(matches!(a.index_rows(&[5]), Err(Error::Argument(_))));
    assert!(Tensor::from_vec(vec![1.0; 5], &[2, 3]).is_err());
}

#[test]
fn grad_check_rejects_non_scalar_and_non_finite() {
    let x = t(&[1.0, 2.0], &[2]);
    assert!(matches!(
        grad_check(|x| x.mul(x), &x, 1e-5),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        grad_check(|x| x.log()?.sum(), &t(&[-1.0], &[1]), 1e-5),
        Err(Error::Numeric(_))
    ));
}
