use astra_core::tensor::{canonical_sum, gradient_check, Tape, Tensor, Var};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn shape_2d() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=4, 1usize..=4).prop_map(|(r, c)| vec![r, c])
}

fn shape_any() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=3)
}

/// Fixed projection weights that depend only on the shape of `x`.
fn weights_like(x: &Tensor, salt: f64) -> Tensor {
    let data = (0..x.len()).map(|i| (i as f64 * 1.7 + salt).sin()).collect();
    Tensor::new(x.shape(), data).unwrap()
}

/// Elementwise and row-wise ops, each reduced through a fixed projection.
fn unary(op: usize, t: &mut Tape, x: Var) -> Var {
    match op {
        0 => t.relu(x),
        1 => t.gelu(x),
        2 => t.exp(x),
        3 => t.square(x),
        4 => t.smooth_l1(x),
        5 => t.clamp(x, -1.0, 1.0),
        6 => t.softmax(x),
        7 => t.scale(x, 0.3),
        _ => {
            let s = t.add_scalar(x, 0.5);
            t.mul(s, x).unwrap()
        }
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.softmax(v);
    tape.value(s).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn elementwise_ops_match_finite_differences(x in shape_any().prop_flat_map(tensor), op in 0usize..9) {
        let w = weights_like(&x, 0.1);
        let r = gradient_check(
            |t, v| {
                let y = unary(op, t, v);
                let w = t.constant(w.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(r.passes(1e-5), "op {op}: {r:?}");
    }

    #[test]
    fn binary_and_structural_ops_match_finite_differences(
        (x, y) in shape_2d().prop_flat_map(|s| (tensor(s.clone()), tensor(s))),
        op in 0usize..7,
    ) {
        let (rows, cols) = x.dims2().unwrap();
        let r = gradient_check(
            |t, v| {
                let c = t.constant(y.clone());
                let out = match op {
                    0 => t.mul(v, c)?,
                    1 => t.sub(c, v)?,
                    2 => {
                        let yt = t.transpose(c)?;
                        t.matmul(v, yt)?
                    }
                    3 => {
                        let vt = t.transpose(v)?;
                        t.matmul_stable(c, vt)?
                    }
                    4 => {
                        let g = t.constant(Tensor::full(&[cols], 1.3));
                        let b = t.constant(Tensor::full(&[cols], -0.2));
                        t.layer_norm(v, g, b, 1e-5)?
                    }
                    5 => {
                        let j = t.concat_cols(&[c, v])?;
                        t.slice_cols(j, cols / 2, cols)?
                    }
                    _ => {
                        let r = t.reshape(v, &[rows * cols])?;
                        t.slice_flat(r, 0, &[rows * cols])?
                    }
                };
                let w = t.constant(weights_like(t.value(out), 0.7));
                let p = t.mul(out, w)?;
                Ok(t.sum(p))
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(r.passes(1e-5), "op {op}: {r:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        x in shape_2d().prop_flat_map(tensor),
        shifts in prop::collection::vec(-50.0f64..50.0, 4),
    ) {
        let s = softmax_rows(&x);
        let (rows, cols) = x.dims2().unwrap();
        let mut shifted = x.clone();
        for r in 0..rows {
            let sum: f64 = s.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..cols {
                shifted.data_mut()[r * cols + c] += shifts[r];
            }
        }
        prop_assert!(softmax_rows(&shifted).max_abs_diff(&s) < 1e-12);
    }

    #[test]
    fn backward_of_independent_sum_splits(a in shape_2d().prop_flat_map(tensor), b in shape_2d().prop_flat_map(tensor)) {
        let branch = |t: &mut Tape, v: Var| {
            let e = t.gelu(v);
            let s = t.square(e);
            t.sum(s)
        };
        let alone = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.param(x.clone());
            let out = branch(&mut t, v);
            t.backward(out).unwrap().get(v)
        };
        let mut t = Tape::new();
        let va = t.param(a.clone());
        let vb = t.param(b.clone());
        let la = branch(&mut t, va);
        let lb = branch(&mut t, vb);
        let total = t.add(la, lb).unwrap();
        let g = t.backward(total).unwrap();
        prop_assert_eq!(g.get(va), alone(&a));
        prop_assert_eq!(g.get(vb), alone(&b));
    }

    #[test]
    fn canonical_sum_ignores_order(mut v in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
        let mut shuffled = v.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(i as u64 + 7) >> 11) as usize % (i + 1);
            shuffled.swap(i, j);
        }
        prop_assert_eq!(canonical_sum(&mut v).to_bits(), canonical_sum(&mut shuffled).to_bits());
    }
}
