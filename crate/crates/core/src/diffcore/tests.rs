use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn add_elementwise() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let b = t.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = rand_tensor(&mut rng, &[3, 3], -2.0, 2.0);
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let mut t = Tape::new();
    let (i, av) = (t.leaf(eye), t.leaf(a.clone()));
    let p = t.matmul(i, av).unwrap();
    assert_eq!(t.value(p), &a);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[3]));
    let s = t.softmax(a, 0).unwrap();
    for v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn square_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);
}

#[test]
fn sum_cos_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![0.0, std::f64::consts::FRAC_PI_2]).unwrap());
    let c = t.cos(x).unwrap();
    let s = t.sum_all(c).unwrap();
    let g = t.backward(s).unwrap().wrt(x);
    assert!(g.data()[0].abs() < 1e-15);
    assert!((g.data()[1] + 1.0).abs() < 1e-15);
}

#[test]
fn unreached_leaf_gets_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let unused = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let y = t.exp(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[2, 2]));
    let msg = t.matmul(a, a).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let msg = t.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add"), "{msg}");
}

#[test]
fn non_finite_output_is_an_error() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(-1.0));
    assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn two_layer_tanh_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[5, 3], -2.0, 2.0),
        rand_tensor(&mut rng, &[3, 8], -1.0, 1.0),
        rand_tensor(&mut rng, &[8], -1.0, 1.0),
        rand_tensor(&mut rng, &[8, 1], -1.0, 1.0),
    ];
    let err = max_gradient_error(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h)?;
            let o = t.matmul(h, v[3])?;
            let o = t.tanh(o)?;
            t.sum_all(o)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

/// Every primitive, reduced to a scalar through a random weighting so that
/// each output entry carries a distinct adjoint.
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, (f64, f64), Build)> = vec![
        ("add", vec![vec![3, 4], vec![4]], (-2.0, 2.0), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![3, 4]], (-2.0, 2.0), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![1], vec![3, 4]], (-2.0, 2.0), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![vec![3, 4], vec![4]], (0.5, 2.0), Box::new(|t, v| t.div(v[0], v[1]))),
        ("matmul", vec![vec![3, 5], vec![5, 2]], (-2.0, 2.0), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("sum_axis", vec![vec![2, 3, 4]], (-2.0, 2.0), Box::new(|t, v| t.sum_axis(v[0], 1))),
        ("mean_axis", vec![vec![2, 3, 4]], (-2.0, 2.0), Box::new(|t, v| t.mean_axis(v[0], 2))),
        ("broadcast", vec![vec![3]], (-2.0, 2.0), Box::new(|t, v| t.broadcast(v[0], 4))),
        (
            "concat",
            vec![vec![2, 3], vec![2, 1]],
            (-2.0, 2.0),
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("slice", vec![vec![3, 5]], (-2.0, 2.0), Box::new(|t, v| t.slice(v[0], 1, 1, 3))),
        ("gather", vec![vec![4, 2]], (-2.0, 2.0), Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3]))),
        ("reshape", vec![vec![2, 3]], (-2.0, 2.0), Box::new(|t, v| t.reshape(v[0], &[3, 2]))),
        ("transpose", vec![vec![2, 3]], (-2.0, 2.0), Box::new(|t, v| t.transpose(v[0]))),
        ("tanh", vec![vec![6]], (-2.0, 2.0), Box::new(|t, v| t.tanh(v[0]))),
        ("sigmoid", vec![vec![6]], (-2.0, 2.0), Box::new(|t, v| t.sigmoid(v[0]))),
        ("softplus", vec![vec![6]], (-2.0, 2.0), Box::new(|t, v| t.softplus(v[0]))),
        ("exp", vec![vec![6]], (-2.0, 2.0), Box::new(|t, v| t.exp(v[0]))),
        ("log", vec![vec![6]], (0.2, 2.0), Box::new(|t, v| t.log(v[0]))),
        ("cos", vec![vec![6]], (-2.0, 2.0), Box::new(|t, v| t.cos(v[0]))),
        ("sin", vec![vec![6]], (-2.0, 2.0), Box::new(|t, v| t.sin(v[0]))),
        ("pow", vec![vec![6]], (0.2, 2.0), Box::new(|t, v| t.pow(v[0], 2.5))),
        ("softmax", vec![vec![3, 4]], (-2.0, 2.0), Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_axis0", vec![vec![3, 4]], (-2.0, 2.0), Box::new(|t, v| t.softmax(v[0], 0))),
        ("affine", vec![vec![5]], (-2.0, 2.0), Box::new(|t, v| t.affine(v[0], -1.5, 0.3))),
        (
            "segment_mean",
            vec![vec![6, 2]],
            (-2.0, 2.0),
            Box::new(|t, v| t.segment_mean(v[0], &[0, 1, 4, 6])),
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, (lo, hi), build) in cases {
        for _ in 0..3 {
            let mut inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
            // Weighting applied to the op output; its shape is found by a dry run.
            let mut dry = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| dry.leaf(x.clone())).collect();
            let out = build(&mut dry, &vs).unwrap();
            let out_shape = dry.shape(out).to_vec();
            let weights = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
            inputs.push(weights);
            let n_in = shapes.len();
            let err = max_gradient_error(
                |t, v| {
                    let o = build(t, &v[..n_in])?;
                    let w = t.mul(o, v[n_in])?;
                    t.sum_all(w)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

fn spline_inputs(rng: &mut ChaCha8Rng, n: usize, k: usize, bound: f64) -> Vec<Tensor> {
    vec![
        rand_tensor(rng, &[n], -1.2 * bound, 1.2 * bound),
        rand_tensor(rng, &[n, k], -1.5, 1.5),
        rand_tensor(rng, &[n, k], -1.5, 1.5),
        rand_tensor(rng, &[n, k - 1], -1.5, 1.5),
    ]
}

fn spline_params(t: &mut Tape, v: &[Var]) -> crate::Result<(Var, Var, Var)> {
    let w = t.softmax(v[1], 1)?;
    let h = t.softmax(v[2], 1)?;
    let d = t.softplus(v[3])?;
    let d = t.affine(d, 1.0, 0.05)?;
    Ok((w, h, d))
}

#[test]
fn rq_spline_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut inputs = spline_inputs(&mut rng, 12, 5, 3.0);
        inputs.push(rand_tensor(&mut rng, &[12, 2], -1.0, 1.0));
        let err = max_gradient_error(
            |t, v| {
                let (w, h, d) = spline_params(t, v)?;
                let o = t.rq_spline(v[0], w, h, d, 3.0)?;
                let o = t.mul(o, v[4])?;
                t.sum_all(o)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn rq_spline_inverse_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let mut inputs = spline_inputs(&mut rng, 12, 5, 3.0);
        inputs.push(rand_tensor(&mut rng, &[12, 2], -1.0, 1.0));
        let err = max_gradient_error(
            |t, v| {
                let (w, h, d) = spline_params(t, v)?;
                let o = t.rq_spline_inverse(v[0], w, h, d, 3.0)?;
                let o = t.mul(o, v[4])?;
                t.sum_all(o)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn spline_op_inverse_round_trip_on_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = spline_inputs(&mut rng, 50, 8, 3.0);
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let (w, h, d) = spline_params(&mut t, &v).unwrap();
    let fwd = t.rq_spline(v[0], w, h, d, 3.0).unwrap();
    let y = t.slice(fwd, 1, 0, 1).unwrap();
    let y = t.reshape(y, &[50]).unwrap();
    let back = t.rq_spline_inverse(y, w, h, d, 3.0).unwrap();
    for i in 0..50 {
        assert!((t.value(back).at2(i, 0) - inputs[0].data()[i]).abs() < 1e-10);
        assert!((t.value(back).at2(i, 1) + t.value(fwd).at2(i, 1)).abs() < 1e-10);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.leaf(rand_tensor(&mut rng, &[4, 6], -2.0, 2.0));
        let b = t.leaf(rand_tensor(&mut rng, &[6, 3], -2.0, 2.0));
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax(m, 1).unwrap();
        let l = t.log(s).unwrap();
        let r = t.sum_all(l).unwrap();
        let g = t.backward(r).unwrap();
        (t.value(r).item().to_bits(), g.wrt(a).into_data(), g.wrt(b).into_data())
    };
    assert_eq!(run(), run());
}

#[test]
fn flop_counter_tracks_matmul() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[4, 5]));
    let b = t.leaf(Tensor::zeros(&[5, 6]));
    t.matmul(a, b).unwrap();
    assert_eq!(t.flops(), 2 * 4 * 5 * 6);
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_root(xs in proptest::collection::vec(-2.0f64..2.0, 4)) {
        let x = Tensor::vector(xs).unwrap();
        let grad = |which: u8| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let a = t.tanh(v).unwrap();
            let a = t.sum_all(a).unwrap();
            let b = t.mul(v, v).unwrap();
            let b = t.sin(b).unwrap();
            let b = t.sum_all(b).unwrap();
            let root = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b).unwrap(),
            };
            t.backward(root).unwrap().wrt(v).into_data()
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for i in 0..4 {
            prop_assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-12);
        }
    }
}
