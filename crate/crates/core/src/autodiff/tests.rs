use super::gradcheck::{finite_difference, relative_error};
use super::*;
use crate::rng::SeededRng;
use crate::Error;

type Build = fn(&[Tensor]) -> crate::Result<Tensor>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    build: Build,
}

fn random_tensor(rng: &mut SeededRng, shape: &[usize], positive: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if positive {
                0.5 + rng.uniform() * 2.0
            } else {
                rng.normal()
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Contract an arbitrary output to a scalar with fixed pseudo-random weights.
fn contract(t: &Tensor) -> crate::Result<Tensor> {
    let w: Vec<f64> = (0..t.numel()).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    t.mul(&Tensor::new(t.shape(), w)?)?.sum()
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |x| x[0].add(&x[1]) },
        Case { name: "subtract", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |x| x[0].sub(&x[1]) },
        Case { name: "multiply", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |x| x[0].mul(&x[1]) },
        Case { name: "divide", shapes: &[&[3, 4], &[3, 4]], positive: true, build: |x| x[0].div(&x[1]) },
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], positive: false, build: |x| x[0].matmul(&x[1]) },
        Case { name: "transpose", shapes: &[&[3, 4]], positive: false, build: |x| x[0].transpose() },
        Case { name: "tanh", shapes: &[&[3, 4]], positive: false, build: |x| x[0].tanh() },
        Case { name: "sigmoid", shapes: &[&[3, 4]], positive: false, build: |x| x[0].sigmoid() },
        Case { name: "exp", shapes: &[&[3, 4]], positive: false, build: |x| x[0].exp() },
        Case { name: "log", shapes: &[&[3, 4]], positive: true, build: |x| x[0].log() },
        Case { name: "negate", shapes: &[&[3, 4]], positive: false, build: |x| x[0].neg() },
        Case { name: "square", shapes: &[&[3, 4]], positive: false, build: |x| x[0].square() },
        Case { name: "scale", shapes: &[&[3, 4]], positive: false, build: |x| x[0].scale(-1.7) },
        Case { name: "add_scalar", shapes: &[&[3, 4]], positive: false, build: |x| x[0].add_scalar(0.3) },
        Case { name: "clamp", shapes: &[&[3, 4]], positive: false, build: |x| x[0].clamp(-10.0, 10.0) },
        Case { name: "softmax", shapes: &[&[3, 4]], positive: false, build: |x| x[0].softmax() },
        Case { name: "log_softmax", shapes: &[&[3, 4]], positive: false, build: |x| x[0].log_softmax() },
        Case { name: "sum", shapes: &[&[3, 4]], positive: false, build: |x| x[0].square()?.sum() },
        Case { name: "mean", shapes: &[&[3, 4]], positive: false, build: |x| x[0].square()?.mean() },
        Case { name: "sum_to", shapes: &[&[3, 4]], positive: false, build: |x| x[0].sum_to(&[1, 4]) },
        Case { name: "broadcast", shapes: &[&[4]], positive: false, build: |x| x[0].broadcast_to(&[3, 4]) },
        Case { name: "broadcast_col", shapes: &[&[3, 1]], positive: false, build: |x| x[0].broadcast_to(&[3, 4]) },
        Case { name: "concat", shapes: &[&[3, 2], &[3, 3]], positive: false, build: |x| Tensor::concat(&[&x[0], &x[1]]) },
        Case { name: "slice", shapes: &[&[3, 5]], positive: false, build: |x| x[0].slice_last(1, 4) },
        Case { name: "pad", shapes: &[&[3, 2]], positive: false, build: |x| x[0].pad_last(1, 2) },
        Case { name: "select_rows", shapes: &[&[4, 3]], positive: false, build: |x| x[0].select_rows(&[2, 0, 2]) },
        Case { name: "scatter_rows", shapes: &[&[3, 2]], positive: false, build: |x| x[0].scatter_rows(&[1, 3, 1], 4) },
    ]
}

fn tape_gradients(case: &Case, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = contract(&(case.build)(&leaves).unwrap()).unwrap();
    let refs: Vec<&Tensor> = leaves.iter().collect();
    grad(&out, &refs, false)
        .unwrap()
        .into_iter()
        .map(|g| g.to_vec())
        .collect()
}

fn fd_gradients(case: &Case, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    (0..inputs.len())
        .map(|k| {
            finite_difference(
                |probe| {
                    let mut xs = inputs.to_vec();
                    xs[k] = Tensor::new(inputs[k].shape(), probe.to_vec()).unwrap();
                    contract(&(case.build)(&xs).unwrap()).unwrap().item()
                },
                inputs[k].data(),
                1e-5,
            )
        })
        .collect()
}

#[test]
fn first_order_matches_finite_differences_for_every_kind() {
    let mut rng = SeededRng::new(2024);
    for case in cases() {
        for trial in 0..20 {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| random_tensor(&mut rng, s, case.positive))
                .collect();
            let tape = tape_gradients(&case, &inputs);
            let fd = fd_gradients(&case, &inputs);
            for (a, b) in tape.iter().zip(&fd) {
                let err = relative_error(a, b);
                assert!(err < 1e-6, "{} trial {trial}: rel err {err}", case.name);
            }
        }
    }
}

#[test]
fn forward_examples() {
    let a = Tensor::vector(vec![1.0, 2.0]);
    let b = Tensor::vector(vec![3.0, 4.0]);
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    assert_eq!(Tensor::vector(vec![0.0]).sigmoid().unwrap().data(), &[0.5]);
    let ones23 = Tensor::ones(&[2, 3]);
    let ones31 = Tensor::ones(&[3, 1]);
    let m = ones23.matmul(&ones31).unwrap();
    assert_eq!(m.shape(), &[2, 1]);
    assert_eq!(m.data(), &[3.0, 3.0]);
}

#[test]
fn shape_and_domain_errors() {
    let a = Tensor::ones(&[2, 3]);
    let b = Tensor::ones(&[3, 2]);
    match a.add(&b) {
        Err(Error::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "add");
            assert_eq!(shapes, vec![vec![2, 3], vec![3, 2]]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { op: "matmul", .. })));
    assert!(matches!(
        Tensor::vector(vec![1.0, 0.0]).log(),
        Err(Error::Domain { op: "log", .. })
    ));
    assert!(matches!(
        Tensor::vector(vec![-1.0]).log(),
        Err(Error::Domain { op: "log", .. })
    ));
}

#[test]
fn grad_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = x.square().unwrap().sum().unwrap();
    let g = grad(&y, &[&x], false).unwrap();
    assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn second_derivative_of_cube() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(2.0));
    let y = x.mul(&x).unwrap().mul(&x).unwrap();
    let dy = grad(&y, &[&x], true).unwrap().remove(0);
    assert!((dy.item() - 12.0).abs() < 1e-12);
    assert!(dy.is_tracked());
    let d2y = grad(&dy, &[&x], false).unwrap().remove(0);
    assert!((d2y.item() - 12.0).abs() < 1e-12);
}

#[test]
fn non_scalar_output_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(grad(&x, &[&x], false), Err(Error::NonScalarOutput(_))));
}

#[test]
fn unrelated_input_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
    let z = tape.leaf(&Tensor::ones(&[2, 2]));
    let y = x.square().unwrap().sum().unwrap();
    let g = grad(&y, &[&x, &z], false).unwrap();
    assert_eq!(g[1].shape(), &[2, 2]);
    assert!(g[1].data().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_are_not_on_the_tape() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.0]));
    let c = Tensor::vector(vec![2.0]);
    let y = x.mul(&c).unwrap().sum().unwrap();
    assert!(matches!(grad(&y, &[&c], false), Err(Error::NotOnTape)));
}

#[test]
fn grad_matmul_loss_random_4x4() {
    let mut rng = SeededRng::new(5);
    let a = random_tensor(&mut rng, &[4, 4], false);
    let b = random_tensor(&mut rng, &[4, 4], false);
    let loss = |a: &Tensor| a.matmul(&b).unwrap().tanh().unwrap().sum().unwrap();
    let tape = Tape::new();
    let leaf = tape.leaf(&a);
    let g = grad(&loss(&leaf), &[&leaf], false).unwrap().remove(0);
    let fd = finite_difference(
        |p| loss(&Tensor::new(&[4, 4], p.to_vec()).unwrap()).item(),
        a.data(),
        1e-5,
    );
    assert!(relative_error(g.data(), &fd) < 1e-6);
}

#[test]
fn detach_stops_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::vector(vec![1.5, -2.0, 3.0]));
    let y = x.detach().mul(&x).unwrap().sum().unwrap();
    let g = grad(&y, &[&x], false).unwrap().remove(0);
    assert_eq!(g.data(), x.data());
    assert!(!x.detach().is_tracked());
    assert_eq!(x.detach().data(), x.data());
}

#[test]
fn detached_noise_has_no_gradient_path() {
    let tape = Tape::new();
    let mu = tape.leaf(&Tensor::vector(vec![0.2, -0.4]));
    let eps = tape.leaf(&Tensor::vector(vec![0.7, 1.1]));
    let sigma = Tensor::vector(vec![0.5, 2.0]);
    let v = mu.add(&sigma.mul(&eps.detach()).unwrap()).unwrap().sum().unwrap();
    let g = grad(&v, &[&mu, &eps], false).unwrap();
    assert_eq!(g[0].data(), &[1.0, 1.0]);
    assert_eq!(g[1].data(), &[0.0, 0.0]);
}

/// Depth-4 compositions; Hessian-vector products vs differences of gradients.
#[test]
fn second_order_matches_finite_differences() {
    let chains: Vec<(&str, fn(&Tensor) -> crate::Result<Tensor>)> = vec![
        ("tanh-mul-sigmoid-sum", |x| x.tanh()?.mul(x)?.sigmoid()?.sum()),
        ("matmul-tanh-square-mean", |x| {
            let w = Tensor::new(&[3, 3], (0..9).map(|i| (i as f64 - 4.0) / 5.0).collect())?;
            x.matmul(&w)?.tanh()?.square()?.mean()
        }),
        ("logsoftmax-exp-mul-sum", |x| x.log_softmax()?.exp()?.mul(x)?.sum()),
        ("softmax-log-scale-sum", |x| x.softmax()?.log()?.scale(0.3)?.sum()),
        ("concat-slice-mul-sum", |x| {
            let c = Tensor::concat(&[x, &x.sigmoid()?])?;
            c.slice_last(1, 4)?.square()?.sum()
        }),
    ];
    let mut rng = SeededRng::new(77);
    for (name, f) in chains {
        for _ in 0..5 {
            let x0 = random_tensor(&mut rng, &[2, 3], false);
            let u: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let u_t = Tensor::new(&[2, 3], u.clone()).unwrap();
            let tape = Tape::new();
            let x = tape.leaf(&x0);
            let g = grad(&f(&x).unwrap(), &[&x], true).unwrap().remove(0);
            let gu = g.mul(&u_t).unwrap().sum().unwrap();
            let hvp = grad(&gu, &[&x], false).unwrap().remove(0);
            let fd = finite_difference(
                |p| {
                    let tape = Tape::new();
                    let x = tape.leaf(&Tensor::new(&[2, 3], p.to_vec()).unwrap());
                    let g = grad(&f(&x).unwrap(), &[&x], false).unwrap().remove(0);
                    g.data().iter().zip(&u).map(|(a, b)| a * b).sum()
                },
                x0.data(),
                1e-5,
            );
            let err = relative_error(hvp.data(), &fd);
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }
}

#[test]
fn gradient_is_linear() {
    let mut rng = SeededRng::new(9);
    let x0 = random_tensor(&mut rng, &[3, 3], false);
    let (a, b) = (0.7, -2.3);
    let tape = Tape::new();
    let x = tape.leaf(&x0);
    let f = x.tanh().unwrap().sum().unwrap();
    let g = x.softmax().unwrap().square().unwrap().sum().unwrap();
    let combo = f.scale(a).unwrap().add(&g.scale(b).unwrap()).unwrap();
    let gc = grad(&combo, &[&x], false).unwrap().remove(0);
    let gf = grad(&f, &[&x], false).unwrap().remove(0);
    let gg = grad(&g, &[&x], false).unwrap().remove(0);
    for i in 0..9 {
        let expected = a * gf.data()[i] + b * gg.data()[i];
        assert!((gc.data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn identical_construction_gives_identical_bits() {
    let run = || {
        let mut rng = SeededRng::new(31);
        let x0 = random_tensor(&mut rng, &[4, 3], false);
        let w0 = random_tensor(&mut rng, &[3, 2], false);
        let tape = Tape::new();
        let x = tape.leaf(&x0);
        let w = tape.leaf(&w0);
        let y = x.matmul(&w).unwrap().log_softmax().unwrap().sum().unwrap();
        let g = grad(&y, &[&w], true).unwrap().remove(0);
        let s = g.square().unwrap().sum().unwrap();
        let h = grad(&s, &[&x, &w], false).unwrap();
        h.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<u64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn tape_is_topological_and_replays_bitwise() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::matrix(2, 2, vec![0.1, -0.3, 0.7, 1.2]).unwrap());
    let y = x.sigmoid().unwrap().matmul(&x).unwrap().log_softmax().unwrap().mean().unwrap();
    let g = grad(&y, &[&x], true).unwrap().remove(0);
    let _ = grad(&g.sum().unwrap(), &[&x], true).unwrap();
    for id in 0..tape.len() {
        assert!(tape.parents(id).iter().all(|&p| p < id));
    }
    assert!(tape.replay_matches().unwrap());
}

#[test]
fn mixing_tapes_is_an_error() {
    let a = Tape::new().leaf(&Tensor::scalar(1.0));
    let b = Tape::new().leaf(&Tensor::scalar(1.0));
    assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
}
