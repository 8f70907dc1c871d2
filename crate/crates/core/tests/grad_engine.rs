use nfrl_core::grad::fd::{central_difference, max_relative_error, RELATIVE_FLOOR};
use nfrl_core::grad::tape::LAYERNORM_EPS;
use nfrl_core::grad::{Activation, Matrix, Mlp, MlpSpec, OutputInit, ParamStore, StoreId, Tape, Triangle, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

type Program = dyn Fn(&mut Tape<'_>, StoreId, Var) -> nfrl_core::Result<Var>;

fn run(store: &ParamStore, x: &Matrix, prog: &Program) -> Matrix {
    let mut tape = Tape::new();
    let s = tape.add_store(store);
    let xv = tape.leaf(x.clone());
    let out = prog(&mut tape, s, xv).unwrap();
    tape.value(out).clone()
}

fn weighted(out: &Matrix, w: &Matrix) -> f64 {
    out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

/// Max relative error of the tape's gradient of `Σ w ⊙ prog(x)` against
/// central differences, over parameters and inputs.
fn gradient_error(store: &ParamStore, x: &Matrix, prog: &Program, seed: u64) -> (f64, f64) {
    let out = run(store, x, prog);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::from_vec(out.rows(), out.cols(), (0..out.as_slice().len()).map(|_| rng.random_range(-1.0..1.0)).collect());

    let mut tape = Tape::new();
    let s = tape.add_store(store);
    let xv = tape.leaf(x.clone());
    let o = prog(&mut tape, s, xv).unwrap();
    let g = tape.backward(o, &w).unwrap();
    let gx = g.wrt(xv).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    let gp = g.params(s).to_vec();

    let num_p = central_difference(
        |theta| {
            let mut st = store.clone();
            st.values_mut().copy_from_slice(theta);
            weighted(&run(&st, x, prog), &w)
        },
        store.values(),
        FD_STEP,
    );
    let num_x = central_difference(
        |xs| weighted(&run(store, &Matrix::from_vec(x.rows(), x.cols(), xs.to_vec()), prog), &w),
        x.as_slice(),
        FD_STEP,
    );
    (max_relative_error(&gp, &num_p, RELATIVE_FLOOR), max_relative_error(gx.as_slice(), &num_x, RELATIVE_FLOOR))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for v in store.values_mut() {
        *v = rng.random_range(-0.8..0.8);
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn mlp_matches_straight_line_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new(42);
    let spec = MlpSpec { in_dim: 2, hidden_dims: vec![16], out_dim: 2, layernorm: true, activation: Activation::Gelu };
    let mlp = Mlp::build(spec, "net", &mut store, OutputInit::He, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = [0.5, -0.5];
    let got = mlp.eval(&store, &x).unwrap();

    let w0 = store.slice_values("net.l0.w").unwrap();
    let b0 = store.slice_values("net.l0.b").unwrap();
    let g0 = store.slice_values("net.l0.ln.g").unwrap();
    let lb0 = store.slice_values("net.l0.ln.b").unwrap();
    let w1 = store.slice_values("net.l1.w").unwrap();
    let b1 = store.slice_values("net.l1.b").unwrap();
    let mut h = [0.0; 16];
    for j in 0..16 {
        h[j] = w0[j * 2] * x[0] + w0[j * 2 + 1] * x[1] + b0[j];
    }
    let mean = h.iter().sum::<f64>() / 16.0;
    let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
    for j in 0..16 {
        h[j] = gelu((h[j] - mean) / (var + LAYERNORM_EPS).sqrt() * g0[j] + lb0[j]);
    }
    for k in 0..2 {
        let mut acc = b1[k];
        for j in 0..16 {
            acc += w1[k * 16 + j] * h[j];
        }
        assert!((acc - got[k]).abs() < 1e-12, "output {k}: {acc} vs {}", got[k]);
    }
}

#[test]
fn mlp_output_layer_zero_init_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new(1);
    let spec = MlpSpec { in_dim: 3, hidden_dims: vec![8, 8], out_dim: 2, layernorm: true, activation: Activation::Relu };
    let mlp = Mlp::build(spec, "z", &mut store, OutputInit::Zero, &mut rng).unwrap();
    assert_eq!(mlp.eval(&store, &[1.0, -4.0, 9.0]).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn backward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new(3);
    let spec = MlpSpec { in_dim: 4, hidden_dims: vec![12, 12], out_dim: 3, layernorm: true, activation: Activation::Gelu };
    let mlp = Mlp::build(spec, "d", &mut store, OutputInit::He, &mut rng).unwrap();
    let x = random_matrix(9, 4, &mut rng);
    let grads = || {
        let mut tape = Tape::new();
        let s = tape.add_store(&store);
        let xv = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, s, xv).unwrap();
        let sq = tape.square(y);
        let m = tape.mean(sq).unwrap();
        let g = tape.backward_scalar(m).unwrap();
        (g.params(s).to_vec(), g.wrt(xv).unwrap().clone())
    };
    let (p1, x1) = grads();
    let (p2, x2) = grads();
    assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(x1.as_slice().iter().zip(x2.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn untouched_parameters_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(4);
    let spec = MlpSpec { in_dim: 2, hidden_dims: vec![4], out_dim: 1, layernorm: false, activation: Activation::Tanh };
    let used = Mlp::build(spec.clone(), "used", &mut store, OutputInit::He, &mut rng).unwrap();
    let _unused = Mlp::build(spec, "unused", &mut store, OutputInit::He, &mut rng).unwrap();
    let mut tape = Tape::new();
    let s = tape.add_store(&store);
    let x = tape.leaf(Matrix::row(&[0.3, -0.2]));
    let y = used.forward(&mut tape, s, x).unwrap();
    let g = tape.backward_scalar(y).unwrap();
    let unused = store.slice("unused.l0.w").unwrap().offset;
    assert!(g.params(s)[unused..].iter().all(|v| *v == 0.0));
    assert!(g.params(s)[..unused].iter().any(|v| *v != 0.0));
}

fn op_programs(d: usize) -> Vec<(&'static str, usize, Box<Program>)> {
    let tri = Triangle::Upper.packed_len(d);
    let low = Triangle::UnitLower.packed_len(d);
    let c = Matrix::from_vec(1, d, (0..d).map(|i| 0.1 * i as f64 - 0.3).collect());
    vec![
        ("linear", 3 * d + 3, Box::new(move |t: &mut Tape<'_>, s, x| t.linear(x, s, 0, 3 * d, 3))),
        ("layer_norm", 2 * d, Box::new(move |t: &mut Tape<'_>, s, x| t.layer_norm(x, s, 0, d))),
        ("gelu", 0, Box::new(|t: &mut Tape<'_>, _s, x| Ok(t.activation(x, Activation::Gelu)))),
        ("tanh", 0, Box::new(|t: &mut Tape<'_>, _s, x| Ok(t.activation(x, Activation::Tanh)))),
        ("relu", 0, Box::new(|t: &mut Tape<'_>, _s, x| Ok(t.activation(x, Activation::Relu)))),
        ("exp", 0, Box::new(|t: &mut Tape<'_>, _s, x| Ok(t.exp(x)))),
        ("square", 0, Box::new(|t: &mut Tape<'_>, _s, x| Ok(t.square(x)))),
        ("scale_shift", 0, Box::new(|t: &mut Tape<'_>, _s, x| {
            let a = t.scale(x, -2.5);
            Ok(t.shift(a, 0.7))
        })),
        ("clamp", 0, Box::new(|t: &mut Tape<'_>, _s, x| Ok(t.clamp(x, -0.9, 0.8)))),
        ("mul_add_sub", 0, Box::new(|t: &mut Tape<'_>, _s, x| {
            let e = t.exp(x);
            let m = t.mul(x, e)?;
            let a = t.add(m, x)?;
            t.sub(a, e)
        })),
        ("min", 0, Box::new(|t: &mut Tape<'_>, _s, x| {
            let neg = t.scale(x, -0.5);
            t.min(x, neg)
        })),
        ("add_const", 0, Box::new(move |t: &mut Tape<'_>, _s, x| {
            let rows = t.value(x).rows();
            let k = Matrix::from_vec(rows, d, c.as_slice().iter().cycle().take(rows * d).cloned().collect());
            let y = t.add_const(x, &k)?;
            Ok(t.square(y))
        })),
        ("columns_concat", 0, Box::new(move |t: &mut Tape<'_>, _s, x| {
            let rev: Vec<usize> = (0..d).rev().collect();
            let a = t.columns(x, &rev)?;
            let b = t.columns(x, &[0, 0])?;
            let sq = t.square(b);
            t.concat(&[a, sq])
        })),
        ("row_sum_mean", 0, Box::new(|t: &mut Tape<'_>, _s, x| {
            let sq = t.square(x);
            let r = t.row_sum(sq);
            t.mean(r)
        })),
        ("tri_mul_upper", tri, Box::new(move |t: &mut Tape<'_>, s, x| t.tri_mul(x, s, 0, Triangle::Upper))),
        ("tri_mul_lower", low, Box::new(move |t: &mut Tape<'_>, s, x| t.tri_mul(x, s, 0, Triangle::UnitLower))),
        ("tri_solve_upper", tri, Box::new(move |t: &mut Tape<'_>, s, x| t.tri_solve(x, s, 0, Triangle::Upper))),
        ("tri_solve_lower", low, Box::new(move |t: &mut Tape<'_>, s, x| t.tri_solve(x, s, 0, Triangle::UnitLower))),
        ("log_abs_diag", tri, Box::new(move |t: &mut Tape<'_>, s, x| {
            let rows = t.value(x).rows();
            let l = t.log_abs_diag(s, 0, d, rows)?;
            let sq = t.square(x);
            let r = t.row_sum(sq);
            t.mul(l, r)
        })),
        ("external", 0, Box::new(|t: &mut Tape<'_>, _s, x| {
            let v = t.value(x).clone();
            let vals = v.iter_rows().map(|r| r.iter().map(|a| a.sin()).sum()).collect();
            let g = v.map(f64::cos);
            t.external(x, vals, g)
        })),
    ]
}

fn store_for(name: &str, len: usize, d: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut st = ParamStore::new(0);
    if len > 0 {
        st.alloc("p", len);
    }
    randomize(&mut st, rng);
    if name.starts_with("tri_solve_upper") || name.starts_with("log_abs_diag") || name.starts_with("tri_mul_upper") {
        // keep U well conditioned
        for i in 0..d {
            let k = Triangle::Upper.packed_index(d, i, i);
            let v = st.values()[k];
            st.values_mut()[k] = v.signum() * (1.0 + v.abs());
        }
    }
    if name == "layer_norm" {
        for v in &mut st.values_mut()[..d] {
            *v += 1.0;
        }
    }
    st
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(d in 2usize..6, rows in 1usize..5, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, len, prog) in op_programs(d) {
            let store = store_for(name, len, d, &mut rng);
            let mut x = random_matrix(rows, d, &mut rng);
            if name == "relu" || name == "clamp" || name == "min" {
                // stay away from kinks
                x = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
                if name == "clamp" {
                    x = x.map(|v| if (v + 0.9).abs() < 0.05 || (v - 0.8).abs() < 0.05 { v + 0.15 } else { v });
                }
            }
            if name == "layer_norm" {
                // near-zero row variance puts huge curvature inside the stencil
                let cols = x.cols();
                x = Matrix::from_vec(rows, cols, x.as_slice().iter().enumerate().map(|(i, v)| 0.1 * v + 0.5 * (i % cols) as f64).collect());
            }
            let (ep, ex) = gradient_error(&store, &x, prog.as_ref(), seed ^ 7);
            prop_assert!(ep < FD_TOL, "{name}: param error {ep}");
            prop_assert!(ex < FD_TOL, "{name}: input error {ex}");
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences(
        in_dim in 1usize..4,
        hidden in proptest::collection::vec(1usize..7, 0..3),
        out_dim in 1usize..3,
        layernorm in any::<bool>(),
        act in 0usize..2,
        seed in 0u64..10_000,
    ) {
        let activation = [Activation::Gelu, Activation::Tanh][act];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        let spec = MlpSpec { in_dim, hidden_dims: hidden, out_dim, layernorm, activation };
        let mlp = Mlp::build(spec, "m", &mut store, OutputInit::He, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let x = random_matrix(3, in_dim, &mut rng);
        let prog: Box<Program> = Box::new(move |t: &mut Tape<'_>, s, x| mlp.forward(t, s, x));
        let (ep, ex) = gradient_error(&store, &x, prog.as_ref(), seed);
        prop_assert!(ep < FD_TOL, "param error {ep}");
        prop_assert!(ex < FD_TOL, "input error {ex}");
    }

    #[test]
    fn layer_norm_standardizes(n in 2usize..40, rows in 1usize..6, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(0);
        let g = store.alloc("g", n);
        store.alloc("b", n);
        store.values_mut()[g..g + n].iter_mut().for_each(|v| *v = 1.0);
        let scale = rng.random_range(0.1..100.0);
        let x = random_matrix(rows, n, &mut rng).map(|v| v * scale + 3.0);
        let out = run(&store, &x, &move |t: &mut Tape<'_>, s, x| t.layer_norm(x, s, 0, n));
        for r in out.iter_rows() {
            let mean = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9, "mean {mean}");
            prop_assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn mlp_slices_partition_the_store(
        dims in proptest::collection::vec(1usize..9, 2..5),
        layernorm in any::<bool>(),
    ) {
        let mut store = ParamStore::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = MlpSpec {
            in_dim: dims[0],
            hidden_dims: dims[1..dims.len() - 1].to_vec(),
            out_dim: dims[dims.len() - 1],
            layernorm,
            activation: Activation::Gelu,
        };
        let count = spec.param_count();
        Mlp::build(spec, "a", &mut store, OutputInit::He, &mut rng).unwrap();
        prop_assert_eq!(store.len(), count);
        let mut covered = vec![0u8; store.len()];
        for s in store.slices() {
            for i in s.range() {
                covered[i] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
    }
}
