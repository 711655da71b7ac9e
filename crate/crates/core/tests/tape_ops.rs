use proptest::prelude::*;

use rcp_core::gradcheck::{finite_diff_check, relative_error};
use rcp_core::{Result, Rng, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Contracts `y` against fixed random weights so every output coordinate is checked.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Rng::new(seed ^ 0xABCD).normal_tensor(&y.shape(), 1.0);
    y.mul(&y.tape().constant(w)).map(|z| z.sum())
}

fn away_from_zero(t: Tensor, lo: f64) -> Tensor {
    t.map(|x| if x.abs() < lo { lo.copysign(x) + x } else { x })
}

fn check<F>(seed: u64, params: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let r = finite_diff_check(|t, v| probe(f(t, v)?, seed), params, H).unwrap();
    r.max_rel_error
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    Rng::new(seed).normal_tensor(shape, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_binary(seed in 0u64..1 << 40) {
        let (a, b) = (normal(seed, &[3, 4]), normal(seed + 1, &[3, 4]));
        prop_assert!(check(seed, &[a.clone(), b.clone()], |_, v| v[0].add(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a.clone(), b.clone()], |_, v| v[0].sub(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a, b], |_, v| v[0].mul(&v[1])) <= TOL);
    }

    #[test]
    fn row_and_scalar_broadcasts(seed in 0u64..1 << 40) {
        let (a, r, s) = (normal(seed, &[3, 4]), normal(seed + 1, &[4]), normal(seed + 2, &[]));
        prop_assert!(check(seed, &[a.clone(), r.clone()], |_, v| v[0].add_row(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a.clone(), r.clone()], |_, v| v[0].mul_row(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a.clone(), s.clone()], |_, v| v[0].add_scalar(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a.clone(), s], |_, v| v[0].mul_scalar(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a], |_, v| Ok(v[0].affine(-1.5, 0.25))) <= TOL);
        prop_assert!(check(seed, &[r], |_, v| v[0].broadcast_rows(3)) <= TOL);
    }

    #[test]
    fn matmul_transpose_reshape(seed in 0u64..1 << 40) {
        let (a, b) = (normal(seed, &[4, 5]), normal(seed + 1, &[5, 3]));
        prop_assert!(check(seed, &[a.clone(), b], |_, v| v[0].matmul(&v[1])) <= TOL);
        prop_assert!(check(seed, &[a.clone()], |_, v| Ok(v[0].transpose())) <= TOL);
        prop_assert!(check(seed, &[a], |_, v| v[0].reshape(&[2, 10])) <= TOL);
    }

    #[test]
    fn unary_maps(seed in 0u64..1 << 40) {
        let a = normal(seed, &[3, 3]);
        let pos = a.map(|x| x.abs() + 0.2);
        let nz = away_from_zero(a.clone(), 0.1);
        prop_assert!(check(seed, &[a.clone()], |_, v| Ok(v[0].sigmoid())) <= TOL);
        prop_assert!(check(seed, &[a.clone()], |_, v| Ok(v[0].gelu())) <= TOL);
        prop_assert!(check(seed, &[a.clone()], |_, v| Ok(v[0].exp())) <= TOL);
        prop_assert!(check(seed, &[pos.clone()], |_, v| Ok(v[0].sqrt())) <= TOL);
        prop_assert!(check(seed, &[pos], |_, v| Ok(v[0].log())) <= TOL);
        prop_assert!(check(seed, &[nz.clone()], |_, v| Ok(v[0].abs())) <= TOL);
        prop_assert!(check(seed, &[nz], |_, v| Ok(v[0].recip())) <= TOL);
    }

    #[test]
    fn reductions(seed in 0u64..1 << 40) {
        let a = normal(seed, &[4, 3]);
        let w = normal(seed + 1, &[4]).map(|x| x.abs() + 0.1);
        prop_assert!(check(seed, &[a.clone()], |_, v| Ok(v[0].sum())) <= TOL);
        prop_assert!(check(seed, &[a.clone()], |_, v| Ok(v[0].mean())) <= TOL);
        prop_assert!(check(seed, &[a.clone()], |_, v| v[0].sum_axis(0)) <= TOL);
        prop_assert!(check(seed, &[a.clone()], |_, v| v[0].mean_axis(1)) <= TOL);
        prop_assert!(check(seed, &[a, w], |_, v| v[0].masked_mean_rows(&v[1])) <= TOL);
    }

    #[test]
    fn normalisations(seed in 0u64..1 << 40) {
        let a = normal(seed, &[3, 5]);
        let (g, b) = (normal(seed + 1, &[5]), normal(seed + 2, &[5]));
        let sq = normal(seed + 3, &[4, 4]);
        let km = Rng::new(seed).normal_tensor(&[4], 1.0).map(|x| 0.2 + x.abs().min(1.0));
        prop_assert!(check(seed, &[a.clone(), g, b], |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5)) <= TOL);
        prop_assert!(check(seed, &[a], |_, v| v[0].softmax_lastdim()) <= TOL);
        prop_assert!(check(seed, &[sq.clone()], |_, v| v[0].causal_softmax(None)) <= TOL);
        prop_assert!(check(seed, &[sq, km], |_, v| v[0].causal_softmax(Some(&v[1]))) <= TOL);
    }

    #[test]
    fn structural(seed in 0u64..1 << 40) {
        let (a, b) = (normal(seed, &[3, 2]), normal(seed + 1, &[3, 4]));
        let c = normal(seed + 2, &[2, 2]);
        prop_assert!(check(seed, &[a.clone(), b.clone()], |_, v| Var::concat_cols(&[v[0], v[1]])) <= TOL);
        prop_assert!(check(seed, &[b.clone()], |_, v| v[0].slice_cols(1, 3)) <= TOL);
        prop_assert!(check(seed, &[a.clone(), c], |_, v| Var::concat_rows(&[v[0], v[1]])) <= TOL);
        prop_assert!(check(seed, &[b.clone()], |_, v| v[0].gather_rows(&[2, 0, 2])) <= TOL);
        let mask = [true, false, false, true, false, false, true, false, false, false, true, false];
        prop_assert!(check(seed, &[b], |_, v| v[0].fill_where(&mask, 0.0)) <= TOL);
    }

    #[test]
    fn cross_entropy_and_straight_through(seed in 0u64..1 << 40) {
        let logits = normal(seed, &[3, 5]);
        let targets = [seed as usize % 5, 0, 4];
        let r = finite_diff_check(|_, v| v[0].cross_entropy(&targets), &[logits], H).unwrap();
        prop_assert!(r.max_rel_error <= TOL);
        let x = away_from_zero(normal(seed + 1, &[6]), 0.05);
        prop_assert!(check(seed, &[x], |_, v| v[0].sigmoid().straight_through()) <= TOL);
    }
}

#[test]
fn matmul_4x5_by_5x3_to_1e6() {
    let a = normal(11, &[4, 5]);
    let b = normal(12, &[5, 3]);
    let r = finite_diff_check(|_, v| Ok(v[0].matmul(&v[1])?.sum()), &[a, b], 1e-5).unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let t = Tape::new();
    let s = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).softmax_lastdim().unwrap();
    for (got, want) in s.value().data().iter().zip([0.09003, 0.24473, 0.66524]) {
        assert!((got - want).abs() < 5e-6);
    }
    let s = t.constant(Tensor::vector(vec![0.0, 0.0])).softmax_lastdim().unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
    let s = t.constant(Tensor::vector(vec![0.0, f64::NEG_INFINITY])).softmax_lastdim().unwrap();
    assert_eq!(s.value().data(), &[1.0, 0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1 << 40, rows in 1usize..6, cols in 1usize..8) {
        let t = Tape::new();
        let s = t.constant(Rng::new(seed).normal_tensor(&[rows, cols], 3.0)).softmax_lastdim().unwrap();
        let v = s.value();
        for r in 0..rows {
            prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(v.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn stop_gradient_passes_exactly_one(x in -10.0f64..10.0) {
        let t = Tape::new();
        let p = t.param(Tensor::scalar(x));
        let h = p.mul(&p).unwrap().exp().stop_gradient();
        let g = p.add(&h).unwrap();
        prop_assert_eq!(t.backward(g).unwrap().wrt(p).item(), 1.0);
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient(seed in 0u64..1 << 40) {
        let x = Rng::new(seed).normal_tensor(&[7], 2.0);
        let t = Tape::new();
        let p = t.param(x.clone());
        let y = p.sigmoid();
        let hard = t.backward(y.straight_through().unwrap().sum()).unwrap().wrt(p);
        let soft = t.backward(y.sum()).unwrap().wrt(p);
        prop_assert!(hard.max_abs_diff(&soft) <= 1e-12);
    }
}

#[test]
fn straight_through_forward_thresholds() {
    let t = Tape::new();
    let y = t.constant(Tensor::vector(vec![0.7, 0.3, 0.5])).straight_through().unwrap();
    let v: Vec<f64> = y.value().data().iter().map(|x| x.round()).collect();
    assert_eq!(v, vec![1.0, 0.0, 0.0]);
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
}

#[test]
fn equal_seeds_draw_equal_tensors() {
    let a = Rng::new(5).substream(rcp_core::rng::Purpose::GumbelNoise, 3, 2).logistic_noise(&[64]);
    let b = Rng::new(5).substream(rcp_core::rng::Purpose::GumbelNoise, 3, 2).logistic_noise(&[64]);
    assert_eq!(a, b);
}
