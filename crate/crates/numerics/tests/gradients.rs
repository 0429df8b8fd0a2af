//! Every differentiable op checked against central finite differences in f64
//! on randomized small shapes.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlground_numerics::{
    finite_difference_check, Graph, NumericsError, ParamId, ParamStore, SeqLayout, Tensor, Var,
};

const TOL: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn store(rng: &mut ChaCha8Rng, shapes: &[(&str, Vec<usize>)]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = shapes
        .iter()
        .map(|(n, sh)| s.add(*n, random_tensor(rng, sh)).unwrap())
        .collect();
    (s, ids)
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape));
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn check(
    params: &mut ParamStore<f64>,
    f: impl FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, NumericsError>,
) -> f64 {
    let report = finite_difference_check(params, f, 1e-5, 40, 11).unwrap();
    report.max_rel_error
}

#[test]
fn linear_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut s, ids) = store(&mut rng, &[("x", vec![3, 4]), ("w", vec![4, 5]), ("b", vec![5]), ("m", vec![5, 2])]);
    let err = check(&mut s, |p, g| {
        let x = g.param(p, ids[0]);
        let w = g.param(p, ids[1]);
        let b = g.param(p, ids[2]);
        let m = g.param(p, ids[3]);
        let y = g.linear(x, w, Some(b))?;
        let z = g.matmul(y, m)?;
        readout(g, z, 5)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_and_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut s, ids) = store(&mut rng, &[("x", vec![3, 6]), ("g", vec![6]), ("b", vec![6])]);
    let err = check(&mut s, |p, g| {
        let x = g.param(p, ids[0]);
        let gain = g.param(p, ids[1]);
        let bias = g.param(p, ids[2]);
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        let z = g.gelu(y);
        readout(g, z, 6)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gather_concat_reshape_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut s, ids) = store(&mut rng, &[("t", vec![5, 3]), ("u", vec![2, 3])]);
    let err = check(&mut s, |p, g| {
        let t = g.param(p, ids[0]);
        let u = g.param(p, ids[1]);
        let a = g.gather_rows(t, &[vec![0, 2], vec![4], vec![], vec![2, 2, 3]])?;
        let c = g.concat_rows(&[a, u])?;
        let sel = g.select_rows(c, &[5, 0, 1, 3])?;
        let r = g.reshape(sel, &[2, 6])?;
        let sc = g.scale(r, 0.7);
        readout(g, sc, 7)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_cross_entropy_with_soft_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut s, ids) = store(&mut rng, &[("z", vec![3, 4])]);
    let targets = Tensor::new(&[3, 4], vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap();
    let err = check(&mut s, |p, g| {
        let z = g.param(p, ids[0]);
        g.softmax_cross_entropy(z, &targets)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn normalized_nll_over_positive_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut s, ids) = store(&mut rng, &[("z", vec![2, 3])]);
    let targets = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.5]).unwrap();
    let err = check(&mut s, |p, g| {
        let z = g.param(p, ids[0]);
        // squares plus one keep every score positive
        let ones = g.constant(Tensor::full(&[2, 3], 1.0));
        let sq = g.mul(z, z)?;
        let pos = g.add(sq, ones)?;
        g.normalized_nll(pos, &targets)
    });
    assert!(err < TOL, "{err}");
}

fn attention_case(lengths: &[usize], key_valid: Vec<bool>, heads: usize, width: usize, seed: u64) -> f64 {
    let rows: usize = lengths.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, ids) = store(&mut rng, &[("q", vec![rows, width]), ("k", vec![rows, width]), ("v", vec![rows, width])]);
    let layout = Arc::new(SeqLayout::with_key_mask(lengths, key_valid).unwrap());
    check(&mut s, |p, g| {
        let q = g.param(p, ids[0]);
        let k = g.param(p, ids[1]);
        let v = g.param(p, ids[2]);
        let o = g.attention(q, k, v, heads, layout.clone())?;
        let m = g.attention_head_mean(q, k, heads, layout.clone())?;
        let a = readout(g, o, seed + 1)?;
        let b = readout(g, m, seed + 2)?;
        g.add(a, b)
    })
}

#[test]
fn attention_with_padding() {
    let err = attention_case(&[3, 4], vec![true, true, false, true, true, true, false], 2, 4, 9);
    assert!(err < TOL, "{err}");
}

#[test]
fn gather_elems_feeds_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut s, ids) = store(&mut rng, &[("q", vec![4, 4]), ("k", vec![4, 4])]);
    let layout = Arc::new(SeqLayout::from_lengths(&[4]));
    let targets = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
    let err = check(&mut s, |p, g| {
        let q = g.param(p, ids[0]);
        let k = g.param(p, ids[1]);
        let m = g.attention_head_mean(q, k, 2, layout.clone())?;
        // rows 1 and 3 of the 4x4 block, columns 1..4; one padded cell
        let idx = vec![Some(5), Some(6), Some(7), Some(13), Some(14), None];
        let picked = g.gather_elems(m, idx, &[2, 3])?;
        g.normalized_nll(picked, &targets)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn dropout_mask_is_differentiated_as_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut s, ids) = store(&mut rng, &[("x", vec![4, 5])]);
    let err = check(&mut s, |p, g| {
        let x = g.param(p, ids[0]);
        // Same seed every evaluation, so the mask is identical across probes.
        let mut drng = ChaCha8Rng::seed_from_u64(99);
        let d = g.dropout(x, 0.3, &mut drng);
        readout(g, d, 3)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let mut s = ParamStore::<f64>::new();
    let id = s.add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.param(&s, id);
        let y = g.sum(x);
        g.backward(y).unwrap();
        g.accumulate_param_grads(&mut s);
    }
    assert_eq!(s.tensor(id).grad().unwrap(), &[2.0, 2.0]);
    s.zero_grad();
    assert_eq!(s.tensor(id).grad().unwrap(), &[0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_gradients_on_random_layouts(
        lengths in proptest::collection::vec(1usize..5, 1..4),
        heads in 1usize..3,
        per_head in 1usize..3,
        seed in 0u64..1000,
    ) {
        let rows: usize = lengths.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep at least the first slot of each sequence attendable.
        let mut valid = Vec::with_capacity(rows);
        for &len in &lengths {
            valid.push(true);
            for _ in 1..len {
                valid.push(rng.random_bool(0.75));
            }
        }
        let err = attention_case(&lengths, valid, heads, heads * per_head, seed);
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn linear_layer_norm_chain_on_random_shapes(
        n in 1usize..5,
        d_in in 2usize..6,
        d_out in 3usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut s, ids) = store(&mut rng, &[("x", vec![n, d_in]), ("w", vec![d_in, d_out]), ("b", vec![d_out]), ("g", vec![d_out]), ("c", vec![d_out])]);
        let err = check(&mut s, |p, g| {
            let x = g.param(p, ids[0]);
            let w = g.param(p, ids[1]);
            let b = g.param(p, ids[2]);
            let y = g.linear(x, w, Some(b))?;
            let y = g.gelu(y);
            let gain = g.param(p, ids[3]);
            let bias = g.param(p, ids[4]);
            let z = g.layer_norm(y, gain, bias, 1e-5)?;
            readout(g, z, seed)
        });
        prop_assert!(err < 1e-5, "{}", err);
    }
}
