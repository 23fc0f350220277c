//! Central-difference checks of every op, every connector and the whole model.

mod common;

use align_core::connectors::ConnectorKind;
use align_core::tensor::*;
use common::*;

fn check(name: &str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>) {
    let r = grad_check(f, &inputs, STEP).unwrap();
    assert!(r.max_rel_error <= GRAD_TOL, "{name}: {r:?}");
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

#[test]
fn every_op_matches_central_differences() {
    let w = randn(&[4, 3], 100);
    let w2 = randn(&[4, 5], 101);
    check("matmul", vec![randn(&[4, 3], 1), randn(&[3, 5], 2)], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, &w2)
    });
    check("matmul_nt", vec![randn(&[4, 3], 3), randn(&[5, 3], 4)], |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        weighted_sum(g, y, &w2)
    });
    check("linear", vec![randn(&[4, 3], 5), randn(&[5, 3], 6)], |g, v| {
        let y = g.linear(v[0], v[1])?;
        weighted_sum(g, y, &w2)
    });
    check("add / mul / scale", vec![randn(&[4, 3], 7), randn(&[4, 3], 8)], |g, v| {
        let s = g.add(v[0], v[1])?;
        let p = g.mul(s, v[0])?;
        let y = g.scale(p, 0.7)?;
        weighted_sum(g, y, &w)
    });
    check("add_row", vec![randn(&[4, 3], 9), randn(&[3], 10)], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted_sum(g, y, &w)
    });
    check("relu", vec![randn(&[4, 3], 11)], |g, v| {
        let y = g.relu(v[0])?;
        weighted_sum(g, y, &w)
    });
    check("gelu", vec![randn(&[4, 3], 12)], |g, v| {
        let y = g.gelu(v[0])?;
        weighted_sum(g, y, &w)
    });
    check("layernorm", vec![randn(&[4, 3], 13), randn(&[3], 14), randn(&[3], 15)], |g, v| {
        let y = g.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, &w)
    });
    check("softmax", vec![randn(&[4, 3], 16)], |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, &w)
    });
    let sq = randn(&[4, 4], 102);
    check("causal_softmax", vec![randn(&[4, 4], 17)], |g, v| {
        let y = g.causal_softmax(v[0])?;
        weighted_sum(g, y, &sq)
    });
    check("cross_entropy", vec![randn(&[4, 5], 18)], |g, v| {
        g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
    });
    check("concat / slice / reshape", vec![randn(&[2, 3], 19), randn(&[2, 3], 20)], |g, v| {
        let c = g.concat_rows(&[v[0], v[1]])?;
        let s = g.slice_rows(c, 1, 3)?;
        let r = g.reshape(s, vec![3, 2])?;
        let y = g.mul(r, r)?;
        g.sum(y)
    });
    let gw = randn(&[5, 3], 103);
    check("gather", vec![randn(&[4, 3], 21)], |g, v| {
        let y = g.gather(v[0], &[3, 0, 3, 1, 2])?;
        let y = g.mul(y, y)?;
        weighted_sum(g, y, &gw)
    });
}

#[test]
fn every_connector_forward() {
    for kind in ConnectorKind::ALL {
        for seed in 0..3 {
            let r = connector_grad_check(kind, seed);
            assert!(r.max_rel_error <= GRAD_TOL, "{kind} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn full_toy_model() {
    for kind in ConnectorKind::ALL {
        let r = model_grad_check(kind, 3);
        eprintln!("{kind}: {r:?}");
        assert!(r.coordinates > 1000);
        assert!(r.tensor_rel_error <= GRAD_TOL, "{kind}: {r:?}");
        // single coordinates with near-zero gradient are bounded by rounding
        assert!(r.coordinate_rel_error <= 1e-4, "{kind}: {r:?}");
    }
}
