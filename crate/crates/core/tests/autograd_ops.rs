//! Every tape operation against central finite differences.

mod common;

use strlora::autograd::{Tape, Var};
use strlora::gradcheck::{compare, finite_diff_grad};
use strlora::params::ParamStore;
use strlora::{Result, Tensor};

use common::{normal, rng};

/// Builds `Σ_ij w_ij · op(inputs)_ij` with fixed random `w`, so every output
/// entry contributes with a distinct weight.
fn check(name: &str, shapes: &[(usize, usize)], op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let mut r = rng(name.len() as u64 * 7919);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            store
                .insert(format!("x{i}"), normal(&mut r, a, b, 1.0), true)
                .unwrap()
        })
        .collect();
    let probe_seed = r.gen_seed();
    let eval = |store: &ParamStore, tape: &mut Tape| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = op(tape, &vars)?;
        let shape = tape.value(out).shape();
        let w = tape.constant(normal(&mut rng(probe_seed), shape[0], shape[1], 1.0));
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    };
    let mut tape = Tape::new();
    let root = eval(&store, &mut tape).unwrap();
    tape.backward_into(root, &mut store).unwrap();
    let numeric = finite_diff_grad(
        |s| {
            let mut t = Tape::new();
            let root = eval(s, &mut t)?;
            Ok(t.value(root).item())
        },
        &mut store,
        1e-6,
    )
    .unwrap();
    for d in compare(&store, &numeric) {
        assert!(
            d.max_rel_err < 1e-6,
            "{name}: {} rel err {:e} abs {:e}",
            d.path,
            d.max_rel_err,
            d.max_abs_err
        );
    }
}

trait GenSeed {
    fn gen_seed(&mut self) -> u64;
}

impl GenSeed for rand_chacha::ChaCha8Rng {
    fn gen_seed(&mut self) -> u64 {
        rand::Rng::gen(self)
    }
}

#[test]
fn linear_algebra() {
    check("matmul", &[(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]));
    check("matmul_t", &[(3, 4), (5, 4)], |t, v| t.matmul_t(v[0], v[1]));
}

#[test]
fn elementwise_and_broadcast() {
    check("add", &[(2, 3), (2, 3)], |t, v| t.add(v[0], v[1]));
    check("sub", &[(2, 3), (2, 3)], |t, v| t.sub(v[0], v[1]));
    check("mul", &[(2, 3), (2, 3)], |t, v| t.mul(v[0], v[1]));
    check("mul_self", &[(2, 3)], |t, v| t.mul(v[0], v[0]));
    check("add_row", &[(3, 4), (1, 4)], |t, v| t.add_row(v[0], v[1]));
    check("mul_row", &[(3, 4), (1, 4)], |t, v| t.mul_row(v[0], v[1]));
    check("scale_rows", &[(3, 4), (3, 1)], |t, v| {
        t.scale_rows(v[0], v[1])
    });
    check("scale", &[(2, 2)], |t, v| Ok(t.scale(v[0], -1.7)));
    check("add_scalar", &[(2, 2)], |t, v| Ok(t.add_scalar(v[0], 0.3)));
}

#[test]
fn reductions() {
    check("sum", &[(3, 2)], |t, v| Ok(t.sum(v[0])));
    check("mean", &[(3, 2)], |t, v| Ok(t.mean(v[0])));
    check("mean_rows", &[(3, 5)], |t, v| Ok(t.mean_rows(v[0])));
}

#[test]
fn softmax_family() {
    check("softmax_rows", &[(3, 4)], |t, v| t.softmax_rows(v[0]));
    check("masked_softmax_rows", &[(3, 4)], |t, v| {
        t.masked_softmax_rows(v[0], &[true, false, true, true])
    });
    check("cross_entropy", &[(1, 5)], |t, v| t.cross_entropy(v[0], 2));
}

#[test]
fn nonlinearities() {
    check("layer_norm", &[(3, 6)], |t, v| Ok(t.layer_norm(v[0])));
    check("gelu", &[(3, 4)], |t, v| Ok(t.gelu(v[0])));
    check("log_clamped", &[(2, 3)], |t, v| {
        let s = t.softmax_rows(v[0])?;
        Ok(t.log_clamped(s, 1e-12))
    });
}

#[test]
fn slicing_and_concat() {
    check("slice_cols", &[(3, 5)], |t, v| t.slice_cols(v[0], 1, 3));
    check("concat_cols", &[(3, 2), (3, 3)], |t, v| {
        t.concat_cols(&[v[0], v[1]])
    });
    check("concat_rows", &[(2, 3), (1, 3)], |t, v| {
        t.concat_rows(&[v[0], v[1]])
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut store = ParamStore::new();
    let id = store
        .insert("x", Tensor::row(vec![1.5, -2.0]), true)
        .unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id);
    let d = tape.detach(x);
    let prod = tape.mul(x, d).unwrap();
    let root = tape.sum(prod);
    tape.backward_into(root, &mut store).unwrap();
    // Only the live factor is differentiated: ∂/∂x Σ x·detach(x) = x.
    assert_eq!(store.grad(id).unwrap().data(), &[1.5, -2.0]);
}
