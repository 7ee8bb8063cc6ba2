#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use strlora::autograd::Tape;
use strlora::lora::init_expert_bank;
use strlora::params::ParamStore;
use strlora::routing::{route_with_straight_through, RouteStages, RoutingState};
use strlora::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let d = rand_distr::Normal::new(0.0, std).unwrap();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| r.sample(d)).collect()).unwrap()
}

/// Router with random (not init-scaled) parameters.
pub fn random_router(
    r: &mut ChaCha8Rng,
    n: usize,
    d_in: usize,
    d_e: usize,
    dim: usize,
) -> (ParamStore, RoutingState) {
    let mut store = ParamStore::new();
    let state = RoutingState::init(&mut store, "site", n, d_in, d_e, dim, r.gen()).unwrap();
    store.set_value(state.w_g, normal(r, n, d_e, 1.0)).unwrap();
    store
        .set_value(state.w_q, normal(r, dim, d_in, 1.0))
        .unwrap();
    store
        .set_value(state.w_k, normal(r, dim, d_e, 1.0))
        .unwrap();
    store.set_value(state.w_e, normal(r, n, dim, 1.0)).unwrap();
    (store, state)
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row_slice(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Relabels experts so that new expert `i` is old expert `perm[i]`.
pub fn permuted_router(store: &ParamStore, state: &RoutingState, perm: &[usize]) -> ParamStore {
    let mut out = store.clone();
    out.set_value(state.w_g, permute_rows(store.value(state.w_g), perm))
        .unwrap();
    out.set_value(state.w_e, permute_rows(store.value(state.w_e), perm))
        .unwrap();
    out
}

pub struct Route {
    pub p: Vec<f64>,
    pub subset: Vec<usize>,
    pub s: Tensor,
    pub weights: Tensor,
}

pub fn route(store: &ParamStore, state: &RoutingState, h: &Tensor, x: &Tensor, k: usize) -> Route {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let xv = tape.constant(x.clone());
    let stages = RouteStages {
        selection: true,
        token_weighting: true,
        top_k: k,
    };
    let r = route_with_straight_through(&mut tape, store, state, hv, xv, stages, None).unwrap();
    Route {
        p: tape.value(r.p.unwrap()).data().to_vec(),
        subset: r.subset.clone(),
        s: tape.value(r.s).clone(),
        weights: tape.value(r.weights).clone(),
    }
}

/// All routing invariants for one random case; returns a description of the
/// first violation.
pub fn check_routing_case(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.gen_range(2..=8);
    let k = r.gen_range(1..=n);
    let d_in = r.gen_range(2..=6);
    let d_e = r.gen_range(2..=6);
    let dim = r.gen_range(1..=5);
    let l = r.gen_range(1..=4);
    let (store, state) = random_router(&mut r, n, d_in, d_e, dim);
    let h = normal(&mut r, l, d_in, 1.0);
    let h2 = normal(&mut r, l + 1, d_in, 1.0);
    let x = normal(&mut r, 1, d_e, 1.0);
    let a = route(&store, &state, &h, &x, k);

    let sum_p: f64 = a.p.iter().sum();
    if (sum_p - 1.0).abs() > 1e-9 {
        return Err(format!("sum p = {sum_p}"));
    }
    if a.subset.len() != k {
        return Err(format!("|S| = {} != K = {k}", a.subset.len()));
    }
    for row in 0..l {
        let mut in_s = 0.0;
        for j in 0..n {
            let v = a.s.get(row, j);
            if a.subset.contains(&j) {
                in_s += v;
            } else if v != 0.0 {
                return Err(format!("s[{row}][{j}] = {v} off the subset"));
            }
        }
        if (in_s - 1.0).abs() > 1e-9 {
            return Err(format!("sum over S of s = {in_s}"));
        }
    }
    if a.weights != a.s {
        return Err("straight-through weights differ from s in value".into());
    }

    let b = route(&store, &state, &h2, &x, k);
    if a.p != b.p || a.subset != b.subset {
        return Err("identical x_text gave different (p, S)".into());
    }

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let ps = permuted_router(&store, &state, &perm);
    let c = route(&ps, &state, &h, &x, k);
    for i in 0..n {
        if (c.p[i] - a.p[perm[i]]).abs() > 1e-12 {
            return Err(format!("p not equivariant at {i}"));
        }
        for row in 0..l {
            if (c.s.get(row, i) - a.s.get(row, perm[i])).abs() > 1e-12 {
                return Err(format!("s not equivariant at ({row}, {i})"));
            }
        }
    }
    let mut mapped: Vec<usize> = c.subset.iter().map(|&i| perm[i]).collect();
    let mut orig = a.subset.clone();
    mapped.sort_unstable();
    orig.sort_unstable();
    if mapped != orig {
        return Err("S not equivariant".into());
    }

    // Off-subset experts receive no gradient through the adapted forward.
    let d_out = r.gen_range(d_in.max(2)..=d_in + 3);
    let mut bank_store = store.clone();
    let bank = init_expert_bank(
        &mut bank_store,
        "site",
        n,
        1,
        normal(&mut r, d_out, d_in, 1.0),
        seed,
    )
    .unwrap();
    for j in 0..n {
        bank_store
            .set_value(bank.up[j], normal(&mut r, d_out, 1, 1.0))
            .unwrap();
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let xv = tape.constant(x.clone());
    let stages = RouteStages {
        selection: true,
        token_weighting: true,
        top_k: k,
    };
    let routed =
        route_with_straight_through(&mut tape, &bank_store, &state, hv, xv, stages, None).unwrap();
    let out = bank
        .adapted_forward(&mut tape, &bank_store, hv, routed.weights, &routed.subset)
        .unwrap();
    let sq = tape.mul(out, out).unwrap();
    let loss = tape.sum(sq);
    bank_store.zero_grad();
    tape.backward_into(loss, &mut bank_store).unwrap();
    for j in 0..n {
        let zero = |g: Option<&Tensor>| g.map_or(true, |g| g.data().iter().all(|&v| v == 0.0));
        let off = !routed.subset.contains(&j);
        if off && !(zero(bank_store.grad(bank.down[j])) && zero(bank_store.grad(bank.up[j]))) {
            return Err(format!("off-subset expert {j} received gradient"));
        }
    }
    Ok(())
}

/// Per-chunk `(a, F, AP, AF)` per dataset and `(MAP, MAF)`, evaluated from
/// scratch at every chunk straight from the definitions.
pub type BruteRow = (Vec<Option<(f64, f64, f64, f64)>>, f64, f64);

pub fn brute_force_metrics(acc: &[Vec<Option<f64>>]) -> Vec<BruteRow> {
    let mut rows = Vec::new();
    for t in 0..acc.len() {
        let mut per = Vec::new();
        let (mut sum_ap, mut sum_af, mut seen) = (0.0, 0.0, 0usize);
        for m in 0..acc[t].len() {
            let Some(a_t) = acc[t][m] else {
                per.push(None);
                continue;
            };
            let col: Vec<f64> = (0..=t).filter_map(|j| acc[j][m]).collect();
            let f_at = |i: usize| -> f64 {
                if i == 0 {
                    return 0.0;
                }
                let mut best = 0.0f64;
                for &v in &col[..i] {
                    if v > best {
                        best = v;
                    }
                }
                if best == 0.0 {
                    0.0
                } else {
                    let f = (best - col[i]) / best;
                    if f > 0.0 {
                        f
                    } else {
                        0.0
                    }
                }
            };
            let n = col.len() as f64;
            let ap = col.iter().sum::<f64>() / n;
            let af = (0..col.len()).map(f_at).sum::<f64>() / n;
            let f = f_at(col.len() - 1);
            per.push(Some((a_t, f, ap, af)));
            sum_ap += ap;
            sum_af += af;
            seen += 1;
        }
        rows.push((per, sum_ap / seen as f64, sum_af / seen as f64));
    }
    rows
}

/// Random accuracy matrix: each dataset enters at a random chunk and is
/// evaluated at every later one.
pub fn random_accuracy_matrix(
    r: &mut ChaCha8Rng,
    t_max: usize,
    m_max: usize,
) -> Vec<Vec<Option<f64>>> {
    let t = r.gen_range(1..=t_max);
    let m = r.gen_range(1..=m_max);
    let mut entry: Vec<usize> = (0..m).map(|_| r.gen_range(0..t)).collect();
    entry[0] = 0;
    (0..t)
        .map(|ti| {
            (0..m)
                .map(|mi| {
                    (ti >= entry[mi]).then(|| match r.gen_range(0..6) {
                        0 => 0.0,
                        1 => 1.0,
                        2 => f64::from(r.gen_range(0..=100u32)) / 100.0,
                        _ => r.gen::<f64>(),
                    })
                })
                .collect()
        })
        .collect()
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|x| a[i][x] * b[x][j]).sum();
        }
    }
    out
}

fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// Linear CKA via Gram matrices and the centering matrix `H = I − 11ᵀ/n`:
/// `tr(KHLH) / √(tr(KHKH) tr(LHLH))`, `K = XXᵀ`, `L = YYᵀ`.
pub fn cka_direct(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.rows();
    let xm = to_mat(x);
    let ym = to_mat(y);
    let xt: Mat = (0..x.cols())
        .map(|c| xm.iter().map(|r| r[c]).collect())
        .collect();
    let yt: Mat = (0..y.cols())
        .map(|c| ym.iter().map(|r| r[c]).collect())
        .collect();
    let k = mm(&xm, &xt);
    let l = mm(&ym, &yt);
    let h: Mat = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64)
                .collect()
        })
        .collect();
    let kh = mm(&mm(&h, &k), &h);
    let lh = mm(&mm(&h, &l), &h);
    trace(&mm(&kh, &lh)) / (trace(&mm(&kh, &kh)) * trace(&mm(&lh, &lh))).sqrt()
}

/// Random `p×p` orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(r: &mut ChaCha8Rng, p: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < p {
        let mut v: Vec<f64> = normal(r, 1, p, 1.0).into_data();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    let rows: Vec<Vec<f64>> = (0..p)
        .map(|i| cols.iter().map(|c| c[i]).collect())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Trainer moved away from its init point: noise on every trainable tensor
/// so all experts matter, and a shadow that disagrees with the live router
/// so the regularizer has a non-zero gradient.
pub fn perturbed_trainer(cfg: &strlora::config::RunConfig, seed: u64) -> strlora::trainer::Trainer {
    let mut tr = strlora::trainer::Trainer::new(cfg).unwrap();
    let mut r = rng(seed);
    for id in tr.model.store.trainable_ids() {
        let mut v = tr.model.store.value(id).clone();
        v.add_assign(&normal(&mut r, v.rows(), v.cols(), 0.3));
        tr.model.store.set_value(id, v).unwrap();
    }
    let tracked = tr.model.shadow_tracked_params();
    let mut shadow =
        strlora::stability::EmaShadow::init_from(&tr.model.store, &tracked, cfg.beta).unwrap();
    for &id in &tracked {
        let mut s = tr.model.store.value(id).clone();
        s.add_assign(&normal(&mut r, s.rows(), s.cols(), 0.3));
        shadow.set(id, s).unwrap();
    }
    tr.shadow = shadow;
    tr
}

/// Small two-layer configuration used by the gradient audits.
pub fn audit_config() -> strlora::config::RunConfig {
    let mut cfg = strlora::config::RunConfig::parse(
        "n_layers = 2\nd_hidden = 16\nd_ff = 32\nn_experts = 4\ntop_k = 2\nrouting_dim = 8\nrank = 4\nlambda = 0.1\n",
    )
    .unwrap();
    cfg.seed = 11;
    cfg
}
