//! Two-stage expert routing.
//!
//! Stage one picks a sample-level subset `S` of `K` experts from the pooled
//! instruction embedding: `p = softmax(W_g x_text)`, `S = TopK(p)`.
//! Stage two weights the experts of `S` per token:
//! `z_j = (W_Q h) · ((W_K x_text) ⊙ e_j) / √D`, `s = softmax_S(z)`.
//!
//! Top-K is not differentiable. The weights handed to the experts are
//! `s_j · (1 + p_j − detach(p_j))`: numerically identical to `s`, but the
//! backward pass carries `∂L/∂p` into `W_g`.

use crate::autograd::{masked_softmax, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Router parameters of one adapter site.
#[derive(Clone, Debug)]
pub struct RoutingState {
    pub n_experts: usize,
    pub routing_dim: usize,
    pub d_in: usize,
    pub d_e: usize,
    /// `N×d_e` selection router.
    pub w_g: ParamId,
    /// `D×d_in` token projection.
    pub w_q: ParamId,
    /// `D×d_e` instruction projection.
    pub w_k: ParamId,
    /// `N×D` expert feature vectors, one row per expert.
    pub w_e: ParamId,
}

impl RoutingState {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        n_experts: usize,
        d_in: usize,
        d_e: usize,
        routing_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_experts == 0 || routing_dim == 0 {
            return Err(Error::Invalid("router needs N >= 1 and D >= 1".into()));
        }
        let mut put = |name: &str, f: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> Tensor| {
            let path = format!("{prefix}.router.{name}");
            let mut r = rng::rng_for(seed, &path);
            store.insert(&path, f(&mut r), true)
        };
        let w_g = put("W_g", &|r| rng::kaiming_uniform(r, n_experts, d_e))?;
        let w_q = put("W_Q", &|r| rng::kaiming_uniform(r, routing_dim, d_in))?;
        let w_k = put("W_K", &|r| rng::kaiming_uniform(r, routing_dim, d_e))?;
        let w_e = put("W_E", &|r| rng::unit_rows(r, n_experts, routing_dim))?;
        Ok(Self {
            n_experts,
            routing_dim,
            d_in,
            d_e,
            w_g,
            w_q,
            w_k,
            w_e,
        })
    }

    /// The token-weighting parameters `(W_Q, W_K, W_E)`, the set tracked by the EMA shadow.
    pub fn weighting_params(&self) -> [ParamId; 3] {
        [self.w_q, self.w_k, self.w_e]
    }
}

/// Dense per-token softmax router over all experts (the MoELoRA-style baseline).
#[derive(Clone, Debug)]
pub struct DenseRouter {
    pub n_experts: usize,
    /// `N×d_in`.
    pub w_r: ParamId,
}

impl DenseRouter {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        n_experts: usize,
        d_in: usize,
        seed: u64,
    ) -> Result<Self> {
        let path = format!("{prefix}.router.W_r");
        let mut r = rng::rng_for(seed, &path);
        let w_r = store.insert(&path, rng::kaiming_uniform(&mut r, n_experts, d_in), true)?;
        Ok(Self { n_experts, w_r })
    }

    /// `L×N` per-token weights.
    pub fn route(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let w = tape.param(store, self.w_r);
        let logits = tape.matmul_t(h, w)?;
        tape.softmax_rows(logits)
    }
}

/// Mean over instruction tokens.
pub fn pool_text(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = tokens.first().ok_or(Error::EmptyInstruction)?;
    let mut acc = vec![0.0; first.len()];
    for t in tokens {
        if t.len() != acc.len() {
            return Err(Error::Shape {
                op: "pool_text",
                lhs: vec![acc.len()],
                rhs: vec![t.len()],
            });
        }
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
    }
    let n = tokens.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// [`pool_text`] on the tape: `L_text×d_e → 1×d_e`.
pub fn pool_text_var(tape: &mut Tape, tokens: Var) -> Var {
    tape.mean_rows(tokens)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::Invalid(format!(
            "top-k needs 1 <= K <= N, got K={k}, N={}",
            p.len()
        )));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

pub fn subset_mask(n: usize, subset: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &j in subset {
        m[j] = true;
    }
    m
}

/// Output of the selection stage.
pub struct Selection {
    /// `1×N` router logits `W_g x_text`.
    pub logits: Var,
    /// `1×N` distribution `p`.
    pub p: Var,
    pub subset: Vec<usize>,
}

pub fn select_experts(
    tape: &mut Tape,
    store: &ParamStore,
    state: &RoutingState,
    x_text: Var,
    k: usize,
) -> Result<Selection> {
    if k == 0 || k > state.n_experts {
        return Err(Error::Invalid(format!(
            "K={k} out of range 1..={}",
            state.n_experts
        )));
    }
    let w_g = tape.param(store, state.w_g);
    let logits = tape.matmul_t(x_text, w_g)?;
    let p = tape.softmax_rows(logits)?;
    let subset = top_k(tape.value(p).data(), k)?;
    Ok(Selection { logits, p, subset })
}

/// Token-weighting parameters as tape variables, so the live router and its
/// EMA shadow share one code path.
#[derive(Clone, Copy, Debug)]
pub struct WeightingVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_e: Var,
}

impl WeightingVars {
    pub fn live(tape: &mut Tape, store: &ParamStore, state: &RoutingState) -> Self {
        Self {
            w_q: tape.param(store, state.w_q),
            w_k: tape.param(store, state.w_k),
            w_e: tape.param(store, state.w_e),
        }
    }
}

/// `L×N` logits `z_lj = (W_Q h_l) · ((W_K x_text) ⊙ e_j) / √D`.
///
/// Entries for experts outside the subset are computed but always masked by
/// [`token_weights`].
pub fn token_logits(tape: &mut Tape, vars: WeightingVars, h: Var, x_text: Var) -> Result<Var> {
    let d = tape.value(vars.w_q).rows();
    if tape.value(vars.w_k).rows() != d || tape.value(vars.w_e).cols() != d {
        return Err(Error::Shape {
            op: "token_logits",
            lhs: tape.value(vars.w_q).shape().to_vec(),
            rhs: tape.value(vars.w_e).shape().to_vec(),
        });
    }
    let q = tape.matmul_t(h, vars.w_q)?;
    let k = tape.matmul_t(x_text, vars.w_k)?;
    let adapted = tape.mul_row(vars.w_e, k)?;
    let z = tape.matmul_t(q, adapted)?;
    Ok(tape.scale(z, 1.0 / (d as f64).sqrt()))
}

/// Softmax of `z` over the subset columns; zero elsewhere.
pub fn token_weights(tape: &mut Tape, z: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_softmax_rows(z, mask)
}

/// Which routing stages are active at a routed site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteStages {
    pub selection: bool,
    pub token_weighting: bool,
    pub top_k: usize,
}

/// Values frozen at a reference point so that the straight-through surrogate
/// becomes an ordinary smooth function (used by finite-difference audits).
#[derive(Clone, Debug, PartialEq)]
pub struct SitePin {
    pub subset: Vec<usize>,
    /// The detached copy of `p`.
    pub p: Vec<f64>,
}

/// Routing result at one site for one sample.
#[derive(Clone, Debug)]
pub struct Routed {
    /// `L×N` weights fed to [`crate::lora::ExpertBank::adapted_forward`].
    pub weights: Var,
    /// `L×N` token weights `s` before the straight-through factor.
    pub s: Var,
    pub p: Option<Var>,
    pub z: Option<Var>,
    pub subset: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Runs both stages with the straight-through path into `W_g`.
///
/// With only selection active the weights are `p` renormalized over `S`
/// (sample-level gates). With only token weighting active `S` is every expert.
pub fn route_with_straight_through(
    tape: &mut Tape,
    store: &ParamStore,
    state: &RoutingState,
    h: Var,
    x_text: Var,
    stages: RouteStages,
    pin: Option<&SitePin>,
) -> Result<Routed> {
    let n = state.n_experts;
    let l = tape.value(h).rows();
    if !stages.selection && !stages.token_weighting {
        return Err(Error::Invalid(
            "two-stage routing with both stages off; use DenseRouter".into(),
        ));
    }

    let selection = if stages.selection {
        Some(select_experts(tape, store, state, x_text, stages.top_k)?)
    } else {
        None
    };
    let subset: Vec<usize> = match (&selection, pin) {
        (Some(_), Some(pin)) => pin.subset.clone(),
        (Some(sel), None) => sel.subset.clone(),
        (None, _) => (0..n).collect(),
    };
    let mask = subset_mask(n, &subset);

    if stages.token_weighting {
        let vars = WeightingVars::live(tape, store, state);
        let z = token_logits(tape, vars, h, x_text)?;
        let s = token_weights(tape, z, &mask)?;
        let weights = match &selection {
            Some(sel) => {
                let frozen = match pin {
                    Some(pin) => tape.constant(Tensor::row(pin.p.clone())),
                    None => tape.detach(sel.p),
                };
                let diff = tape.sub(sel.p, frozen)?;
                let gate = tape.add_scalar(diff, 1.0);
                tape.mul_row(s, gate)?
            }
            None => s,
        };
        Ok(Routed {
            weights,
            s,
            p: selection.as_ref().map(|sel| sel.p),
            z: Some(z),
            subset,
            mask,
        })
    } else {
        let sel = selection.expect("selection stage active");
        let gates = tape.masked_softmax_rows(sel.logits, &mask)?;
        let ones = tape.constant(Tensor::filled(l, 1, 1.0));
        let s = tape.matmul(ones, gates)?;
        Ok(Routed {
            weights: s,
            s,
            p: Some(sel.p),
            z: None,
            subset,
            mask,
        })
    }
}

/// Plain values of one routing decision.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub p: Option<Vec<f64>>,
    pub subset: Vec<usize>,
    /// `L×N`, zero off the subset.
    pub s: Tensor,
    pub z: Option<Tensor>,
}

impl RoutingDecision {
    pub fn from_routed(tape: &Tape, r: &Routed) -> Self {
        Self {
            p: r.p.map(|p| tape.value(p).data().to_vec()),
            subset: r.subset.clone(),
            s: tape.value(r.s).clone(),
            z: r.z.map(|z| tape.value(z).clone()),
        }
    }

    /// Mean of `s` over tokens.
    pub fn s_mean(&self) -> Vec<f64> {
        let n = self.s.rows() as f64;
        (0..self.s.cols())
            .map(|c| (0..self.s.rows()).map(|r| self.s.get(r, c)).sum::<f64>() / n)
            .collect()
    }

    pub fn pin(&self) -> Option<SitePin> {
        self.p.as_ref().map(|p| SitePin {
            subset: self.subset.clone(),
            p: p.clone(),
        })
    }
}

/// `softmax(logits)` restricted to `subset`, as plain values.
pub fn subset_softmax(logits: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
    masked_softmax(logits, &subset_mask(logits.len(), subset))
}
