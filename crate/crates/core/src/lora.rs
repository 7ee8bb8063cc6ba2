//! LoRA expert banks and the routed adapted forward pass.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Tolerance on `Σ_{j∈S} s_j = 1` accepted by [`adapted_forward`].
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// A frozen base projection `W0` (`d_out×d_in`) plus `N` low-rank experts
/// `(A_j: r×d_in, B_j: d_out×r)` living in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub n_experts: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub base: ParamId,
    pub down: Vec<ParamId>,
    pub up: Vec<ParamId>,
}

/// Registers a bank under `prefix` (`<prefix>.W0`, `<prefix>.expert.<j>.{A,B}`).
///
/// `A_j ~ uniform(−1/√d_in, 1/√d_in)`, `B_j = 0`, so a fresh bank is a no-op
/// on top of `W0`.
pub fn init_expert_bank(
    store: &mut ParamStore,
    prefix: &str,
    n_experts: usize,
    rank: usize,
    base: Tensor,
    seed: u64,
) -> Result<ExpertBank> {
    let (d_out, d_in) = (base.rows(), base.cols());
    if n_experts == 0 {
        return Err(Error::Invalid(
            "expert bank needs at least one expert".into(),
        ));
    }
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(Error::Invalid(format!(
            "LoRA rank {rank} must satisfy 1 <= r < min(d_in, d_out) = {}",
            d_in.min(d_out)
        )));
    }
    let base = store.insert(format!("{prefix}.W0"), base, false)?;
    let mut down = Vec::with_capacity(n_experts);
    let mut up = Vec::with_capacity(n_experts);
    for j in 0..n_experts {
        let a_path = format!("{prefix}.expert.{j}.A");
        let mut r = rng::rng_for(seed, &a_path);
        down.push(store.insert(&a_path, rng::kaiming_uniform(&mut r, rank, d_in), true)?);
        up.push(store.insert(
            format!("{prefix}.expert.{j}.B"),
            Tensor::zeros(d_out, rank),
            true,
        )?);
    }
    Ok(ExpertBank {
        n_experts,
        rank,
        d_in,
        d_out,
        base,
        down,
        up,
    })
}

/// Same as [`init_expert_bank`] with a caller-owned generator for `W0`.
pub fn init_expert_bank_with_base(
    store: &mut ParamStore,
    prefix: &str,
    n_experts: usize,
    rank: usize,
    d_in: usize,
    d_out: usize,
    base_rng: &mut impl Rng,
    seed: u64,
) -> Result<ExpertBank> {
    let base = rng::kaiming_uniform(base_rng, d_out, d_in);
    init_expert_bank(store, prefix, n_experts, rank, base, seed)
}

impl ExpertBank {
    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.n_experts {
            return Err(Error::OutOfRange {
                what: "expert index",
                index: j,
                len: self.n_experts,
            });
        }
        Ok(())
    }

    /// `B_j A_j h` for every row of `h` (`L×d_in → L×d_out`).
    pub fn lora_delta(&self, tape: &mut Tape, store: &ParamStore, j: usize, h: Var) -> Result<Var> {
        self.check_index(j)?;
        let a = tape.param(store, self.down[j]);
        let b = tape.param(store, self.up[j]);
        let low = tape.matmul_t(h, a)?;
        tape.matmul_t(low, b)
    }

    /// `W0 h` for every row of `h`.
    pub fn base_forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let w0 = tape.param(store, self.base);
        tape.matmul_t(h, w0)
    }

    /// Checks that `weights` (`L×N`) is a valid routing for `subset`: rows
    /// sum to 1 over `S` within [`WEIGHT_SUM_TOL`] and are 0 elsewhere.
    pub fn check_weights(&self, weights: &Tensor, tokens: usize, subset: &[usize]) -> Result<()> {
        if weights.rows() != tokens || weights.cols() != self.n_experts {
            return Err(Error::Shape {
                op: "adapted_forward",
                lhs: vec![tokens, self.n_experts],
                rhs: weights.shape().to_vec(),
            });
        }
        if subset.is_empty() {
            return Err(Error::EmptySubset);
        }
        let mut in_subset = vec![false; self.n_experts];
        for &j in subset {
            self.check_index(j)?;
            in_subset[j] = true;
        }
        for r in 0..tokens {
            let row = weights.row_slice(r);
            let total: f64 = subset.iter().map(|&j| row[j]).sum();
            let off = row.iter().zip(&in_subset).any(|(&v, &m)| !m && v != 0.0);
            if off || (total - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::UnnormalizedWeights(total));
            }
        }
        Ok(())
    }

    /// `ĥ = W0 h + Σ_{j∈S} s_j · B_j A_j h`, row by row.
    ///
    /// `weights` is `L×N` (one routing row per token of `h`), or `L×1` for a
    /// single-expert bank. Experts outside `subset` are never read, so they
    /// receive no gradient.
    pub fn adapted_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        weights: Var,
        subset: &[usize],
    ) -> Result<Var> {
        let l = tape.value(h).rows();
        self.check_weights(tape.value(weights), l, subset)?;
        self.weighted_sum(tape, store, h, weights, subset)
    }

    /// [`ExpertBank::adapted_forward`] without the normalization check, for
    /// weights that carry a straight-through factor and were validated
    /// before it was applied.
    pub fn weighted_sum(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        weights: Var,
        subset: &[usize],
    ) -> Result<Var> {
        let mut out = self.base_forward(tape, store, h)?;
        let mut ordered = subset.to_vec();
        ordered.sort_unstable();
        for j in ordered {
            let delta = self.lora_delta(tape, store, j, h)?;
            let wj = if self.n_experts == 1 {
                weights
            } else {
                tape.slice_cols(weights, j, 1)?
            };
            let scaled = tape.scale_rows(delta, wj)?;
            out = tape.add(out, scaled)?;
        }
        Ok(out)
    }
}
