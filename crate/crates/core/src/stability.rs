//! Routing-stability regularization: an EMA shadow of the token-weighting
//! parameters, reference routing recomputed from it, and the KL penalty.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::routing::{token_logits, token_weights, RoutingState, WeightingVars};
use crate::tensor::Tensor;

/// Lower clamp applied inside every logarithm of the KL term.
pub const LOG_FLOOR: f64 = 1e-12;

/// Checkpoint path prefix for shadow tensors.
pub const EMA_PREFIX: &str = "ema.";

/// Exponential moving average of `{W_Q, W_K, W_E}` over all routed sites.
/// Never trained and never on a gradient path.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    beta: f64,
    step: u64,
    entries: BTreeMap<ParamId, Tensor>,
}

impl EmaShadow {
    /// Shadow initialized as an exact copy of the tracked live parameters.
    pub fn init_from(store: &ParamStore, tracked: &[ParamId], beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Invalid(format!(
                "EMA momentum must lie in [0, 1), got {beta}"
            )));
        }
        let entries = tracked
            .iter()
            .map(|&id| (id, store.value(id).clone()))
            .collect();
        Ok(Self {
            beta,
            step: 0,
            entries,
        })
    }

    /// A shadow with nothing tracked yet; [`EmaShadow::get`] fails on it.
    pub fn empty(beta: f64) -> Self {
        Self {
            beta,
            step: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of updates applied since initialization.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_initialized(&self) -> bool {
        !self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        self.entries.get(&id).ok_or(Error::UninitializedShadow)
    }

    /// Overwrites one shadow tensor (tests and checkpoint restore).
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(&id)
            .ok_or(Error::UninitializedShadow)?;
        if !slot.same_shape(&value) {
            return Err(Error::Shape {
                op: "EmaShadow::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// `θ̄ ← β θ̄ + (1 − β) θ` for every tracked parameter.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        for (&id, shadow) in &self.entries {
            if !shadow.same_shape(live.value(id)) {
                return Err(Error::Shape {
                    op: "ema_update",
                    lhs: shadow.shape().to_vec(),
                    rhs: live.value(id).shape().to_vec(),
                });
            }
        }
        let (b, c) = (self.beta, 1.0 - self.beta);
        for (&id, shadow) in &mut self.entries {
            for (s, &t) in shadow.data_mut().iter_mut().zip(live.value(id).data()) {
                *s = b * *s + c * t;
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Shadow tensors keyed `ema.<live path>`, plus the step counter under `ema.__step`.
    pub fn records(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .entries
            .iter()
            .map(|(&id, t)| (format!("{EMA_PREFIX}{}", store.name(id)), t.clone()))
            .collect();
        out.insert(
            format!("{EMA_PREFIX}__step"),
            Tensor::scalar(self.step as f64),
        );
        out
    }

    pub fn load_records(
        &mut self,
        store: &ParamStore,
        records: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (path, t) in records {
            let Some(live) = path.strip_prefix(EMA_PREFIX) else {
                continue;
            };
            if live == "__step" {
                self.step = t.item() as u64;
                continue;
            }
            let id = store.id(live)?;
            self.entries.insert(id, t.clone());
        }
        Ok(())
    }
}

/// Reference token weights `s̄` from the shadow over the live subset.
///
/// `h` and `x_text` are detached first; the result is a constant.
pub fn reference_weights(
    tape: &mut Tape,
    shadow: &EmaShadow,
    state: &RoutingState,
    h: Var,
    x_text: Var,
    mask: &[bool],
) -> Result<Var> {
    let vars = WeightingVars {
        w_q: tape.constant(shadow.get(state.w_q)?.clone()),
        w_k: tape.constant(shadow.get(state.w_k)?.clone()),
        w_e: tape.constant(shadow.get(state.w_e)?.clone()),
    };
    let h = tape.detach(h);
    let x = tape.detach(x_text);
    let z = token_logits(tape, vars, h, x)?;
    let s_bar = token_weights(tape, z, mask)?;
    Ok(tape.detach(s_bar))
}

/// `(1/L) Σ_l KL(s̄_l ‖ s_l)` over the subset columns, with `s̄` treated as a constant.
pub fn reg_loss(
    tape: &mut Tape,
    s_bar: Var,
    s: Var,
    mask_bar: &[bool],
    mask: &[bool],
) -> Result<Var> {
    if mask_bar != mask {
        return Err(Error::Invalid(
            "reference and live routing use different expert subsets".into(),
        ));
    }
    let (tb, ts) = (tape.value(s_bar), tape.value(s));
    if !tb.same_shape(ts) || ts.cols() != mask.len() {
        return Err(Error::Shape {
            op: "reg_loss",
            lhs: tb.shape().to_vec(),
            rhs: ts.shape().to_vec(),
        });
    }
    let tokens = ts.rows() as f64;
    let entropy_term: f64 = tb.data().iter().map(|&a| a * a.max(LOG_FLOOR).ln()).sum();
    let s_bar = tape.detach(s_bar);
    let log_s = tape.log_clamped(s, LOG_FLOOR);
    let cross = tape.mul(s_bar, log_s)?;
    let cross = tape.sum(cross);
    let neg = tape.scale(cross, -1.0);
    let kl = tape.add_scalar(neg, entropy_term);
    Ok(tape.scale(kl, 1.0 / tokens))
}

/// Plain-value KL divergence `Σ_j a_j ln(a_j / b_j)` with the same clamp.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    let ent: f64 = a.iter().map(|&x| x * x.max(LOG_FLOOR).ln()).sum();
    let cross: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * y.max(LOG_FLOOR).ln())
        .sum();
    -cross + ent
}

/// `L + λ·L_reg`. With `λ = 0` or no regularizer the task loss is returned as is.
pub fn total_loss(tape: &mut Tape, task: Var, reg: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!(
            "loss weight must be >= 0, got {lambda}"
        )));
    }
    match reg {
        Some(reg) if lambda != 0.0 => {
            let weighted = tape.scale(reg, lambda);
            tape.add(task, weighted)
        }
        _ => Ok(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::subset_mask;

    #[test]
    fn beta_zero_copies_live() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::row(vec![1.0, 2.0]), true)
            .unwrap();
        let mut sh = EmaShadow::init_from(&store, &[id], 0.0).unwrap();
        store.set_value(id, Tensor::row(vec![-3.0, 0.125])).unwrap();
        sh.update(&store).unwrap();
        assert_eq!(sh.get(id).unwrap(), store.value(id));
        assert_eq!(sh.step(), 1);
    }

    #[test]
    fn rejects_bad_momentum_and_uninitialized_access() {
        let store = ParamStore::new();
        assert!(EmaShadow::init_from(&store, &[], 1.0).is_err());
        assert!(EmaShadow::init_from(&store, &[], -0.1).is_err());
        let sh = EmaShadow::empty(0.99);
        assert!(matches!(
            sh.get(ParamId(0)),
            Err(Error::UninitializedShadow)
        ));
    }

    #[test]
    fn one_update_moves_one_percent() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::row(vec![0.0, 10.0]), true)
            .unwrap();
        let mut sh = EmaShadow::init_from(&store, &[id], 0.99).unwrap();
        store.set_value(id, Tensor::row(vec![1.0, 20.0])).unwrap();
        sh.update(&store).unwrap();
        let v = sh.get(id).unwrap().data();
        assert!((v[0] - 0.01).abs() < 1e-15);
        assert!((v[1] - 10.1).abs() < 1e-13);
    }

    #[test]
    fn kl_hand_case() {
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expect).abs() < 1e-15);
        assert!((kl - 0.5108).abs() < 1e-4);

        let mut tape = Tape::new();
        let sb = tape.constant(Tensor::row(vec![0.5, 0.5]));
        let s = tape.variable(Tensor::row(vec![0.9, 0.1]));
        let m = [true, true];
        let r = reg_loss(&mut tape, sb, s, &m, &m).unwrap();
        assert!((tape.value(r).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_identity_and_token_averaging() {
        let mut tape = Tape::new();
        let row = vec![0.2, 0.0, 0.8];
        let m = subset_mask(3, &[0, 2]);
        let s = tape.variable(Tensor::from_rows(&[row.clone(), row.clone()]).unwrap());
        let zero = reg_loss(&mut tape, s, s, &m, &m).unwrap();
        assert_eq!(tape.value(zero).item(), 0.0);

        let one_b = tape.constant(Tensor::row(vec![0.6, 0.0, 0.4]));
        let one_s = tape.variable(Tensor::row(row.clone()));
        let single = reg_loss(&mut tape, one_b, one_s, &m, &m).unwrap();
        let two_b = tape.constant(Tensor::from_rows(&vec![vec![0.6, 0.0, 0.4]; 2]).unwrap());
        let two_s = tape.variable(Tensor::from_rows(&[row.clone(), row]).unwrap());
        let double = reg_loss(&mut tape, two_b, two_s, &m, &m).unwrap();
        assert!((tape.value(single).item() - tape.value(double).item()).abs() < 1e-15);

        assert!(reg_loss(&mut tape, one_b, one_s, &m, &[true, true, false]).is_err());
    }

    #[test]
    fn reg_gradient_flows_only_into_live_weights() {
        let mut tape = Tape::new();
        let m = [true, true];
        let sb = tape.variable(Tensor::row(vec![0.3, 0.7]));
        let s = tape.variable(Tensor::row(vec![0.6, 0.4]));
        let r = reg_loss(&mut tape, sb, s, &m, &m).unwrap();
        let g = tape.backward(r).unwrap();
        assert!(g.wrt(sb).is_none());
        let gs = g.wrt(s).unwrap().data();
        assert!((gs[0] + 0.3 / 0.6).abs() < 1e-15);
        assert!((gs[1] + 0.7 / 0.4).abs() < 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::scalar(2.0));
        let r = tape.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut tape, l, Some(r), 0.1).unwrap();
        assert!((tape.value(t).item() - 2.05).abs() < 1e-15);
        let t0 = total_loss(&mut tape, l, Some(r), 0.0).unwrap();
        assert_eq!(tape.value(t0).item(), 2.0);
        assert!(total_loss(&mut tape, l, Some(r), -1.0).is_err());
    }
}
