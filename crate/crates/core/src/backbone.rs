//! A small frozen pre-norm transformer with routed LoRA adapters at the
//! attention output projection and the FFN up projection of every layer.
//!
//! The base is randomly initialized and frozen. Trainable: experts, routers
//! and the classification head (except in [`RoutingMode::Frozen`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{init_expert_bank, ExpertBank};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::routing::{
    route_with_straight_through, DenseRouter, RouteStages, Routed, RoutingState, SitePin,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub n_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_hidden: 32,
            n_heads: 2,
            d_ff: 64,
            vocab: 64,
            n_classes: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_hidden == 0
            || self.d_ff == 0
            || self.vocab == 0
            || self.n_classes < 2
        {
            return Err(Error::Invalid(format!(
                "degenerate backbone config {self:?}"
            )));
        }
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d_hidden {} not divisible by n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        Ok(())
    }

    /// Instruction embedding width; equal to the hidden width here.
    pub fn d_e(&self) -> usize {
        self.d_hidden
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub routing_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            top_k: 2,
            rank: 16,
            routing_dim: 64,
        }
    }
}

/// How every adapter site routes tokens to experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoutingMode {
    /// Base model only; nothing trains.
    Frozen,
    /// One expert, weight 1 on every token.
    SharedLora,
    /// Dense per-token softmax over all experts from the token hidden state.
    UniformMoe,
    /// Two-stage routing. Both flags off is [`RoutingMode::UniformMoe`].
    StrLora {
        selection: bool,
        token_weighting: bool,
    },
}

impl RoutingMode {
    pub const FULL: RoutingMode = RoutingMode::StrLora {
        selection: true,
        token_weighting: true,
    };

    /// Collapses `StrLora { false, false }` to `UniformMoe`.
    pub fn normalized(self) -> Self {
        match self {
            RoutingMode::StrLora {
                selection: false,
                token_weighting: false,
            } => RoutingMode::UniformMoe,
            m => m,
        }
    }

    /// Whether the mode has token weights an EMA reference can be computed for.
    pub fn has_token_weighting(self) -> bool {
        matches!(
            self.normalized(),
            RoutingMode::StrLora {
                token_weighting: true,
                ..
            }
        )
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.normalized() {
            RoutingMode::Frozen => f.write_str("frozen"),
            RoutingMode::SharedLora => f.write_str("shared_lora"),
            RoutingMode::UniformMoe => f.write_str("uniform_moe"),
            RoutingMode::StrLora {
                selection,
                token_weighting,
            } => match (selection, token_weighting) {
                (true, true) => f.write_str("strlora"),
                (true, false) => f.write_str("strlora_p"),
                _ => f.write_str("strlora_s"),
            },
        }
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "frozen" => RoutingMode::Frozen,
            "shared_lora" => RoutingMode::SharedLora,
            "uniform_moe" => RoutingMode::UniformMoe,
            "strlora" => RoutingMode::FULL,
            "strlora_p" => RoutingMode::StrLora {
                selection: true,
                token_weighting: false,
            },
            "strlora_s" => RoutingMode::StrLora {
                selection: false,
                token_weighting: true,
            },
            other => return Err(Error::Invalid(format!("unknown routing mode {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    AttnOut,
    FfnUp,
}

impl SiteKind {
    pub const ALL: [SiteKind; 2] = [SiteKind::AttnOut, SiteKind::FfnUp];

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::AttnOut => "attn_out",
            SiteKind::FfnUp => "ffn_up",
        }
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One (visual tokens, instruction, label) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub task_id: usize,
    /// `L_vis×d_e`.
    pub visual: Tensor,
    pub instruction: Vec<u32>,
    pub label: usize,
}

impl Sample {
    pub fn new(
        id: u64,
        task_id: usize,
        visual: Tensor,
        instruction: Vec<u32>,
        label: usize,
    ) -> Result<Self> {
        if instruction.is_empty() {
            return Err(Error::EmptyInstruction);
        }
        // Tensor already guarantees L_vis >= 1.
        Ok(Self {
            id,
            task_id,
            visual,
            instruction,
            label,
        })
    }

    /// `L = L_vis + L_text`.
    pub fn seq_len(&self) -> usize {
        self.visual.rows() + self.instruction.len()
    }
}

#[derive(Clone, Debug)]
pub enum SiteRouter {
    /// No adapter at this site.
    None,
    Shared,
    Dense(DenseRouter),
    Routed(RoutingState),
}

#[derive(Clone, Debug)]
pub struct AdapterSite {
    pub layer: usize,
    pub kind: SiteKind,
    pub base: ParamId,
    pub bank: Option<ExpertBank>,
    pub router: SiteRouter,
}

impl AdapterSite {
    pub fn prefix(&self) -> String {
        format!("layer.{}.{}", self.layer, self.kind)
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_down: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub mode: RoutingMode,
    pub store: ParamStore,
    pub sites: Vec<AdapterSite>,
    embed: ParamId,
    layers: Vec<LayerParams>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Per-sample overrides for a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Pinned subsets and detached `p`, one entry per site in [`Model::sites`] order.
    pub pins: Option<&'a [Option<SitePin>]>,
}

/// Routing input and decision at one site.
#[derive(Clone, Debug)]
pub struct SiteForward {
    pub site: usize,
    /// Input rows to the adapted projection (the routed hidden states).
    pub h: Var,
    pub routed: Option<Routed>,
}

pub struct ForwardOutput {
    /// `1×n_classes`.
    pub logits: Var,
    pub x_text: Var,
    pub sites: Vec<SiteForward>,
}

impl Model {
    /// Builds a model. Base weights depend only on `(seed, path)`, so models
    /// in different modes share the same frozen backbone for a given seed.
    pub fn new(
        backbone: BackboneConfig,
        adapter: AdapterConfig,
        mode: RoutingMode,
        seed: u64,
    ) -> Result<Self> {
        backbone.validate()?;
        let mode = mode.normalized();
        let n_experts = if mode == RoutingMode::SharedLora {
            1
        } else {
            adapter.n_experts
        };
        if n_experts == 0 {
            return Err(Error::Invalid("need at least one expert".into()));
        }
        if matches!(
            mode,
            RoutingMode::StrLora {
                selection: true,
                ..
            }
        ) && (adapter.top_k == 0 || adapter.top_k > n_experts)
        {
            return Err(Error::Invalid(format!(
                "need 1 <= K <= N, got K={} N={}",
                adapter.top_k, adapter.n_experts
            )));
        }
        let d = backbone.d_hidden;
        let mut store = ParamStore::new();
        let frozen = |store: &mut ParamStore, path: String, rows: usize, cols: usize| {
            let mut r = rng::rng_for(seed, &path);
            store.insert(path, rng::kaiming_uniform(&mut r, rows, cols), false)
        };

        let embed = {
            let path = "embed.tokens".to_string();
            let mut r = rng::rng_for(seed, &path);
            store.insert(path, rng::normal(&mut r, backbone.vocab, d, 1.0), false)?
        };

        let mut layers = Vec::new();
        let mut sites = Vec::new();
        for i in 0..backbone.n_layers {
            let w_q = frozen(&mut store, format!("layer.{i}.attn.W_q"), d, d)?;
            let w_k = frozen(&mut store, format!("layer.{i}.attn.W_k"), d, d)?;
            let w_v = frozen(&mut store, format!("layer.{i}.attn.W_v"), d, d)?;
            let w_down = frozen(
                &mut store,
                format!("layer.{i}.ffn.W_down"),
                d,
                backbone.d_ff,
            )?;
            layers.push(LayerParams {
                w_q,
                w_k,
                w_v,
                w_down,
            });
            for kind in SiteKind::ALL {
                let prefix = format!("layer.{i}.{kind}");
                let d_out = if kind == SiteKind::FfnUp {
                    backbone.d_ff
                } else {
                    d
                };
                let base_path = format!("{prefix}.W0");
                let base_t = rng::kaiming_uniform(&mut rng::rng_for(seed, &base_path), d_out, d);
                let (base, bank, router) = match mode {
                    RoutingMode::Frozen => (
                        store.insert(base_path, base_t, false)?,
                        None,
                        SiteRouter::None,
                    ),
                    _ => {
                        let bank = init_expert_bank(
                            &mut store,
                            &prefix,
                            n_experts,
                            adapter.rank,
                            base_t,
                            seed,
                        )?;
                        let router = match mode {
                            RoutingMode::SharedLora => SiteRouter::Shared,
                            RoutingMode::UniformMoe => SiteRouter::Dense(DenseRouter::init(
                                &mut store, &prefix, n_experts, d, seed,
                            )?),
                            _ => SiteRouter::Routed(RoutingState::init(
                                &mut store,
                                &prefix,
                                n_experts,
                                d,
                                backbone.d_e(),
                                adapter.routing_dim,
                                seed,
                            )?),
                        };
                        (bank.base, Some(bank), router)
                    }
                };
                sites.push(AdapterSite {
                    layer: i,
                    kind,
                    base,
                    bank,
                    router,
                });
            }
        }

        let trainable_head = mode != RoutingMode::Frozen;
        let head_w = {
            let path = "head.W".to_string();
            let mut r = rng::rng_for(seed, &path);
            store.insert(
                path,
                rng::kaiming_uniform(&mut r, backbone.n_classes, d),
                trainable_head,
            )?
        };
        let head_b = store.insert(
            "head.b",
            Tensor::zeros(1, backbone.n_classes),
            trainable_head,
        )?;

        Ok(Self {
            backbone,
            adapter: AdapterConfig {
                n_experts,
                ..adapter
            },
            mode,
            store,
            sites,
            embed,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.adapter.n_experts
    }

    /// `{W_Q, W_K, W_E}` of every routed site with token weighting.
    pub fn shadow_tracked_params(&self) -> Vec<ParamId> {
        if !self.mode.has_token_weighting() {
            return Vec::new();
        }
        self.sites
            .iter()
            .filter_map(|s| match &s.router {
                SiteRouter::Routed(r) => Some(r.weighting_params()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn route_stages(&self) -> Option<RouteStages> {
        match self.mode {
            RoutingMode::StrLora {
                selection,
                token_weighting,
            } => Some(RouteStages {
                selection,
                token_weighting,
                top_k: self.adapter.top_k,
            }),
            _ => None,
        }
    }

    /// Token sequence `[visual ‖ instruction embeddings]` and the pooled
    /// instruction embedding `x_text`, as plain values.
    pub fn embed(&self, sample: &Sample) -> Result<(Tensor, Tensor)> {
        let table = self.store.value(self.embed);
        let d = self.backbone.d_e();
        if sample.visual.cols() != d {
            return Err(Error::Shape {
                op: "embed",
                lhs: vec![sample.visual.rows(), d],
                rhs: sample.visual.shape().to_vec(),
            });
        }
        if sample.instruction.is_empty() {
            return Err(Error::EmptyInstruction);
        }
        let mut text = Vec::with_capacity(sample.instruction.len() * d);
        for &id in &sample.instruction {
            let id = id as usize;
            if id >= table.rows() {
                return Err(Error::OutOfRange {
                    what: "instruction token id",
                    index: id,
                    len: table.rows(),
                });
            }
            text.extend_from_slice(table.row_slice(id));
        }
        let l_text = sample.instruction.len();
        let mut pooled = vec![0.0; d];
        for r in 0..l_text {
            for (p, v) in pooled.iter_mut().zip(&text[r * d..(r + 1) * d]) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|v| *v /= l_text as f64);
        let mut seq = sample.visual.data().to_vec();
        seq.extend_from_slice(&text);
        let seq = Tensor::new(sample.seq_len(), d, seq)?;
        Ok((seq, Tensor::row(pooled)))
    }

    fn adapt(
        &self,
        tape: &mut Tape,
        site_idx: usize,
        h: Var,
        x_text: Var,
        opts: &ForwardOptions<'_>,
        record: &mut Vec<SiteForward>,
    ) -> Result<Var> {
        let site = &self.sites[site_idx];
        let store = &self.store;
        let Some(bank) = &site.bank else {
            let w0 = tape.param(store, site.base);
            record.push(SiteForward {
                site: site_idx,
                h,
                routed: None,
            });
            return tape.matmul_t(h, w0);
        };
        let l = tape.value(h).rows();
        let routed = match &site.router {
            SiteRouter::None => unreachable!("bank without router"),
            SiteRouter::Shared => {
                let ones = tape.constant(Tensor::filled(l, 1, 1.0));
                Routed {
                    weights: ones,
                    s: ones,
                    p: None,
                    z: None,
                    subset: vec![0],
                    mask: vec![true],
                }
            }
            SiteRouter::Dense(router) => {
                let s = router.route(tape, store, h)?;
                Routed {
                    weights: s,
                    s,
                    p: None,
                    z: None,
                    subset: (0..bank.n_experts).collect(),
                    mask: vec![true; bank.n_experts],
                }
            }
            SiteRouter::Routed(state) => {
                let stages = self
                    .route_stages()
                    .expect("routed site implies two-stage mode");
                let pin = opts
                    .pins
                    .and_then(|p| p.get(site_idx))
                    .and_then(Option::as_ref);
                route_with_straight_through(tape, store, state, h, x_text, stages, pin)?
            }
        };
        bank.check_weights(tape.value(routed.s), l, &routed.subset)?;
        let out = bank.weighted_sum(tape, store, h, routed.weights, &routed.subset)?;
        record.push(SiteForward {
            site: site_idx,
            h,
            routed: Some(routed),
        });
        Ok(out)
    }

    /// Class logits for one sample.
    pub fn forward(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let (seq, pooled) = self.embed(sample)?;
        let mut x = tape.constant(seq);
        let x_text = tape.constant(pooled);
        let mut record = Vec::with_capacity(self.sites.len());
        let d = self.backbone.d_hidden;
        let heads = self.backbone.n_heads;
        let dh = d / heads;
        let store = &self.store;

        for (i, lp) in self.layers.iter().enumerate() {
            let h = tape.layer_norm(x);
            let wq = tape.param(store, lp.w_q);
            let wk = tape.param(store, lp.w_k);
            let wv = tape.param(store, lp.w_v);
            let q = tape.matmul_t(h, wq)?;
            let k = tape.matmul_t(h, wk)?;
            let v = tape.matmul_t(h, wv)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = tape.softmax_rows(scores)?;
                outs.push(tape.matmul(att, vh)?);
            }
            let attn = if heads == 1 {
                outs[0]
            } else {
                tape.concat_cols(&outs)?
            };
            let proj = self.adapt(tape, 2 * i, attn, x_text, opts, &mut record)?;
            x = tape.add(x, proj)?;

            let h2 = tape.layer_norm(x);
            let up = self.adapt(tape, 2 * i + 1, h2, x_text, opts, &mut record)?;
            let act = tape.gelu(up);
            let wd = tape.param(store, lp.w_down);
            let down = tape.matmul_t(act, wd)?;
            x = tape.add(x, down)?;
        }

        let fin = tape.layer_norm(x);
        let pooled = tape.mean_rows(fin);
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let logits = tape.matmul_t(pooled, hw)?;
        let logits = tape.add_row(logits, hb)?;
        Ok(ForwardOutput {
            logits,
            x_text,
            sites: record,
        })
    }

    /// Logits as plain values.
    pub fn predict_logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, &ForwardOptions::default())?;
        Ok(tape.value(out.logits).data().to_vec())
    }
}

/// Cross-entropy of the logits at the gold label.
pub fn task_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(logits, label)
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(d: usize, l_vis: usize, ids: Vec<u32>) -> Sample {
        let vis = rng::normal(&mut rng::rng_for(5, "vis"), l_vis, d, 1.0);
        Sample::new(1, 0, vis, ids, 1).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for name in [
            "frozen",
            "shared_lora",
            "uniform_moe",
            "strlora",
            "strlora_p",
            "strlora_s",
        ] {
            let m: RoutingMode = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        let none = RoutingMode::StrLora {
            selection: false,
            token_weighting: false,
        };
        assert_eq!(none.normalized(), RoutingMode::UniformMoe);
    }

    #[test]
    fn embed_layout_and_errors() {
        let m = Model::new(
            BackboneConfig::default(),
            AdapterConfig::default(),
            RoutingMode::FULL,
            3,
        )
        .unwrap();
        let s = sample(32, 3, vec![1, 2]);
        let (seq, x) = m.embed(&s).unwrap();
        assert_eq!(seq.shape(), [5, 32]);
        let s2 = sample(32, 3, vec![2, 1]);
        let (seq2, x2) = m.embed(&s2).unwrap();
        assert_ne!(seq, seq2);
        for (a, b) in x.data().iter().zip(x2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(m.embed(&sample(32, 1, vec![64])).is_err());
        assert!(Sample::new(0, 0, Tensor::zeros(1, 32), vec![], 0).is_err());
    }

    #[test]
    fn frozen_and_fresh_adapted_models_agree() {
        let bc = BackboneConfig::default();
        let s = sample(32, 4, vec![3, 9, 10]);
        let frozen =
            Model::new(bc.clone(), AdapterConfig::default(), RoutingMode::Frozen, 9).unwrap();
        let want = frozen.predict_logits(&s).unwrap();
        for mode in [
            RoutingMode::FULL,
            RoutingMode::UniformMoe,
            RoutingMode::SharedLora,
        ] {
            let m = Model::new(bc.clone(), AdapterConfig::default(), mode, 9).unwrap();
            assert_eq!(m.predict_logits(&s).unwrap(), want, "{mode}");
        }
        assert_eq!(frozen.store.trainable_numel(), 0);
    }

    #[test]
    fn shared_lora_is_base_plus_single_delta() {
        let m = Model::new(
            BackboneConfig::default(),
            AdapterConfig::default(),
            RoutingMode::SharedLora,
            2,
        )
        .unwrap();
        assert_eq!(m.n_experts(), 1);
        assert!(m
            .sites
            .iter()
            .all(|s| s.bank.as_ref().unwrap().n_experts == 1));
    }

    #[test]
    fn task_loss_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::row(vec![0.7; 5]));
        let l = task_loss(&mut tape, u, 3).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-15);

        let sharp = tape.constant(Tensor::row(vec![0.0, 20.0, 0.0]));
        let l = task_loss(&mut tape, sharp, 1).unwrap();
        assert!(tape.value(l).item() < 1e-8);

        let hand = tape.constant(Tensor::row(vec![1.0, 0.0]));
        let l = task_loss(&mut tape, hand, 0).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((tape.value(l).item() - expect).abs() < 1e-15);
        assert!((tape.value(l).item() - 0.3133).abs() < 1e-4);

        assert!(task_loss(&mut tape, hand, 2).is_err());
    }
}
