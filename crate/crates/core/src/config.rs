//! Run configuration: flat `key = value` text.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterConfig, BackboneConfig, RoutingMode};
use crate::error::{Error, Result};
use crate::stream::StreamConfig;

/// A routing mode plus whether the stability regularizer is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub mode: RoutingMode,
    pub use_reg: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        mode: RoutingMode::FULL,
        use_reg: true,
    };
    pub const UNIFORM_MOE: Variant = Variant {
        mode: RoutingMode::UniformMoe,
        use_reg: false,
    };
    pub const SHARED_LORA: Variant = Variant {
        mode: RoutingMode::SharedLora,
        use_reg: false,
    };
    pub const FROZEN: Variant = Variant {
        mode: RoutingMode::Frozen,
        use_reg: false,
    };

    /// Builds a two-stage variant from the three component flags.
    pub fn from_flags(selection: bool, token_weighting: bool, use_reg: bool) -> Result<Self> {
        let v = Variant {
            mode: RoutingMode::StrLora {
                selection,
                token_weighting,
            }
            .normalized(),
            use_reg,
        };
        v.validate()?;
        Ok(v)
    }

    /// `(selection, token weighting, reg)`; `None` for the baselines outside the grid.
    pub fn flags(&self) -> Option<(bool, bool, bool)> {
        match self.mode.normalized() {
            RoutingMode::UniformMoe => Some((false, false, self.use_reg)),
            RoutingMode::StrLora {
                selection,
                token_weighting,
            } => Some((selection, token_weighting, self.use_reg)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_reg && !self.mode.has_token_weighting() {
            return Err(Error::Invalid(format!(
                "the routing regularizer needs token weighting, which {} lacks",
                self.mode
            )));
        }
        Ok(())
    }

    /// The six component combinations of the ablation grid, in table order.
    pub fn ablation_grid() -> [Variant; 6] {
        let v = |p, s, r| Variant::from_flags(p, s, r).expect("grid entries are valid");
        [
            v(false, false, false),
            v(true, false, false),
            v(false, true, false),
            v(false, true, true),
            v(true, true, false),
            v(true, true, true),
        ]
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mode)?;
        if self.use_reg {
            f.write_str("+reg")?;
        }
        Ok(())
    }
}

/// Accepts `frozen`, `shared_lora`, `uniform_moe`, `full`, or a comma list of
/// enabled components drawn from `p`, `s`, `reg` (`none` for the empty list).
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "frozen" => return Ok(Variant::FROZEN),
            "shared_lora" => return Ok(Variant::SHARED_LORA),
            "uniform_moe" | "none" | "" => return Ok(Variant::UNIFORM_MOE),
            "full" | "strlora" => return Ok(Variant::FULL),
            _ => {}
        }
        let (mut p, mut tw, mut reg) = (false, false, false);
        for part in s.split(',').map(str::trim) {
            match part {
                "p" => p = true,
                "s" => tw = true,
                "reg" => reg = true,
                other => {
                    return Err(Error::Invalid(format!(
                        "unknown variant component `{other}`"
                    )))
                }
            }
        }
        Variant::from_flags(p, tw, reg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub variant: Variant,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub seed: u64,
    pub stream: StreamConfig,
    /// Record routing traces for every k-th training batch; 0 disables them.
    pub trace_every: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let stream = StreamConfig {
            d_e: backbone.d_e(),
            vocab: backbone.vocab,
            n_classes: backbone.n_classes,
            ..StreamConfig::default()
        };
        Self {
            backbone,
            adapter: AdapterConfig::default(),
            variant: Variant::FULL,
            beta: 0.99,
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 32,
            grad_clip: 0.0,
            seed: 0,
            stream,
            trace_every: 5,
            out: None,
        }
    }
}

const KEYS: &[&str] = &[
    "n_layers",
    "d_hidden",
    "n_heads",
    "d_ff",
    "vocab",
    "n_classes",
    "n_experts",
    "top_k",
    "rank",
    "routing_dim",
    "variant",
    "use_selection",
    "use_token_weighting",
    "use_reg",
    "beta",
    "lambda",
    "lr",
    "batch_size",
    "grad_clip",
    "seed",
    "n_tasks",
    "n_chunks",
    "chunk_size",
    "test_size",
    "l_vis",
    "template_len",
    "filler_len",
    "sigma",
    "disappear_after",
    "activity",
    "trace_every",
    "out",
];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.variant.validate()?;
        self.stream.validate()?;
        let a = &self.adapter;
        let bad = |m: String| Err(Error::Invalid(m));
        if a.n_experts == 0 || a.top_k == 0 || a.top_k > a.n_experts {
            return bad(format!(
                "need 1 <= K <= N, got K = {}, N = {}",
                a.top_k, a.n_experts
            ));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.grad_clip >= 0.0) {
            return bad("lr and batch_size must be positive, grad_clip non-negative".into());
        }
        if self.stream.d_e != self.backbone.d_e()
            || self.stream.vocab != self.backbone.vocab
            || self.stream.n_classes != self.backbone.n_classes
        {
            return bad("stream and backbone disagree on d_e, vocab or n_classes".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Invalid(format!("bad value `{v}` for `{key}`")))
        }
        let flag = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Invalid(format!("bad boolean `{v}` for `{key}`"))),
            }
        };
        let flags = |c: &Self| c.variant.flags().unwrap_or((false, false, false));
        match key {
            "n_layers" => self.backbone.n_layers = num(key, value)?,
            "d_hidden" => {
                self.backbone.d_hidden = num(key, value)?;
                self.stream.d_e = self.backbone.d_e();
            }
            "n_heads" => self.backbone.n_heads = num(key, value)?,
            "d_ff" => self.backbone.d_ff = num(key, value)?,
            "vocab" => {
                self.backbone.vocab = num(key, value)?;
                self.stream.vocab = self.backbone.vocab;
            }
            "n_classes" => {
                self.backbone.n_classes = num(key, value)?;
                self.stream.n_classes = self.backbone.n_classes;
            }
            "n_experts" => self.adapter.n_experts = num(key, value)?,
            "top_k" => self.adapter.top_k = num(key, value)?,
            "rank" => self.adapter.rank = num(key, value)?,
            "routing_dim" => self.adapter.routing_dim = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "use_selection" => {
                let (_, s, r) = flags(self);
                self.variant = unchecked(flag(value)?, s, r);
            }
            "use_token_weighting" => {
                let (p, _, r) = flags(self);
                self.variant = unchecked(p, flag(value)?, r);
            }
            "use_reg" => self.variant.use_reg = flag(value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "n_tasks" => self.stream.n_tasks = num(key, value)?,
            "n_chunks" => self.stream.n_chunks = num(key, value)?,
            "chunk_size" => self.stream.chunk_size = num(key, value)?,
            "test_size" => self.stream.test_size = num(key, value)?,
            "l_vis" => self.stream.l_vis = num(key, value)?,
            "template_len" => self.stream.template_len = num(key, value)?,
            "filler_len" => self.stream.filler_len = num(key, value)?,
            "sigma" => self.stream.sigma = num(key, value)?,
            "disappear_after" => self.stream.disappear_after = num(key, value)?,
            "activity" => self.stream.activity = num(key, value)?,
            "trace_every" => self.trace_every = num(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines over the defaults. `#` starts a
    /// comment; unknown keys and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key `{k}` given twice")));
            }
            cfg.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, in the accepted syntax.
    pub fn to_text(&self) -> String {
        let (p, s, r) = self
            .variant
            .flags()
            .unwrap_or((false, false, self.variant.use_reg));
        let b = &self.backbone;
        let a = &self.adapter;
        let st = &self.stream;
        let mut lines = vec![
            format!("n_layers = {}", b.n_layers),
            format!("d_hidden = {}", b.d_hidden),
            format!("n_heads = {}", b.n_heads),
            format!("d_ff = {}", b.d_ff),
            format!("vocab = {}", b.vocab),
            format!("n_classes = {}", b.n_classes),
            format!("n_experts = {}", a.n_experts),
            format!("top_k = {}", a.top_k),
            format!("rank = {}", a.rank),
            format!("routing_dim = {}", a.routing_dim),
        ];
        match self.variant.flags() {
            Some(_) => {
                lines.push(format!("use_selection = {p}"));
                lines.push(format!("use_token_weighting = {s}"));
                lines.push(format!("use_reg = {r}"));
            }
            None => lines.push(format!("variant = {}", self.variant.mode)),
        }
        lines.extend([
            format!("beta = {}", self.beta),
            format!("lambda = {}", self.lambda),
            format!("lr = {}", self.lr),
            format!("batch_size = {}", self.batch_size),
            format!("grad_clip = {}", self.grad_clip),
            format!("seed = {}", self.seed),
            format!("n_tasks = {}", st.n_tasks),
            format!("n_chunks = {}", st.n_chunks),
            format!("chunk_size = {}", st.chunk_size),
            format!("test_size = {}", st.test_size),
            format!("l_vis = {}", st.l_vis),
            format!("template_len = {}", st.template_len),
            format!("filler_len = {}", st.filler_len),
            format!("sigma = {}", st.sigma),
            format!("disappear_after = {}", st.disappear_after),
            format!("activity = {}", st.activity),
            format!("trace_every = {}", self.trace_every),
        ]);
        if let Some(out) = &self.out {
            lines.push(format!("out = {}", out.display()));
        }
        lines.join("\n") + "\n"
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

/// Flag combination without the regularizer check; `parse` validates at the end.
fn unchecked(selection: bool, token_weighting: bool, use_reg: bool) -> Variant {
    Variant {
        mode: RoutingMode::StrLora {
            selection,
            token_weighting,
        }
        .normalized(),
        use_reg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(
            (
                c.adapter.n_experts,
                c.adapter.top_k,
                c.adapter.rank,
                c.adapter.routing_dim
            ),
            (4, 2, 16, 64)
        );
        assert_eq!(
            (c.beta, c.lambda, c.lr, c.batch_size),
            (0.99, 0.1, 1e-3, 32)
        );
        c.validate().unwrap();
    }

    #[test]
    fn grid_matches_component_rows() {
        let flags: Vec<_> = Variant::ablation_grid()
            .iter()
            .map(|v| v.flags().unwrap())
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, true, true),
                (true, true, false),
                (true, true, true),
            ]
        );
        assert_eq!(Variant::ablation_grid()[0].mode, RoutingMode::UniformMoe);
        assert_eq!(Variant::ablation_grid()[5], Variant::FULL);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let c =
            RunConfig::parse("top_k = 1\nuse_selection = false\nuse_reg = true # keep\nseed=7\n")
                .unwrap();
        assert_eq!(c.adapter.top_k, 1);
        assert_eq!(c.variant.flags(), Some((false, true, true)));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let base = RunConfig::parse("variant = shared_lora").unwrap();
        assert_eq!(RunConfig::parse(&base.to_text()).unwrap(), base);

        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("top_k = 5").is_err());
        assert!(RunConfig::parse("lambda = -1").is_err());
        assert!(RunConfig::parse("beta = 1.0").is_err());
        assert!(RunConfig::parse("use_token_weighting = false").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn variant_strings() {
        assert_eq!("p,s,reg".parse::<Variant>().unwrap(), Variant::FULL);
        assert_eq!("none".parse::<Variant>().unwrap(), Variant::UNIFORM_MOE);
        assert_eq!(
            "p".parse::<Variant>().unwrap().flags(),
            Some((true, false, false))
        );
        assert!("p,reg".parse::<Variant>().is_err());
        assert!("x".parse::<Variant>().is_err());
    }
}
