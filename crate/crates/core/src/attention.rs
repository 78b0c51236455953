//! Multi-head attention over word embeddings and the gate that fuses its
//! output back with each word's own embedding.
//!
//! In the default `abstract_rel` variant every position asks the same
//! question: the query is one trainable vector, projected per head, and
//! scores differ across positions only through learned relative-distance
//! keys. With the current position masked, a word's attention output is
//! built purely from its context.
//!
//! Per head `h`, with `q` the query, `k_j` the key of word `j` and `r_d` the
//! key of clipped distance `d`:
//!
//! ```text
//! score(i, j) = q · (k_j + r_clip(j - i)) / sqrt(head_size)
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{blocks_for, dropout, Activation, Dense, DenseSpec, DropoutSite};
use crate::params::{glorot_uniform, rng_for, ParamId, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared trainable query, relative keys, current word masked.
    #[default]
    AbstractRel,
    /// Per-position queries with relative keys.
    SelfRel,
    /// Per-position queries, sinusoidal absolute positions, no relative keys.
    SelfAbs,
    /// No attention; the gate sees a zero attention output.
    None,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::None,
        Variant::SelfAbs,
        Variant::SelfRel,
        Variant::AbstractRel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AbstractRel => "abstract_rel",
            Variant::SelfRel => "self_rel",
            Variant::SelfAbs => "self_abs",
            Variant::None => "none",
        }
    }

    fn relative(self) -> bool {
        matches!(self, Variant::AbstractRel | Variant::SelfRel)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || (s == "crf_only" && *v == Variant::None))
            .ok_or_else(|| Error::Config(format!("unknown attention variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_size: usize,
    pub d_model: usize,
    pub max_relative_distance: usize,
    pub attention_dropout: f64,
    pub variant: Variant,
    /// Mask each word's own key. Defaults to on for `abstract_rel` only.
    pub mask_current: Option<bool>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 4,
            head_size: 128,
            d_model: 256,
            max_relative_distance: 8,
            attention_dropout: 0.1,
            variant: Variant::AbstractRel,
            mask_current: None,
        }
    }
}

impl AttentionConfig {
    pub fn masks_current(&self) -> bool {
        self.mask_current
            .unwrap_or(self.variant == Variant::AbstractRel)
    }

    fn inner(&self) -> usize {
        self.num_heads * self.head_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_size == 0 || self.d_model == 0 {
            return Err(Error::Config(format!(
                "attention sizes must be positive: heads={}, head_size={}, d_model={}",
                self.num_heads, self.head_size, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config(format!(
                "attention dropout {} outside [0, 1)",
                self.attention_dropout
            )));
        }
        Ok(())
    }

    fn projection(&self, in_dim: usize, out_dim: usize, blocking: Blocking) -> DenseSpec {
        DenseSpec::new(in_dim, out_dim).blocks(blocking.blocks(in_dim, out_dim))
    }

    /// Per-tensor counts, matching what [`Attention::new`] registers.
    pub fn param_breakdown(&self, blocking: Blocking) -> Vec<(String, usize)> {
        let (d, n) = (self.d_model, self.inner());
        let mut out = Vec::new();
        if self.variant == Variant::None {
            return out;
        }
        if self.variant == Variant::AbstractRel {
            out.push(("attn.abstract_query".into(), d));
        }
        out.push((
            "attn.query".into(),
            self.projection(d, n, blocking).param_count(),
        ));
        out.push((
            "attn.key".into(),
            self.projection(d, n, blocking).without_bias().param_count(),
        ));
        out.push((
            "attn.value".into(),
            self.projection(d, n, blocking).param_count(),
        ));
        if self.variant.relative() {
            let buckets = 2 * self.max_relative_distance + 1;
            out.push(("attn.relative_embed".into(), buckets * d));
            out.push((
                "attn.relative_key".into(),
                self.projection(d, n, blocking).without_bias().param_count(),
            ));
        }
        out.push((
            "attn.output".into(),
            self.projection(n, d, blocking).param_count(),
        ));
        out
    }
}

/// Which kernels become block-diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocking {
    pub num_blocks: usize,
    pub min_dim: usize,
}

impl Blocking {
    pub const NONE: Blocking = Blocking {
        num_blocks: 1,
        min_dim: usize::MAX,
    };

    pub fn blocks(self, in_dim: usize, out_dim: usize) -> usize {
        blocks_for(in_dim, out_dim, self.num_blocks, self.min_dim)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub config: AttentionConfig,
    pub abstract_query: Option<ParamId>,
    pub query: Option<Dense>,
    pub key: Option<Dense>,
    pub value: Option<Dense>,
    pub relative_embed: Option<ParamId>,
    pub relative_key: Option<Dense>,
    pub output: Option<Dense>,
}

/// Attention output and per-head probabilities `[T, T]`.
pub struct Attended {
    pub output: Var,
    pub probs: Vec<Var>,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParameterStore<T>,
        config: AttentionConfig,
        blocking: Blocking,
    ) -> Result<Self> {
        config.validate()?;
        let mut att = Attention {
            config: config.clone(),
            abstract_query: None,
            query: None,
            key: None,
            value: None,
            relative_embed: None,
            relative_key: None,
            output: None,
        };
        if config.variant == Variant::None {
            return Ok(att);
        }
        let (d, n) = (config.d_model, config.inner());
        if config.variant == Variant::AbstractRel {
            let mut rng = rng_for(store.seed(), "init/attn.abstract_query");
            let q = glorot_uniform(&[1, d], d, n, &mut rng);
            att.abstract_query = Some(store.add("attn.abstract_query", q, true)?);
        }
        att.query = Some(Dense::new(
            store,
            "attn.query",
            &config.projection(d, n, blocking),
        )?);
        // A key bias shifts a whole score row uniformly, which softmax ignores.
        let key_spec = config.projection(d, n, blocking).without_bias();
        att.key = Some(Dense::new(store, "attn.key", &key_spec)?);
        att.value = Some(Dense::new(
            store,
            "attn.value",
            &config.projection(d, n, blocking),
        )?);
        if config.variant.relative() {
            let buckets = 2 * config.max_relative_distance + 1;
            let mut rng = rng_for(store.seed(), "init/attn.relative_embed");
            let table = glorot_uniform(&[buckets, d], buckets, d, &mut rng);
            att.relative_embed = Some(store.add("attn.relative_embed", table, true)?);
            let spec = config.projection(d, n, blocking).without_bias();
            att.relative_key = Some(Dense::new(store, "attn.relative_key", &spec)?);
        }
        att.output = Some(Dense::new(
            store,
            "attn.output",
            &config.projection(n, d, blocking),
        )?);
        Ok(att)
    }

    /// Attends over `e: [T, d_model]`. Dropout on probabilities only when
    /// `site` is given.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        e: Var,
        site: Option<&DropoutSite>,
    ) -> Result<Attended> {
        let cfg = &self.config;
        let t = g.value(e).rows();
        if t == 0 || g.value(e).cols() != cfg.d_model {
            return Err(Error::dim("attend", g.shape(e), &[t, cfg.d_model]));
        }
        let (Some(query), Some(key), Some(value), Some(output)) =
            (&self.query, &self.key, &self.value, &self.output)
        else {
            let zeros = g.input(Tensor::zeros(&[t, cfg.d_model]));
            return Ok(Attended {
                output: zeros,
                probs: Vec::new(),
            });
        };

        let x = if cfg.variant == Variant::SelfAbs {
            let pe = g.input(sinusoidal_positions(t, cfg.d_model));
            g.add(e, pe)?
        } else {
            e
        };
        let q_all = match self.abstract_query {
            Some(a) => {
                let a = g.param(a);
                query.linear(g, a)?
            }
            None => query.linear(g, x)?,
        };
        let k_all = key.linear(g, x)?;
        let v_all = value.linear(g, x)?;
        let r_all = match (self.relative_embed, &self.relative_key) {
            (Some(table), Some(proj)) => {
                let table = g.param(table);
                Some(proj.linear(g, table)?)
            }
            _ => None,
        };

        let mask = cfg.masks_current();
        let diagonal: Vec<bool> = (0..t * t).map(|idx| idx / t == idx % t).collect();
        let scale = T::of(1.0 / (cfg.head_size as f64).sqrt());
        let hs = cfg.head_size;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let q = g.slice_cols(q_all, h * hs, hs)?;
            let k = g.slice_cols(k_all, h * hs, hs)?;
            let v = g.slice_cols(v_all, h * hs, hs)?;
            let shared = g.value(q).rows() == 1;
            let mut scores = g.matmul_t(q, k)?;
            if shared {
                scores = g.repeat_rows(scores, t)?;
            }
            if let Some(r_all) = r_all {
                let r = g.slice_cols(r_all, h * hs, hs)?;
                let mut rel = g.matmul_t(q, r)?;
                if shared {
                    rel = g.repeat_rows(rel, t)?;
                }
                let rel = g.relative_gather(rel, cfg.max_relative_distance)?;
                scores = g.add(scores, rel)?;
            }
            let mut scores = g.scale(scores, scale);
            if mask {
                scores = g.mask_fill(scores, diagonal.clone())?;
            }
            let p = g.softmax(scores, true)?;
            probs.push(p);
            let head_site = site.map(|s| DropoutSite {
                seed: s.seed,
                path: format!("{}/head{h}", s.path),
            });
            let p = dropout(g, p, cfg.attention_dropout, head_site.as_ref())?;
            heads.push(g.matmul(p, v)?);
        }
        let concat = g.concat_cols(&heads)?;
        let mut out = output.linear(g, concat)?;
        if mask && t == 1 {
            // The single row has nothing to attend to.
            let zeros = g.input(Tensor::zeros(&[1, cfg.d_model]));
            out = g.select_rows(vec![false], out, zeros)?;
        }
        Ok(Attended { output: out, probs })
    }

    /// Stacks per-head probabilities into `[heads, T, T]`; `None` without
    /// attention.
    pub fn probs_tensor<T: Real>(g: &Graph<'_, T>, probs: &[Var]) -> Result<Option<Tensor<T>>> {
        let Some(&first) = probs.first() else {
            return Ok(None);
        };
        let t = g.value(first).rows();
        let data = probs
            .iter()
            .flat_map(|&p| g.value(p).data().iter().copied())
            .collect();
        Tensor::new(vec![probs.len(), t, t], data).map(Some)
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(..)`.
pub fn sinusoidal_positions<T: Real>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d], |idx| {
        let (p, c) = (idx / d, idx % d);
        let angle = p as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// `h = g ⊙ e + (1 - g) ⊙ a` with `g = sigmoid(dense([a ; e]))`.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub dense: Dense,
}

impl FusionGate {
    pub fn spec(d_model: usize, blocking: Blocking) -> DenseSpec {
        DenseSpec::new(2 * d_model, d_model)
            .blocks(blocking.blocks(2 * d_model, d_model))
            .activation(Activation::Sigmoid)
    }

    pub fn new<T: Real>(
        store: &mut ParameterStore<T>,
        d_model: usize,
        blocking: Blocking,
    ) -> Result<Self> {
        Ok(Self {
            dense: Dense::new(store, "gate", &Self::spec(d_model, blocking))?,
        })
    }

    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, a: Var, e: Var) -> Result<Var> {
        if g.shape(a) != g.shape(e) {
            return Err(Error::dim("gate_fuse", g.shape(a), g.shape(e)));
        }
        let cat = g.concat_cols(&[a, e])?;
        let gate = self.dense.forward(g, cat)?;
        let diff = g.sub(e, a)?;
        let gated = g.mul(gate, diff)?;
        g.add(a, gated)
    }
}
