//! Hierarchical encoder, per-level matching attention and subtractive decoder.
//!
//! Parameter names are hierarchical: `enc.*` for the shared encoder,
//! `match.l{level}.{spatial|channel|proj}.*` for the matching modules and
//! `dec.*` for the decoder. Only convolution biases and layer-norm shifts
//! carry the bias tag; query/key/value projections have no bias so an all-zero
//! value map stays zero after projection.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{AttentionSpec, Graph, ParameterStore, Tensor, TokenAxis, Var};
use crate::episodes::Pair;
use crate::error::{param_err, shape_err, Error, Result};
use crate::imaging::Image;
use crate::real::Real;

pub mod check;


/// Which matching branches run at every level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Spatial,
    Channel,
    Both,
    /// No matching; each level passes through a learned pointwise projection.
    None,
}

impl MatchMode {
    pub const ALL: [MatchMode; 4] = [MatchMode::None, MatchMode::Spatial, MatchMode::Channel, MatchMode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Spatial => "spatial",
            MatchMode::Channel => "channel",
            MatchMode::Both => "both",
            MatchMode::None => "none",
        }
    }

    fn axes(self) -> &'static [TokenAxis] {
        match self {
            MatchMode::Spatial => &[TokenAxis::Spatial],
            MatchMode::Channel => &[TokenAxis::Channel],
            MatchMode::Both => &[TokenAxis::Spatial, TokenAxis::Channel],
            MatchMode::None => &[],
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatchMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "match mode",
                name: s.to_string(),
            })
    }
}

/// What the support values encode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedFeatures {
    /// `V = enc(X - Y)`; the decoder predicts the pattern and subtracts it.
    #[default]
    Pattern,
    /// `V = enc(Y)`; the decoder predicts the clean image directly.
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub widths: Vec<usize>,
    pub heads: Vec<usize>,
    pub input_size: usize,
    pub match_mode: MatchMode,
    pub matched_features: MatchedFeatures,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            levels: 3,
            widths: vec![16, 32, 64],
            heads: vec![2, 4, 4],
            input_size: 64,
            match_mode: MatchMode::Both,
            matched_features: MatchedFeatures::Pattern,
        }
    }

    /// Full-size preset. Widths follow the Swin-B stage widths.
    pub fn paper() -> Self {
        Self {
            levels: 4,
            widths: vec![128, 256, 512, 1024],
            heads: vec![4, 8, 16, 16],
            input_size: 224,
            match_mode: MatchMode::Both,
            matched_features: MatchedFeatures::Pattern,
        }
    }

    /// Checks the invariants; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(param_err!("levels: must be at least 1"));
        }
        if self.widths.len() != self.levels {
            return Err(param_err!(
                "widths: {} entries for {} levels",
                self.widths.len(),
                self.levels
            ));
        }
        if self.heads.len() != self.levels {
            return Err(param_err!(
                "heads: {} entries for {} levels",
                self.heads.len(),
                self.levels
            ));
        }
        for (l, (&w, &h)) in self.widths.iter().zip(&self.heads).enumerate() {
            if w == 0 || h == 0 || w % h != 0 {
                return Err(param_err!("heads: level {l} width {w} is not divisible by {h} heads"));
            }
        }
        let stride = 1usize << self.levels;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(param_err!(
                "input_size: {} is not a positive multiple of {stride}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Spatial side of level `l`'s feature map.
    pub fn level_size(&self, l: usize) -> usize {
        self.input_size >> (l + 1)
    }
}

/// Per-level support keys and values, `[N, H_l, W_l, C_l]` each.
#[derive(Clone, Debug)]
pub struct SupportVars {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// Support encodings detached from any graph, reusable across queries.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportCache<R> {
    pub keys: Vec<Tensor<R>>,
    pub values: Vec<Tensor<R>>,
}

impl<R: Real> SupportCache<R> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enters the cached tensors as constant leaves of `g`.
    pub fn bind(&self, g: &mut Graph<R>) -> SupportVars {
        SupportVars {
            keys: self.keys.iter().map(|t| g.input(t.clone())).collect(),
            values: self.values.iter().map(|t| g.input(t.clone())).collect(),
        }
    }
}

/// Output of one matching module.
#[derive(Clone, Debug)]
pub struct Matched {
    pub phi: Var,
    /// Attention nodes of the active branches (read rows via [`Graph::attention_probs`]).
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub features: Vec<Var>,
    pub matched: Vec<Matched>,
    /// Predicted pattern (pattern features) or clean estimate (background features).
    pub head: Var,
    pub unclipped: Var,
    pub restored: Var,
}

/// Stacks same-sized images into a `[B, H, W, C]` tensor.
pub fn stack_images<R: Real, S: Real>(images: &[&Image<S>]) -> Result<Tensor<R>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("no images to stack".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        if img.dims() != (h, w, c) {
            return Err(shape_err!("cannot stack {:?} with {:?}", img.dims(), (h, w, c)));
        }
        data.extend(img.data().iter().map(|v| R::from_f64(v.to_f64())));
    }
    Tensor::from_vec(&[images.len(), h, w, c], data)
}

/// Splits a `[B, H, W, C]` tensor back into images.
pub fn unstack_images<R: Real>(t: &Tensor<R>) -> Result<Vec<Image<R>>> {
    let (b, h, w, c) = t.dims4()?;
    t.data()
        .chunks(h * w * c)
        .take(b)
        .map(|chunk| Image::from_vec(h, w, c, chunk.to_vec()))
        .collect()
}

fn param<R: Real>(g: &mut Graph<R>, s: &ParameterStore<R>, name: &str) -> Result<Var> {
    Ok(g.param(s, s.require(name)?))
}

fn conv_params<R: Real>(g: &mut Graph<R>, s: &ParameterStore<R>, prefix: &str) -> Result<(Var, Var)> {
    Ok((
        param(g, s, &format!("{prefix}.weight"))?,
        param(g, s, &format!("{prefix}.bias"))?,
    ))
}

fn axis_name(axis: TokenAxis) -> &'static str {
    match axis {
        TokenAxis::Spatial => "spatial",
        TokenAxis::Channel => "channel",
    }
}

struct Init<'a, R> {
    store: &'a mut ParameterStore<R>,
    rng: ChaCha8Rng,
}

impl<R: Real> Init<'_, R> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let n = shape.iter().product();
        let values = (0..n).map(|_| R::from_f64(self.rng.gen_range(-bound..bound))).collect();
        self.store.add(name, shape, values, false).map(|_| ())
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64, is_bias: bool) -> Result<()> {
        let n = shape.iter().product();
        self.store
            .add(name, shape, vec![R::from_f64(value); n], is_bias)
            .map(|_| ())
    }

    fn pointwise(&mut self, prefix: &str, cin: usize, cout: usize) -> Result<()> {
        self.uniform(format!("{prefix}.weight"), &[cin, cout], cin)?;
        self.constant(format!("{prefix}.bias"), &[cout], 0.0, true)
    }

    fn block(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.uniform(format!("{prefix}.dw.weight"), &[3, 3, c], 9)?;
        self.constant(format!("{prefix}.dw.bias"), &[c], 0.0, true)?;
        self.constant(format!("{prefix}.norm.weight"), &[c], 1.0, false)?;
        self.constant(format!("{prefix}.norm.bias"), &[c], 0.0, true)?;
        self.pointwise(&format!("{prefix}.expand"), c, 2 * c)?;
        self.pointwise(&format!("{prefix}.project"), 2 * c, c)
    }

    fn branch(&mut self, prefix: &str, c: usize, heads: usize) -> Result<()> {
        for t in ["q", "k", "v"] {
            self.uniform(format!("{prefix}.{t}.pw.weight"), &[c, c], c)?;
            self.uniform(format!("{prefix}.{t}.dw.weight"), &[3, 3, c], 9)?;
        }
        self.pointwise(&format!("{prefix}.out"), c, c)?;
        self.pointwise(&format!("{prefix}.phi"), 2 * c, c)?;
        self.constant(format!("{prefix}.log_alpha"), &[heads], 0.0, false)
    }
}

/// The restoration network: a config plus the forward computations over a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ModelConfig,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Seeded initialization with the zero-pattern head: the pattern head is zero
    /// and the final convolution is the identity, so the untrained network
    /// restores every image to itself.
    pub fn init_params<R: Real>(&self, seed: u64) -> Result<ParameterStore<R>> {
        let cfg = &self.config;
        let mut store = ParameterStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let w = &cfg.widths;
        init.uniform("enc.embed.weight".into(), &[12, w[0]], 12)?;
        init.constant("enc.embed.bias".into(), &[w[0]], 0.0, true)?;
        for l in 0..cfg.levels {
            for b in 0..2 {
                init.block(&format!("enc.l{l}.b{b}"), w[l])?;
            }
            if l + 1 < cfg.levels {
                init.uniform(format!("enc.down{l}.weight"), &[4 * w[l], w[l + 1]], 4 * w[l])?;
                init.constant(format!("enc.down{l}.bias"), &[w[l + 1]], 0.0, true)?;
            }
        }
        for l in 0..cfg.levels {
            let axes = cfg.match_mode.axes();
            if axes.is_empty() {
                init.pointwise(&format!("match.l{l}.proj"), w[l], w[l])?;
            }
            for &axis in axes {
                init.branch(&format!("match.l{l}.{}", axis_name(axis)), w[l], cfg.heads[l])?;
            }
        }
        for l in (0..cfg.levels).rev() {
            if l + 1 < cfg.levels {
                init.uniform(format!("dec.up{l}.weight"), &[w[l + 1], 4 * w[l]], w[l + 1])?;
                init.constant(format!("dec.up{l}.bias"), &[w[l]], 0.0, true)?;
            }
            for b in 0..2 {
                init.block(&format!("dec.l{l}.r{b}"), w[l])?;
            }
        }
        init.uniform("dec.top.up.weight".into(), &[w[0], 4 * w[0]], w[0])?;
        init.constant("dec.top.up.bias".into(), &[w[0]], 0.0, true)?;
        init.block("dec.top.r0", w[0])?;
        init.constant("dec.head.weight".into(), &[w[0], 3], 0.0, false)?;
        let head_bias = match cfg.matched_features {
            MatchedFeatures::Pattern => 0.0,
            MatchedFeatures::Background => 0.5,
        };
        init.constant("dec.head.bias".into(), &[3], head_bias, true)?;
        let eye = (0..9).map(|i| if i % 4 == 0 { R::ONE } else { R::ZERO }).collect();
        store.add("dec.final.weight", &[3, 3], eye, false)?;
        store.add("dec.final.bias", &[3], vec![R::ZERO; 3], true)?;
        Ok(store)
    }

    /// Residual block: `x + project(gelu(expand(norm(dw(x)))))`.
    pub fn residual_block<R: Real>(g: &mut Graph<R>, s: &ParameterStore<R>, prefix: &str, x: Var) -> Result<Var> {
        let (w, b) = conv_params(g, s, &format!("{prefix}.dw"))?;
        let h = g.depthwise(x, w, Some(b))?;
        let (gamma, beta) = conv_params(g, s, &format!("{prefix}.norm"))?;
        let h = g.layer_norm(h, Some(gamma), Some(beta))?;
        let (w, b) = conv_params(g, s, &format!("{prefix}.expand"))?;
        let h = g.pointwise(h, w, Some(b))?;
        let h = g.gelu(h);
        let (w, b) = conv_params(g, s, &format!("{prefix}.project"))?;
        let h = g.pointwise(h, w, Some(b))?;
        g.add(x, h)
    }

    /// Per-level features of a `[B, H, W, 3]` batch.
    pub fn encode<R: Real>(&self, g: &mut Graph<R>, s: &ParameterStore<R>, x: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (_, h, w, c) = g.value(x).dims4()?;
        if (h, w, c) != (cfg.input_size, cfg.input_size, 3) {
            return Err(shape_err!(
                "encoder expects {0}x{0}x3 input, got {h}x{w}x{c}",
                cfg.input_size
            ));
        }
        let (wt, b) = conv_params(g, s, "enc.embed")?;
        let mut x = g.downsample(x, wt, Some(b))?;
        let mut out = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            for blk in 0..2 {
                x = Self::residual_block(g, s, &format!("enc.l{l}.b{blk}"), x)?;
            }
            out.push(x);
            if l + 1 < cfg.levels {
                let (wt, b) = conv_params(g, s, &format!("enc.down{l}"))?;
                x = g.downsample(x, wt, Some(b))?;
            }
        }
        Ok(out)
    }

    /// Degraded images and matched targets of a support set, as `[N, H, W, 3]` tensors.
    pub fn support_tensors<R: Real>(&self, support: &[Pair]) -> Result<(Tensor<R>, Tensor<R>)> {
        if support.is_empty() {
            return Err(Error::Empty("support set is empty".into()));
        }
        let degraded: Vec<&Image> = support.iter().map(|p| &*p.degraded).collect();
        let targets: Vec<Image> = match self.config.matched_features {
            MatchedFeatures::Pattern => support
                .iter()
                .map(|p| p.degraded.sub(&p.clean))
                .collect::<Result<_>>()?,
            MatchedFeatures::Background => support.iter().map(|p| (*p.clean).clone()).collect(),
        };
        let targets: Vec<&Image> = targets.iter().collect();
        Ok((stack_images(&degraded)?, stack_images(&targets)?))
    }

    /// Keys `enc(X_i)` and values `enc(X_i - Y_i)` (or `enc(Y_i)`) with shared weights.
    pub fn encode_supports<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParameterStore<R>,
        degraded: Var,
        targets: Var,
    ) -> Result<SupportVars> {
        if g.value(degraded).shape().first() == Some(&0) {
            return Err(Error::Empty("support set is empty".into()));
        }
        if g.shape(degraded) != g.shape(targets) {
            return Err(shape_err!(
                "support images {:?} and targets {:?} differ",
                g.shape(degraded),
                g.shape(targets)
            ));
        }
        if self.config.match_mode == MatchMode::None {
            return Ok(SupportVars {
                keys: Vec::new(),
                values: Vec::new(),
            });
        }
        let keys = self.encode(g, s, degraded)?;
        let values = self.encode(g, s, targets)?;
        Ok(SupportVars { keys, values })
    }

    /// Encodes a support set once, outside of any training graph.
    pub fn support_cache<R: Real>(&self, s: &ParameterStore<R>, support: &[Pair]) -> Result<SupportCache<R>> {
        let (x, t) = self.support_tensors::<R>(support)?;
        let mut g = Graph::new();
        let (x, t) = (g.input(x), g.input(t));
        let sv = self.encode_supports(&mut g, s, x, t)?;
        Ok(SupportCache {
            keys: sv.keys.iter().map(|&v| g.value(v).clone()).collect(),
            values: sv.values.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// One branch of the matching module:
    /// `phi(Cat(out(attend(W2 W1 Q, W2 W1 K, W2 W1 V)), Q))`.
    #[allow(clippy::too_many_arguments)]
    pub fn match_branch<R: Real>(
        g: &mut Graph<R>,
        s: &ParameterStore<R>,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
        axis: TokenAxis,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let proj = |g: &mut Graph<R>, t: &str, x: Var| -> Result<Var> {
            let pw = param(g, s, &format!("{prefix}.{t}.pw.weight"))?;
            let dw = param(g, s, &format!("{prefix}.{t}.dw.weight"))?;
            let h = g.pointwise(x, pw, None)?;
            g.depthwise(h, dw, None)
        };
        let qp = proj(g, "q", q)?;
        let kp = proj(g, "k", k)?;
        let vp = proj(g, "v", v)?;
        let la = param(g, s, &format!("{prefix}.log_alpha"))?;
        let att = g.attention(
            qp,
            kp,
            vp,
            la,
            AttentionSpec {
                axis,
                heads,
                normalize: true,
            },
        )?;
        let (w, b) = conv_params(g, s, &format!("{prefix}.out"))?;
        let out = g.pointwise(att, w, Some(b))?;
        let cat = g.concat_channels(out, q)?;
        let (w, b) = conv_params(g, s, &format!("{prefix}.phi"))?;
        Ok((g.pointwise(cat, w, Some(b))?, att))
    }

    /// Matching module of level `l` under `mode` (which must have its parameters in `s`).
    #[allow(clippy::too_many_arguments)]
    pub fn matching_module<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParameterStore<R>,
        l: usize,
        q: Var,
        support: &SupportVars,
        mode: MatchMode,
    ) -> Result<Matched> {
        if mode == MatchMode::None {
            let (w, b) = conv_params(g, s, &format!("match.l{l}.proj"))?;
            return Ok(Matched {
                phi: g.pointwise(q, w, Some(b))?,
                attention: Vec::new(),
            });
        }
        let (k, v) = match (support.keys.get(l), support.values.get(l)) {
            (Some(&k), Some(&v)) => (k, v),
            _ => return Err(shape_err!("support encodings lack level {l}")),
        };
        let mut phi: Option<Var> = None;
        let mut attention = Vec::new();
        for &axis in mode.axes() {
            let prefix = format!("match.l{l}.{}", axis_name(axis));
            let (p, a) = Self::match_branch(g, s, &prefix, q, k, v, axis, self.config.heads[l])?;
            attention.push(a);
            phi = Some(match phi {
                Some(acc) => g.add(acc, p)?,
                None => p,
            });
        }
        Ok(Matched {
            phi: phi.expect("modes other than none have a branch"),
            attention,
        })
    }

    /// U-shaped decoder from the matched maps to `(head, unclipped, restored)`.
    pub fn decode<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParameterStore<R>,
        phis: &[Var],
        xq: Var,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.config;
        if phis.len() != cfg.levels {
            return Err(shape_err!("decoder needs {} levels, got {}", cfg.levels, phis.len()));
        }
        let mut x = phis[cfg.levels - 1];
        for l in (0..cfg.levels).rev() {
            if l + 1 < cfg.levels {
                let (w, b) = conv_params(g, s, &format!("dec.up{l}"))?;
                let up = g.upsample(x, w, Some(b))?;
                x = g.add(up, phis[l])?;
            }
            for r in 0..2 {
                x = Self::residual_block(g, s, &format!("dec.l{l}.r{r}"), x)?;
            }
        }
        let (w, b) = conv_params(g, s, "dec.top.up")?;
        x = g.upsample(x, w, Some(b))?;
        x = Self::residual_block(g, s, "dec.top.r0", x)?;
        let (w, b) = conv_params(g, s, "dec.head")?;
        let head = g.pointwise(x, w, Some(b))?;
        let pre = match cfg.matched_features {
            MatchedFeatures::Pattern => g.sub(xq, head)?,
            MatchedFeatures::Background => head,
        };
        let (w, b) = conv_params(g, s, "dec.final")?;
        let unclipped = g.pointwise(pre, w, Some(b))?;
        let restored = g.clamp(unclipped, R::ZERO, R::ONE);
        Ok((head, unclipped, restored))
    }

    /// Full pipeline for a `[B, H, W, 3]` query batch against encoded supports.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParameterStore<R>,
        xq: Var,
        support: &SupportVars,
    ) -> Result<Forward> {
        self.forward_with_mode(g, s, xq, support, self.config.match_mode)
    }

    /// [`Network::forward`] with the matching mode overridden.
    pub fn forward_with_mode<R: Real>(
        &self,
        g: &mut Graph<R>,
        s: &ParameterStore<R>,
        xq: Var,
        support: &SupportVars,
        mode: MatchMode,
    ) -> Result<Forward> {
        let features = self.encode(g, s, xq)?;
        let matched = features
            .iter()
            .enumerate()
            .map(|(l, &q)| self.matching_module(g, s, l, q, support, mode))
            .collect::<Result<Vec<_>>>()?;
        let phis: Vec<Var> = matched.iter().map(|m| m.phi).collect();
        let (head, unclipped, restored) = self.decode(g, s, &phis, xq)?;
        Ok(Forward {
            features,
            matched,
            head,
            unclipped,
            restored,
        })
    }

    /// Restores query images against a cached support encoding.
    pub fn restore_cached<R: Real>(
        &self,
        s: &ParameterStore<R>,
        queries: &[&Image<R>],
        cache: &SupportCache<R>,
    ) -> Result<Vec<Image<R>>> {
        let mut g = Graph::new();
        let xq = g.input(stack_images(queries)?);
        let sv = cache.bind(&mut g);
        let f = self.forward(&mut g, s, xq, &sv)?;
        unstack_images(g.value(f.restored))
    }

    /// `Y_hat = F(X; S)` for one query.
    pub fn restore(&self, s: &ParameterStore<f32>, query: &Image, support: &[Pair]) -> Result<Image> {
        let cache = self.support_cache(s, support)?;
        Ok(self.restore_cached(s, &[query], &cache)?.remove(0))
    }
}

/// Names of bias-tagged tensors, in store order.
pub fn bias_parameters<R: Real>(store: &ParameterStore<R>) -> Vec<String> {
    store.bias_names()
}

/// Names of layer-norm scale and shift tensors.
pub fn layernorm_parameters<R: Real>(store: &ParameterStore<R>) -> Vec<String> {
    store
        .iter()
        .filter(|p| p.name.contains(".norm."))
        .map(|p| p.name.clone())
        .collect()
}

/// Whether a parameter belongs to the encoder learning-rate group.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}
