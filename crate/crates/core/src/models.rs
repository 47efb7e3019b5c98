//! Tiny causal sequence models.
//!
//! Both models share a pre-norm transformer backbone with single-head causal
//! attention. [`PolicyModel`] adds a language-model head and a value head;
//! [`RewardModel`] adds a scalar head read at the last non-padding position and
//! may project gaze features into its first-layer embeddings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::diffcore::{self, snapshot, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaze::GazeFeatures;

const LN_EPS: f64 = 1e-5;

/// Architecture sizes shared by policy and reward models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of the model width.
    pub ffn_mult: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            max_len: 64,
            n_blocks: 2,
            ffn_mult: 4,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return Err(Error::config(format!("degenerate model dims {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Token + position embeddings followed by transformer blocks and a final norm.
#[derive(Clone, Debug)]
struct Backbone {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    /// Width of the residual stream (embedding width plus any concatenated features).
    width: usize,
}

fn linear<R: Rng + ?Sized>(store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> ParamId {
    let std = scale / (fan_in as f64).sqrt();
    store.add(name, Tensor::randn(&[fan_in, fan_out], std, rng))
}

impl Backbone {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: &ModelDims, width: usize, rng: &mut R) -> Self {
        let d = dims.d_model;
        let tok = store.add("tok_emb", Tensor::randn(&[dims.vocab_size, d], 0.1, rng));
        let pos = store.add("pos_emb", Tensor::randn(&[dims.max_len, d], 0.1, rng));
        let resid_scale = 1.0 / ((2 * dims.n_blocks.max(1)) as f64).sqrt();
        let hidden = width * dims.ffn_mult;
        let blocks = (0..dims.n_blocks)
            .map(|i| Block {
                ln1_g: store.add(format!("block{i}.ln1.g"), Tensor::vector(vec![1.0; width])),
                ln1_b: store.add(format!("block{i}.ln1.b"), Tensor::zeros(&[width])),
                wq: linear(store, format!("block{i}.attn.wq"), width, width, 1.0, rng),
                wk: linear(store, format!("block{i}.attn.wk"), width, width, 1.0, rng),
                wv: linear(store, format!("block{i}.attn.wv"), width, width, 1.0, rng),
                wo: linear(store, format!("block{i}.attn.wo"), width, width, resid_scale, rng),
                ln2_g: store.add(format!("block{i}.ln2.g"), Tensor::vector(vec![1.0; width])),
                ln2_b: store.add(format!("block{i}.ln2.b"), Tensor::zeros(&[width])),
                w1: linear(store, format!("block{i}.ffn.w1"), width, hidden, 1.0, rng),
                b1: store.add(format!("block{i}.ffn.b1"), Tensor::zeros(&[hidden])),
                w2: linear(store, format!("block{i}.ffn.w2"), hidden, width, resid_scale, rng),
                b2: store.add(format!("block{i}.ffn.b2"), Tensor::zeros(&[width])),
            })
            .collect();
        Self {
            tok,
            pos,
            blocks,
            lnf_g: store.add("ln_f.g", Tensor::vector(vec![1.0; width])),
            lnf_b: store.add("ln_f.b", Tensor::zeros(&[width])),
            width,
        }
    }

    /// Token plus positional embeddings, `[T, d_model]`.
    fn embed(&self, g: &mut Graph<'_>, dims: &ModelDims, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::usage("empty token sequence"));
        }
        if tokens.len() > dims.max_len {
            return Err(Error::usage(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                dims.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= dims.vocab_size) {
            return Err(Error::usage(format!(
                "token id {bad} outside vocabulary of {}",
                dims.vocab_size
            )));
        }
        let tok = g.param(self.tok);
        let pos = g.param(self.pos);
        let te = g.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = g.embedding(pos, &positions)?;
        g.add(te, pe)
    }

    /// Runs the blocks on a `[T, width]` residual stream and applies the final norm.
    fn encode(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        let scale = 1.0 / (self.width as f64).sqrt();
        for b in &self.blocks {
            let (g1, b1) = (g.param(b.ln1_g), g.param(b.ln1_b));
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let (wq, wk, wv, wo) = (g.param(b.wq), g.param(b.wk), g.param(b.wv), g.param(b.wo));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let masked = g.causal_mask(scores)?;
            let attn = g.softmax(masked);
            let ctx = g.matmul(attn, v)?;
            let out = g.matmul(ctx, wo)?;
            x = g.add(x, out)?;

            let (g2, b2) = (g.param(b.ln2_g), g.param(b.ln2_b));
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let (w1, bb1, w2, bb2) = (g.param(b.w1), g.param(b.b1), g.param(b.w2), g.param(b.b2));
            let f = g.matmul(h, w1)?;
            let f = g.add(f, bb1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add(f, bb2)?;
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param(self.lnf_g), g.param(self.lnf_b));
        g.layer_norm(x, gf, bf, LN_EPS)
    }
}

/// Log-probabilities and values for every position of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// `[T, V]`; row `i` is the distribution of the token following position `i`.
    pub logprobs: Tensor,
    pub values: Vec<f64>,
}

/// How the next token is chosen during generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    /// The zero-temperature limit: always the most likely token (lowest id on ties).
    Greedy,
    Temperature(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateConfig {
    pub max_new: usize,
    pub sampling: Sampling,
    pub eos: Option<usize>,
}

/// Causal language model with a value head sharing the backbone.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    dims: ModelDims,
    store: ParamStore,
    backbone: Backbone,
    lm_head: ParamId,
    value_w: ParamId,
    value_b: ParamId,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &dims, dims.d_model, rng);
        let lm_head = linear(&mut store, "lm_head".into(), dims.d_model, dims.vocab_size, 1.0, rng);
        let value_w = linear(&mut store, "value.w".into(), dims.d_model, 1, 0.1, rng);
        let value_b = store.add("value.b", Tensor::zeros(&[1]));
        Ok(Self {
            dims,
            store,
            backbone,
            lm_head,
            value_w,
            value_b,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameters of the value head; the policy-gradient terms do not touch them.
    pub fn value_head_params(&self) -> [ParamId; 2] {
        [self.value_w, self.value_b]
    }

    pub fn zero_lm_head(&mut self) {
        self.store.get_mut(self.lm_head).data_mut().fill(0.0);
    }

    /// Records the forward pass into `g`, which must have been built on [`PolicyModel::params`].
    /// Returns `([T, V]` log-probabilities, `[T]` values).
    pub fn forward_graph(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Result<(Var, Var)> {
        let x = self.backbone.embed(g, &self.dims, tokens)?;
        let h = self.backbone.encode(g, x)?;
        let head = g.param(self.lm_head);
        let logits = g.matmul(h, head)?;
        let logprobs = g.log_softmax(logits);
        let (vw, vb) = (g.param(self.value_w), g.param(self.value_b));
        let v = g.matmul(h, vw)?;
        let v = g.add(v, vb)?;
        let values = g.reshape(v, &[tokens.len()])?;
        Ok((logprobs, values))
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<PolicyOutput> {
        let mut g = Graph::with_params(&self.store);
        let (lp, v) = self.forward_graph(&mut g, tokens)?;
        Ok(PolicyOutput {
            logprobs: g.tensor(lp),
            values: g.value(v).to_vec(),
        })
    }

    /// Logits of the token following the whole sequence.
    pub fn next_token_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let x = self.backbone.embed(&mut g, &self.dims, tokens)?;
        let h = self.backbone.encode(&mut g, x)?;
        let last = g.select_rows(h, &[tokens.len() - 1])?;
        let head = g.param(self.lm_head);
        let logits = g.matmul(last, head)?;
        Ok(g.value(logits).to_vec())
    }

    /// Extends `prompt` autoregressively. Stops after `max_new` tokens, at `max_len`,
    /// or right after emitting `eos`.
    pub fn generate<R: Rng + ?Sized>(&self, prompt: &[usize], cfg: &GenerateConfig, rng: &mut R) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::usage("generate needs a nonempty prompt"));
        }
        if let Sampling::Temperature(t) = cfg.sampling {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::usage(format!("temperature must be > 0, got {t}")));
            }
        }
        let mut seq = prompt.to_vec();
        for _ in 0..cfg.max_new {
            if seq.len() >= self.dims.max_len {
                break;
            }
            let logits = self.next_token_logits(&seq)?;
            let next = match cfg.sampling {
                Sampling::Greedy => argmax(&logits),
                Sampling::Temperature(t) => sample_logits(&logits, t, rng),
            };
            seq.push(next);
            if Some(next) == cfg.eos {
                break;
            }
        }
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        snapshot::save(&self.store, path)?;
        write_sidecar(path, &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = read_sidecar(path)?;
        if meta.kind != "policy" {
            return Err(Error::config(format!("{} holds a {} checkpoint", path.display(), meta.kind)));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(meta.dims, &mut rng)?;
        model.store.load_named(&snapshot::load(path)?)?;
        Ok(model)
    }

    fn metadata(&self) -> Metadata {
        Metadata {
            kind: "policy".into(),
            dims: self.dims,
            gaze: None,
            score_offset: 0.0,
            identity: None,
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    diffcore::softmax_in_place(&mut p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left `acc` just below 1: fall back to the last token with mass
    p.iter().rposition(|x| *x > 0.0).unwrap_or(p.len() - 1)
}

/// Where projected gaze features enter the reward model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GazeMode {
    /// Projection has width `d_model` and is added to the token embeddings.
    Add,
    /// Projection of width `gaze_dim` is appended; the backbone runs at `d_model + gaze_dim`.
    Concat,
}

impl fmt::Display for GazeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GazeMode::Add => "add",
            GazeMode::Concat => "concat",
        })
    }
}

impl FromStr for GazeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(GazeMode::Add),
            "concat" => Ok(GazeMode::Concat),
            other => Err(Error::config(format!("unknown gaze integration mode '{other}'"))),
        }
    }
}

/// Sizes of a gaze projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GazeProjectionSpec {
    pub mode: GazeMode,
    pub hidden: usize,
    /// Output width in `concat` mode (ignored for `add`, which uses `d_model`).
    pub gaze_dim: usize,
}

impl GazeProjectionSpec {
    pub fn new(mode: GazeMode) -> Self {
        Self {
            mode,
            hidden: 16,
            gaze_dim: 16,
        }
    }

    fn out_dim(&self, d_model: usize) -> usize {
        match self.mode {
            GazeMode::Add => d_model,
            GazeMode::Concat => self.gaze_dim,
        }
    }
}

/// Two-layer feed-forward map from the four gaze features into embedding space.
#[derive(Clone, Debug)]
pub struct GazeProjection {
    spec: GazeProjectionSpec,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl GazeProjection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: GazeProjectionSpec, d_model: usize, zero: bool, rng: &mut R) -> Self {
        let out = spec.out_dim(d_model);
        let w1 = linear(store, "gaze.w1".into(), 4, spec.hidden, 1.0, rng);
        let b1 = store.add("gaze.b1", Tensor::zeros(&[spec.hidden]));
        let w2 = if zero {
            store.add("gaze.w2", Tensor::zeros(&[spec.hidden, out]))
        } else {
            linear(store, "gaze.w2".into(), spec.hidden, out, 1.0, rng)
        };
        let b2 = store.add("gaze.b2", Tensor::zeros(&[out]));
        Self { spec, w1, b1, w2, b2 }
    }

    pub fn spec(&self) -> &GazeProjectionSpec {
        &self.spec
    }

    fn apply(&self, g: &mut Graph<'_>, gaze: &[GazeFeatures]) -> Result<Var> {
        let flat: Vec<f64> = gaze.iter().flat_map(|f| f.as_array()).collect();
        let x = g.constant(Tensor::matrix(gaze.len(), 4, flat)?);
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }
}

/// Provenance tag distinguishing reward models trained on different data.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ModelIdentity {
    pub role: String,
    pub seed: u64,
    pub split: String,
}

impl ModelIdentity {
    pub fn new(role: impl Into<String>, seed: u64, split: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            seed,
            split: split.into(),
        }
    }

    /// Two models share training inputs when either their seed or their data split coincide.
    pub fn overlaps(&self, other: &ModelIdentity) -> bool {
        self.seed == other.seed || self.split == other.split
    }
}

impl fmt::Display for ModelIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:seed={}:split={}", self.role, self.seed, self.split)
    }
}

/// Scalar sequence scorer, optionally gaze-augmented.
#[derive(Clone, Debug)]
pub struct RewardModel {
    dims: ModelDims,
    store: ParamStore,
    backbone: Backbone,
    gaze: Option<GazeProjection>,
    head_w: ParamId,
    head_b: ParamId,
    pad: Option<usize>,
    /// Subtracted from every raw score.
    pub score_offset: f64,
    pub identity: ModelIdentity,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, gaze: Option<GazeProjectionSpec>, identity: ModelIdentity, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let width = dims.d_model + gaze.map_or(0, |s| match s.mode {
            GazeMode::Add => 0,
            GazeMode::Concat => s.gaze_dim,
        });
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &dims, width, rng);
        let head_w = linear(&mut store, "score.w".into(), width, 1, 1.0, rng);
        let head_b = store.add("score.b", Tensor::zeros(&[1]));
        let gaze = gaze.map(|s| GazeProjection::new(&mut store, s, dims.d_model, false, rng));
        Ok(Self {
            dims,
            store,
            backbone,
            gaze,
            head_w,
            head_b,
            pad: None,
            score_offset: 0.0,
            identity,
        })
    }

    /// Copy of a gaze-free model with an `add`-mode projection attached. With `zero`
    /// the projection's output layer is all zeros, so scores are unchanged.
    pub fn with_add_projection<R: Rng + ?Sized>(&self, hidden: usize, zero: bool, rng: &mut R) -> Result<Self> {
        if self.gaze.is_some() {
            return Err(Error::usage("model already has a gaze projection"));
        }
        let mut out = self.clone();
        let spec = GazeProjectionSpec {
            mode: GazeMode::Add,
            hidden,
            gaze_dim: self.dims.d_model,
        };
        out.gaze = Some(GazeProjection::new(&mut out.store, spec, self.dims.d_model, zero, rng));
        Ok(out)
    }

    /// Treat `pad` as padding: the score is read at the last other token.
    pub fn with_pad(mut self, pad: Option<usize>) -> Self {
        self.pad = pad;
        self
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn gaze_projection(&self) -> Option<&GazeProjection> {
        self.gaze.as_ref()
    }

    pub fn gaze_mode(&self) -> Option<GazeMode> {
        self.gaze.as_ref().map(|p| p.spec.mode)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records the raw (offset-free) score into `g`, built on [`RewardModel::params`].
    pub fn score_graph(&self, g: &mut Graph<'_>, tokens: &[usize], gaze: Option<&[GazeFeatures]>) -> Result<Var> {
        let mut x = self.backbone.embed(g, &self.dims, tokens)?;
        match (&self.gaze, gaze) {
            (None, Some(_)) => {
                return Err(Error::usage("gaze features supplied to a gaze-free reward model"))
            }
            (Some(_), None) => {
                return Err(Error::usage("gaze-augmented reward model requires gaze features"))
            }
            (Some(proj), Some(feats)) => {
                if feats.len() != tokens.len() {
                    return Err(Error::usage(format!(
                        "{} gaze vectors for {} tokens",
                        feats.len(),
                        tokens.len()
                    )));
                }
                let p = proj.apply(g, feats)?;
                x = match proj.spec.mode {
                    GazeMode::Add => g.add(x, p)?,
                    GazeMode::Concat => g.concat_cols(x, p)?,
                };
            }
            (None, None) => {}
        }
        let h = self.backbone.encode(g, x)?;
        let last = match self.pad {
            Some(pad) => tokens
                .iter()
                .rposition(|t| *t != pad)
                .ok_or_else(|| Error::usage("sequence is all padding"))?,
            None => tokens.len() - 1,
        };
        let row = g.select_rows(h, &[last])?;
        let (w, b) = (g.param(self.head_w), g.param(self.head_b));
        let s = g.matmul(row, w)?;
        let s = g.add(s, b)?;
        g.reshape(s, &[])
    }

    /// Score of a whole (prompt + response) sequence.
    pub fn score(&self, tokens: &[usize], gaze: Option<&[GazeFeatures]>) -> Result<f64> {
        let mut g = Graph::with_params(&self.store);
        let s = self.score_graph(&mut g, tokens, gaze)?;
        let v = g.item(s) - self.score_offset;
        if !v.is_finite() {
            return Err(Error::Diverged(format!("reward model {} produced {v}", self.identity)));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        snapshot::save(&self.store, path)?;
        write_sidecar(
            path,
            &Metadata {
                kind: "reward".into(),
                dims: self.dims,
                gaze: self.gaze.as_ref().map(|p| p.spec),
                score_offset: self.score_offset,
                identity: Some(self.identity.clone()),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta = read_sidecar(path)?;
        if meta.kind != "reward" {
            return Err(Error::config(format!("{} holds a {} checkpoint", path.display(), meta.kind)));
        }
        let identity = meta
            .identity
            .ok_or_else(|| Error::config("reward checkpoint lacks an identity"))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(meta.dims, meta.gaze, identity, &mut rng)?;
        model.store.load_named(&snapshot::load(path)?)?;
        model.score_offset = meta.score_offset;
        Ok(model)
    }
}

/// Plain-text `key = value` sidecar describing a checkpoint.
#[derive(Clone, Debug, PartialEq)]
struct Metadata {
    kind: String,
    dims: ModelDims,
    gaze: Option<GazeProjectionSpec>,
    score_offset: f64,
    identity: Option<ModelIdentity>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    p.into()
}

fn write_sidecar(path: &Path, m: &Metadata) -> Result<()> {
    let mut s = format!(
        "kind = {}\nvocab_size = {}\nd_model = {}\nmax_len = {}\nn_blocks = {}\nffn_mult = {}\n",
        m.kind, m.dims.vocab_size, m.dims.d_model, m.dims.max_len, m.dims.n_blocks, m.dims.ffn_mult
    );
    match &m.gaze {
        Some(g) => s.push_str(&format!(
            "gaze_mode = {}\ngaze_hidden = {}\ngaze_dim = {}\n",
            g.mode, g.hidden, g.gaze_dim
        )),
        None => s.push_str("gaze_mode = none\n"),
    }
    // `{:?}` prints the shortest string that round-trips exactly
    s.push_str(&format!("score_offset = {:?}\n", m.score_offset));
    if let Some(id) = &m.identity {
        s.push_str(&format!(
            "identity_role = {}\nidentity_seed = {}\nidentity_split = {}\n",
            id.role, id.seed, id.split
        ));
    }
    let p = sidecar_path(path);
    std::fs::write(&p, s).map_err(|e| Error::io(p, e))
}

fn read_sidecar(path: &Path) -> Result<Metadata> {
    let p = sidecar_path(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let origin = p.display().to_string();
    let mut kv = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.clone(),
            line: i + 1,
            message: "expected 'key = value'".into(),
        })?;
        kv.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    let get = |k: &str| {
        kv.get(k).cloned().ok_or_else(|| Error::Parse {
            path: origin.clone(),
            line: 0,
            message: format!("missing key '{k}'"),
        })
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Parse {
            path: origin.clone(),
            line: 0,
            message: format!("bad integer for '{k}'"),
        })
    };
    let dims = ModelDims {
        vocab_size: num("vocab_size")?,
        d_model: num("d_model")?,
        max_len: num("max_len")?,
        n_blocks: num("n_blocks")?,
        ffn_mult: num("ffn_mult")?,
    };
    let gaze = match get("gaze_mode")?.as_str() {
        "none" => None,
        mode => Some(GazeProjectionSpec {
            mode: mode.parse()?,
            hidden: num("gaze_hidden")?,
            gaze_dim: num("gaze_dim")?,
        }),
    };
    let score_offset = get("score_offset")?.parse().map_err(|_| Error::Parse {
        path: origin.clone(),
        line: 0,
        message: "bad score_offset".into(),
    })?;
    let identity = match kv.get("identity_role") {
        Some(role) => Some(ModelIdentity {
            role: role.clone(),
            seed: get("identity_seed")?.parse().map_err(|_| Error::Parse {
                path: origin.clone(),
                line: 0,
                message: "bad identity_seed".into(),
            })?,
            split: get("identity_split")?,
        }),
        None => None,
    };
    Ok(Metadata {
        kind: get("kind")?,
        dims,
        gaze,
        score_offset,
        identity,
    })
}
