//! Synthetic preference task.
//!
//! Prompts are `[BOS, cue.., SEP]`; every cue names a required content keyword.
//! The ground-truth score rewards covering the required keywords and penalises
//! function words and overlong answers, so the quality signal sits in a few
//! content tokens, exactly the tokens the default gaze table reads longest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::gaze::{TokenClass, TokenClassMap};
use crate::models::{GenerateConfig, PolicyModel, Sampling};
use crate::rewardlab::PreferencePair;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VocabEntry {
    pub surface: String,
    pub class: String,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpecialTokens {
    pub pad: String,
    pub bos: String,
    pub eos: String,
    pub sep: String,
}

/// Parameters of the ground-truth quality function.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringParams {
    /// Added once per required keyword present in the response.
    pub keyword_bonus: f64,
    /// Multiplies the fraction of response words that are function words.
    pub function_penalty: f64,
    /// Charged per word beyond `target_length`.
    pub length_penalty: f64,
    pub target_length: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptParams {
    pub min_keywords: usize,
    pub max_keywords: usize,
    /// Longest response (in tokens, end-of-sequence included).
    pub max_response: usize,
}

/// On-disk form of a task specification.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskFile {
    vocab: Vec<(String, String)>,
    special: SpecialTokens,
    scoring: ScoringParams,
    prompts: PromptParams,
    /// cue surface -> required keyword surface
    keywords: BTreeMap<String, String>,
}

/// Resolved task: vocabulary with classes, keyword map and scoring parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    surfaces: Vec<String>,
    classes: Vec<TokenClass>,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub sep: usize,
    /// cue id -> required keyword id
    keywords: BTreeMap<usize, usize>,
    pub scoring: ScoringParams,
    pub prompts: PromptParams,
}

const DEFAULT_VOCAB: &[(&str, &str)] = &[
    ("<pad>", "OTHER"),
    ("<bos>", "OTHER"),
    ("<eos>", "OTHER"),
    ("<sep>", "OTHER"),
    (".", "PUNCT"),
    (",", "PUNCT"),
    ("-", "PUNCT"),
    ("!", "PUNCT"),
    ("the", "FUNC_DET"),
    ("a", "FUNC_DET"),
    ("an", "FUNC_DET"),
    ("this", "FUNC_DET"),
    ("of", "FUNC_PREP"),
    ("in", "FUNC_PREP"),
    ("on", "FUNC_PREP"),
    ("at", "FUNC_PREP"),
    ("with", "FUNC_PREP"),
    ("it", "FUNC_PRON"),
    ("they", "FUNC_PRON"),
    ("we", "FUNC_PRON"),
    ("he", "FUNC_PRON"),
    ("to", "FUNC_TO"),
    ("and", "FUNC_CONJ"),
    ("or", "FUNC_CONJ"),
    ("but", "FUNC_CONJ"),
    ("um", "OTHER"),
    ("etc", "OTHER"),
    ("ok", "OTHER"),
    ("river", "CONTENT_NOUN"),
    ("stone", "CONTENT_NOUN"),
    ("garden", "CONTENT_NOUN"),
    ("engine", "CONTENT_NOUN"),
    ("letter", "CONTENT_NOUN"),
    ("market", "CONTENT_NOUN"),
    ("window", "CONTENT_NOUN"),
    ("forest", "CONTENT_NOUN"),
    ("bridge", "CONTENT_NOUN"),
    ("signal", "CONTENT_NOUN"),
    ("harvest", "CONTENT_NOUN"),
    ("ladder", "CONTENT_NOUN"),
    ("build", "CONTENT_VERB"),
    ("carry", "CONTENT_VERB"),
    ("repair", "CONTENT_VERB"),
    ("measure", "CONTENT_VERB"),
    ("paint", "CONTENT_VERB"),
    ("follow", "CONTENT_VERB"),
    ("collect", "CONTENT_VERB"),
    ("explain", "CONTENT_VERB"),
    ("protect", "CONTENT_VERB"),
    ("compare", "CONTENT_VERB"),
    ("bright", "CONTENT_ADJ"),
    ("heavy", "CONTENT_ADJ"),
    ("quiet", "CONTENT_ADJ"),
    ("narrow", "CONTENT_ADJ"),
    ("ancient", "CONTENT_ADJ"),
    ("simple", "CONTENT_ADJ"),
    ("green", "CONTENT_ADJ"),
    ("quickly", "CONTENT_ADV"),
    ("carefully", "CONTENT_ADV"),
    ("often", "CONTENT_ADV"),
    ("rarely", "CONTENT_ADV"),
    ("gently", "CONTENT_ADV"),
    ("early", "CONTENT_ADV"),
    ("together", "CONTENT_ADV"),
];

impl Default for TaskSpec {
    /// 64-token vocabulary; every noun and verb is a keyword named by itself.
    fn default() -> Self {
        let keywords = DEFAULT_VOCAB
            .iter()
            .filter(|(_, c)| *c == "CONTENT_NOUN" || *c == "CONTENT_VERB")
            .map(|(s, _)| (s.to_string(), s.to_string()))
            .collect();
        let file = TaskFile {
            vocab: DEFAULT_VOCAB
                .iter()
                .map(|(s, c)| (s.to_string(), c.to_string()))
                .collect(),
            special: SpecialTokens {
                pad: "<pad>".into(),
                bos: "<bos>".into(),
                eos: "<eos>".into(),
                sep: "<sep>".into(),
            },
            scoring: ScoringParams {
                keyword_bonus: 1.0,
                function_penalty: 0.5,
                length_penalty: 0.1,
                target_length: 6,
            },
            prompts: PromptParams {
                min_keywords: 1,
                max_keywords: 3,
                max_response: 10,
            },
            keywords,
        };
        Self::from_file(file).expect("default task is valid")
    }
}

impl TaskSpec {
    fn from_file(f: TaskFile) -> Result<Self> {
        let surfaces: Vec<String> = f.vocab.iter().map(|(s, _)| s.clone()).collect();
        let classes = f
            .vocab
            .iter()
            .map(|(_, c)| c.parse())
            .collect::<Result<Vec<TokenClass>>>()?;
        let lookup = |s: &str| {
            surfaces
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::config(format!("'{s}' is not in the vocabulary")))
        };
        let mut seen = BTreeSet::new();
        if let Some(dup) = surfaces.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::config(format!("duplicate vocabulary entry '{dup}'")));
        }
        let keywords = f
            .keywords
            .iter()
            .map(|(cue, kw)| Ok((lookup(cue)?, lookup(kw)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let spec = Self {
            pad: lookup(&f.special.pad)?,
            bos: lookup(&f.special.bos)?,
            eos: lookup(&f.special.eos)?,
            sep: lookup(&f.special.sep)?,
            surfaces,
            classes,
            keywords,
            scoring: f.scoring,
            prompts: f.prompts,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for (&cue, &kw) in &self.keywords {
            if !self.classes[kw].is_content() {
                return Err(Error::config(format!(
                    "keyword '{}' has class {}, expected CONTENT_*",
                    self.surfaces[kw], self.classes[kw]
                )));
            }
            if self.is_special(cue) || self.is_special(kw) {
                return Err(Error::config("special tokens cannot be cues or keywords"));
            }
        }
        let p = &self.prompts;
        if p.min_keywords == 0 || p.min_keywords > p.max_keywords {
            return Err(Error::config(format!(
                "keyword count range {}..={} is empty or starts at 0",
                p.min_keywords, p.max_keywords
            )));
        }
        if p.max_keywords > self.keywords.len() {
            return Err(Error::config("max_keywords exceeds the number of keyword cues"));
        }
        if p.max_response < 2 {
            return Err(Error::config("max_response must leave room for a word and <eos>"));
        }
        if self.response_vocab().is_empty() {
            return Err(Error::config("vocabulary has no non-special tokens"));
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: TaskFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_owned(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let name = |i: usize| self.surfaces[i].clone();
        let file = TaskFile {
            vocab: self
                .surfaces
                .iter()
                .zip(&self.classes)
                .map(|(s, c)| (s.clone(), c.to_string()))
                .collect(),
            special: SpecialTokens {
                pad: name(self.pad),
                bos: name(self.bos),
                eos: name(self.eos),
                sep: name(self.sep),
            },
            scoring: self.scoring,
            prompts: self.prompts,
            keywords: self.keywords.iter().map(|(c, k)| (name(*c), name(*k))).collect(),
        };
        toml::to_string(&file).expect("task spec serialises")
    }

    pub fn vocab_size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.surfaces[id]
    }

    pub fn class(&self, id: usize) -> TokenClass {
        self.classes[id]
    }

    pub fn class_map(&self) -> TokenClassMap {
        let continuation = self.surfaces.iter().map(|s| s.starts_with("##")).collect();
        TokenClassMap::with_continuations(self.classes.clone(), continuation)
            .expect("equal lengths")
    }

    pub fn is_special(&self, id: usize) -> bool {
        [self.pad, self.bos, self.eos, self.sep].contains(&id)
    }

    /// Tokens that may appear inside a response.
    pub fn response_vocab(&self) -> Vec<usize> {
        (0..self.surfaces.len()).filter(|t| !self.is_special(*t)).collect()
    }

    pub fn cues(&self) -> impl Iterator<Item = usize> + '_ {
        self.keywords.keys().copied()
    }

    pub fn is_keyword(&self, id: usize) -> bool {
        self.keywords.values().any(|k| *k == id)
    }

    /// Required keywords named by a prompt, deduplicated, in first-mention order.
    pub fn required_keywords(&self, prompt: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for t in prompt {
            if let Some(&kw) = self.keywords.get(t) {
                if !out.contains(&kw) {
                    out.push(kw);
                }
            }
        }
        out
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|t| self.surfaces.get(*t).map_or("<?>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `count` instruction-only prompts naming distinct keyword cues.
pub fn make_prompt_set<R: Rng + ?Sized>(spec: &TaskSpec, count: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Err(Error::usage("prompt set size must be >= 1"));
    }
    let cues: Vec<usize> = spec.cues().collect();
    let p = spec.prompts;
    Ok((0..count)
        .map(|_| {
            let k = rng.random_range(p.min_keywords..=p.max_keywords);
            let mut prompt = vec![spec.bos];
            prompt.extend(cues.choose_multiple(rng, k).copied());
            prompt.push(spec.sep);
            prompt
        })
        .collect())
}

/// Ground-truth quality of a response to a prompt.
pub fn ground_truth_score(spec: &TaskSpec, prompt: &[usize], response: &[usize]) -> f64 {
    let words: Vec<usize> = response.iter().copied().filter(|t| !spec.is_special(*t)).collect();
    let s = &spec.scoring;
    let present = spec
        .required_keywords(prompt)
        .iter()
        .filter(|k| words.contains(k))
        .count();
    let function_fraction = if words.is_empty() {
        0.0
    } else {
        words.iter().filter(|t| spec.class(**t).is_function()).count() as f64 / words.len() as f64
    };
    let excess = words.len().saturating_sub(s.target_length);
    s.keyword_bonus * present as f64 - s.function_penalty * function_fraction - s.length_penalty * excess as f64
}

/// Source of candidate responses for preference-pair construction.
pub trait ResponseSampler {
    fn sample(&self, prompt: &[usize], rng: &mut dyn RngCore) -> Result<Vec<usize>>;
}

/// Uniformly random words of uniformly random length, closed by `<eos>`.
pub struct UniformSampler<'a> {
    spec: &'a TaskSpec,
    words: Vec<usize>,
}

impl<'a> UniformSampler<'a> {
    pub fn new(spec: &'a TaskSpec) -> Self {
        Self {
            spec,
            words: spec.response_vocab(),
        }
    }
}

impl ResponseSampler for UniformSampler<'_> {
    fn sample(&self, _prompt: &[usize], rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let n = rng.random_range(1..self.spec.prompts.max_response);
        let mut out: Vec<usize> = (0..n)
            .map(|_| self.words[rng.random_range(0..self.words.len())])
            .collect();
        out.push(self.spec.eos);
        Ok(out)
    }
}

/// Samples responses from a policy at temperature 1.
pub struct PolicySampler<'a> {
    pub policy: &'a PolicyModel,
    pub max_new: usize,
    pub eos: usize,
}

impl ResponseSampler for PolicySampler<'_> {
    fn sample(&self, prompt: &[usize], mut rng: &mut dyn RngCore) -> Result<Vec<usize>> {
        let cfg = GenerateConfig {
            max_new: self.max_new,
            sampling: Sampling::Temperature(1.0),
            eos: Some(self.eos),
        };
        let full = self.policy.generate(prompt, &cfg, &mut rng)?;
        Ok(full[prompt.len()..].to_vec())
    }
}

/// For every prompt, samples `k` candidates and pairs the best against the worst.
/// Prompts whose candidates all tie are skipped.
pub fn generate_preference_pairs(
    spec: &TaskSpec,
    prompts: &[Vec<usize>],
    sampler: &dyn ResponseSampler,
    k: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<PreferencePair>> {
    if k < 2 {
        return Err(Error::usage(format!("need at least 2 candidates per prompt, got {k}")));
    }
    let mut pairs = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let candidates = (0..k)
            .map(|_| sampler.sample(prompt, rng))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| ground_truth_score(spec, prompt, c))
            .collect();
        let best = (0..k).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
        let worst = (0..k).fold(0, |w, i| if scores[i] < scores[w] { i } else { w });
        if scores[best] <= scores[worst] {
            log::warn!("all {k} candidates tie for prompt {prompt:?}; skipped");
            continue;
        }
        pairs.push(PreferencePair::new(
            prompt.clone(),
            candidates[best].clone(),
            candidates[worst].clone(),
        )?);
    }
    Ok(pairs)
}

/// How concentrated the ground-truth signal is in keyword tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignalSparsity {
    /// Share of response words that are required keywords.
    pub keyword_token_fraction: f64,
    /// `1 - Var(score without keyword bonus) / Var(score)` over the sampled responses.
    pub keyword_variance_share: f64,
}

fn variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Measures [`SignalSparsity`] on `n` uniformly random responses to random prompts.
pub fn measure_signal_sparsity<R: Rng>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<SignalSparsity> {
    let sampler = UniformSampler::new(spec);
    let prompts = make_prompt_set(spec, n, rng)?;
    let mut ablated_spec = spec.clone();
    ablated_spec.scoring.keyword_bonus = 0.0;
    let (mut full, mut ablated) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut kw_tokens, mut words) = (0usize, 0usize);
    for p in &prompts {
        let r = sampler.sample(p, rng)?;
        full.push(ground_truth_score(spec, p, &r));
        ablated.push(ground_truth_score(&ablated_spec, p, &r));
        let req = spec.required_keywords(p);
        for t in r.iter().filter(|t| !spec.is_special(**t)) {
            words += 1;
            if req.contains(t) {
                kw_tokens += 1;
            }
        }
    }
    Ok(SignalSparsity {
        keyword_token_fraction: kw_tokens as f64 / words.max(1) as f64,
        keyword_variance_share: 1.0 - variance(&ablated) / variance(&full),
    })
}
