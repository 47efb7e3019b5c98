//! Per-token gaze prediction, subtoken aggregation and the token-class gaze report.
//!
//! The predictor is a frozen class-conditional table: each token class carries
//! mean reading-time features, optionally perturbed by clamped Gaussian noise.
//! The default table uses the mean attention per coarse part-of-speech class
//! as its Total Reading Time column.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Predicted eye-tracking variables for one token.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GazeFeatures {
    /// First Fixation Duration.
    pub ffd: f64,
    /// Go-Past Time.
    pub gpt: f64,
    /// Total Reading Time.
    pub trt: f64,
    /// Number of fixations.
    pub nfix: f64,
}

/// Fixed multiples of TRT used to derive the companion features in the default table.
pub const FFD_PER_TRT: f64 = 0.4;
pub const GPT_PER_TRT: f64 = 1.2;
pub const NFIX_PER_TRT: f64 = 3.0;

impl GazeFeatures {
    pub const ZERO: GazeFeatures = GazeFeatures {
        ffd: 0.0,
        gpt: 0.0,
        trt: 0.0,
        nfix: 0.0,
    };

    pub fn new(ffd: f64, gpt: f64, trt: f64, nfix: f64) -> Result<Self> {
        let g = Self { ffd, gpt, trt, nfix };
        if g.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("gaze features must be finite and >= 0: {g:?}")));
        }
        Ok(g)
    }

    /// Companion features as fixed multiples of TRT.
    pub fn from_trt(trt: f64) -> Self {
        Self {
            ffd: FFD_PER_TRT * trt,
            gpt: GPT_PER_TRT * trt,
            trt,
            nfix: NFIX_PER_TRT * trt,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ffd, self.gpt, self.trt, self.nfix]
    }
}

/// Coarse part-of-speech classes of the synthetic vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenClass {
    ContentVerb,
    ContentNoun,
    ContentAdj,
    ContentAdv,
    FuncDet,
    FuncPrep,
    FuncPron,
    FuncTo,
    FuncConj,
    Punct,
    Other,
}

impl TokenClass {
    pub const ALL: [TokenClass; 11] = [
        TokenClass::ContentVerb,
        TokenClass::ContentNoun,
        TokenClass::ContentAdj,
        TokenClass::ContentAdv,
        TokenClass::FuncDet,
        TokenClass::FuncPrep,
        TokenClass::FuncPron,
        TokenClass::FuncTo,
        TokenClass::FuncConj,
        TokenClass::Punct,
        TokenClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::ContentVerb => "CONTENT_VERB",
            TokenClass::ContentNoun => "CONTENT_NOUN",
            TokenClass::ContentAdj => "CONTENT_ADJ",
            TokenClass::ContentAdv => "CONTENT_ADV",
            TokenClass::FuncDet => "FUNC_DET",
            TokenClass::FuncPrep => "FUNC_PREP",
            TokenClass::FuncPron => "FUNC_PRON",
            TokenClass::FuncTo => "FUNC_TO",
            TokenClass::FuncConj => "FUNC_CONJ",
            TokenClass::Punct => "PUNCT",
            TokenClass::Other => "OTHER",
        }
    }

    pub fn is_content(self) -> bool {
        matches!(
            self,
            TokenClass::ContentVerb
                | TokenClass::ContentNoun
                | TokenClass::ContentAdj
                | TokenClass::ContentAdv
        )
    }

    pub fn is_function(self) -> bool {
        matches!(
            self,
            TokenClass::FuncDet
                | TokenClass::FuncPrep
                | TokenClass::FuncPron
                | TokenClass::FuncTo
                | TokenClass::FuncConj
        )
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown token class '{s}'")))
    }
}

/// Class of every vocabulary id, plus which ids continue the previous word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenClassMap {
    classes: Vec<TokenClass>,
    continuation: Vec<bool>,
}

impl TokenClassMap {
    pub fn new(classes: Vec<TokenClass>) -> Self {
        let n = classes.len();
        Self {
            classes,
            continuation: vec![false; n],
        }
    }

    /// `continuation[i]` marks id `i` as a subword piece attached to the preceding token.
    pub fn with_continuations(classes: Vec<TokenClass>, continuation: Vec<bool>) -> Result<Self> {
        if classes.len() != continuation.len() {
            return Err(Error::config("class and continuation tables differ in length"));
        }
        Ok(Self {
            classes,
            continuation,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_of(&self, token: usize) -> Result<TokenClass> {
        self.classes
            .get(token)
            .copied()
            .ok_or_else(|| Error::config(format!("token {token} has no class mapping")))
    }

    /// Splits a token sequence into word ranges; a word starts at every non-continuation token.
    pub fn word_ranges(&self, tokens: &[usize]) -> Result<Vec<Range<usize>>> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            self.class_of(t)?;
            if self.continuation[t] && !ranges.is_empty() {
                ranges.last_mut().unwrap().end = i + 1;
            } else {
                ranges.push(i..i + 1);
            }
        }
        Ok(ranges)
    }
}

/// Frozen class-conditional gaze predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeTable {
    means: BTreeMap<TokenClass, GazeFeatures>,
    /// Standard deviation of the additive Gaussian noise applied per feature.
    pub noise_sigma: f64,
}

impl Default for GazeTable {
    /// Mean attention per coarse part-of-speech class, used as TRT.
    fn default() -> Self {
        let trt = [
            (TokenClass::ContentVerb, 0.2697),
            (TokenClass::ContentNoun, 0.2295),
            (TokenClass::ContentAdv, 0.1466),
            (TokenClass::ContentAdj, 0.1355),
            (TokenClass::Punct, 0.1316),
            (TokenClass::FuncPron, 0.0402),
            (TokenClass::FuncPrep, 0.0386),
            (TokenClass::FuncDet, 0.0376),
            (TokenClass::Other, 0.0369),
            (TokenClass::FuncConj, 0.0318),
            (TokenClass::FuncTo, 0.0122),
        ];
        Self {
            means: trt
                .into_iter()
                .map(|(c, t)| (c, GazeFeatures::from_trt(t)))
                .collect(),
            noise_sigma: 0.0,
        }
    }
}

impl GazeTable {
    /// Builds a table; every class must be covered.
    pub fn new(means: BTreeMap<TokenClass, GazeFeatures>, noise_sigma: f64) -> Result<Self> {
        if let Some(missing) = TokenClass::ALL.iter().find(|c| !means.contains_key(c)) {
            return Err(Error::config(format!("gaze table has no entry for {missing}")));
        }
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return Err(Error::config(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        Ok(Self { means, noise_sigma })
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn mean(&self, class: TokenClass) -> GazeFeatures {
        self.means[&class]
    }

    pub fn means(&self) -> &BTreeMap<TokenClass, GazeFeatures> {
        &self.means
    }

    /// Parses `CLASS = ffd,gpt,trt,nfix` lines plus an optional `noise_sigma = x` line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut means = BTreeMap::new();
        let mut noise = 0.0;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_owned(),
                line: lineno + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected 'key = value'".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "noise_sigma" {
                noise = value
                    .parse()
                    .map_err(|_| err(format!("bad noise_sigma '{value}'")))?;
                continue;
            }
            let class: TokenClass = key.parse().map_err(|e: Error| err(e.to_string()))?;
            let nums = value
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| err(format!("bad feature list '{value}'")))?;
            let [ffd, gpt, trt, nfix] = nums[..] else {
                return Err(err(format!("expected 4 features, got {}", nums.len())));
            };
            let feats = GazeFeatures::new(ffd, gpt, trt, nfix).map_err(|e| err(e.to_string()))?;
            if means.insert(class, feats).is_some() {
                return Err(err(format!("duplicate entry for {class}")));
            }
        }
        Self::new(means, noise)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# class = ffd,gpt,trt,nfix\n");
        out.push_str(&format!("noise_sigma = {}\n", self.noise_sigma));
        for (c, g) in &self.means {
            out.push_str(&format!("{c} = {},{},{},{}\n", g.ffd, g.gpt, g.trt, g.nfix));
        }
        out
    }
}

/// One feature vector per token. Deterministic when `rng` is `None` or the table is noise-free.
pub fn predict_gaze(
    table: &GazeTable,
    classes: &TokenClassMap,
    tokens: &[usize],
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<GazeFeatures>> {
    if tokens.is_empty() {
        return Err(Error::usage("predict_gaze on an empty token sequence"));
    }
    let mut out = tokens
        .iter()
        .map(|&t| classes.class_of(t).map(|c| table.mean(c)))
        .collect::<Result<Vec<_>>>()?;
    if let (Some(rng), true) = (rng, table.noise_sigma > 0.0) {
        let normal = Normal::new(0.0, table.noise_sigma).expect("validated sigma");
        for g in &mut out {
            g.ffd = (g.ffd + normal.sample(rng)).max(0.0);
            g.gpt = (g.gpt + normal.sample(rng)).max(0.0);
            g.trt = (g.trt + normal.sample(rng)).max(0.0);
            g.nfix = (g.nfix + normal.sample(rng)).max(0.0);
        }
    }
    Ok(out)
}

/// Sums subtoken scores into word scores. `words` must partition `0..scores.len()` in order.
pub fn aggregate_subtokens(scores: &[f64], words: &[Range<usize>]) -> Result<Vec<f64>> {
    let mut expected = 0;
    for w in words {
        if w.start != expected || w.end <= w.start {
            return Err(Error::usage(format!(
                "word range {w:?} does not continue the partition at {expected}"
            )));
        }
        expected = w.end;
    }
    if expected != scores.len() {
        return Err(Error::usage(format!(
            "word ranges cover {expected} of {} subtokens",
            scores.len()
        )));
    }
    Ok(words.iter().map(|w| scores[w.clone()].iter().sum()).collect())
}

/// Mean word-level TRT per class over a corpus; a word takes the class of its first subtoken.
pub fn pos_gaze_report(
    corpus: &[Vec<usize>],
    classes: &TokenClassMap,
    table: &GazeTable,
) -> Result<BTreeMap<TokenClass, f64>> {
    if corpus.iter().all(Vec::is_empty) {
        return Err(Error::usage("gaze report needs a nonempty corpus"));
    }
    let mut acc: BTreeMap<TokenClass, (f64, usize)> = BTreeMap::new();
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let gaze = predict_gaze(table, classes, seq, None)?;
        let trt: Vec<f64> = gaze.iter().map(|g| g.trt).collect();
        let words = classes.word_ranges(seq)?;
        let scores = aggregate_subtokens(&trt, &words)?;
        for (w, score) in words.iter().zip(scores) {
            // running mean: exact when every word of a class scores the same
            let e = acc.entry(classes.class_of(seq[w.start])?).or_insert((0.0, 0));
            e.1 += 1;
            e.0 += (score - e.0) / e.1 as f64;
        }
    }
    Ok(acc.into_iter().map(|(c, (m, _))| (c, m)).collect())
}

/// Two-column CSV `class,mean_attention`, rows sorted by descending attention.
pub fn report_csv(report: &BTreeMap<TokenClass, f64>) -> String {
    let mut rows: Vec<_> = report.iter().collect();
    rows.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    let mut out = String::from("class,mean_attention\n");
    for (c, v) in rows {
        out.push_str(&format!("{c},{v}\n"));
    }
    out
}
