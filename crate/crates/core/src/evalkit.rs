//! Hold-out evaluation, convergence measurement and multi-seed reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::{ModelIdentity, RewardModel};
use crate::rltrain::{Algorithm, Scheme};

/// A per-step scalar series of one run.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingCurve {
    pub metric: String,
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub seed: u64,
    points: Vec<(usize, f64)>,
}

impl TrainingCurve {
    pub fn new(metric: impl Into<String>, scheme: Scheme, algorithm: Algorithm, seed: u64) -> Self {
        Self {
            metric: metric.into(),
            scheme,
            algorithm,
            seed,
            points: Vec::new(),
        }
    }

    pub fn with_points(mut self, points: Vec<(usize, f64)>) -> Result<Self> {
        for (step, v) in points {
            self.push(step, v)?;
        }
        Ok(self)
    }

    /// Appends a point; steps must strictly increase.
    pub fn push(&mut self, step: usize, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::usage(format!("curve step {step} does not follow {last}")));
            }
        }
        self.points.push((step, value));
        Ok(())
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn steps(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fails unless `holdout` was trained on a seed and split used by none of `training`.
pub fn check_holdout_isolation<'a>(holdout: &ModelIdentity, training: impl IntoIterator<Item = &'a ModelIdentity>) -> Result<()> {
    for t in training {
        if holdout.overlaps(t) {
            return Err(Error::config(format!(
                "hold-out model {holdout} shares a seed or split with training reward model {t}"
            )));
        }
    }
    Ok(())
}

/// Evaluator reward model tied to the training models it must stay disjoint from.
#[derive(Clone, Debug)]
pub struct HoldoutEvaluator {
    model: RewardModel,
}

impl HoldoutEvaluator {
    pub fn new<'a>(model: RewardModel, training: impl IntoIterator<Item = &'a ModelIdentity>) -> Result<Self> {
        if model.gaze_mode().is_some() {
            return Err(Error::config("the hold-out reward model must be gaze-free"));
        }
        check_holdout_isolation(&model.identity, training)?;
        Ok(Self { model })
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn identity(&self) -> &ModelIdentity {
        &self.model.identity
    }

    pub fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64> {
        self.model.score(&[prompt, response].concat(), None)
    }

    /// Mean score over `(prompt, response)` pairs, tagged with the prompt set.
    pub fn mean_score(&self, prompts: &[Vec<usize>], responses: &[Vec<usize>]) -> Result<HoldoutMean> {
        if prompts.is_empty() || prompts.len() != responses.len() {
            return Err(Error::usage(format!(
                "{} prompts and {} responses",
                prompts.len(),
                responses.len()
            )));
        }
        let mut sum = 0.0;
        for (p, r) in prompts.iter().zip(responses) {
            sum += self.score(p, r)?;
        }
        Ok(HoldoutMean {
            mean: sum / prompts.len() as f64,
            prompt_set: prompt_set_digest(prompts),
        })
    }
}

/// Mean hold-out score over a prompt set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoldoutMean {
    pub mean: f64,
    /// Digest of the prompts the mean was taken over.
    pub prompt_set: u64,
}

/// FNV-1a over the token ids, with sequence separators.
pub fn prompt_set_digest(prompts: &[Vec<usize>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in prompts {
        feed(p.len() as u64);
        for &t in p {
            feed(t as u64);
        }
    }
    h
}

/// Policy hold-out mean minus SFT hold-out mean.
pub fn validation_score(policy: HoldoutMean, sft: HoldoutMean) -> Result<f64> {
    if policy.prompt_set != sft.prompt_set {
        return Err(Error::usage("validation score compares means over different prompt sets"));
    }
    Ok(policy.mean - sft.mean)
}

/// Trailing moving average; the first `window - 1` entries average what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let w = &values[(i + 1).saturating_sub(window)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// First index of `smoothed` reaching `fraction * plateau`, or `None` when the plateau is not positive.
pub fn first_reaching(smoothed: &[f64], fraction: f64, plateau: f64) -> Option<usize> {
    if !(plateau > 0.0) {
        return None;
    }
    smoothed.iter().position(|v| *v >= fraction * plateau)
}

/// Mean of the last `window` values.
pub fn plateau(values: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, values.len().max(1));
    values[values.len() - w..].iter().sum::<f64>() / w as f64
}

/// Step at which the smoothed curve first reaches `fraction` of its plateau.
pub fn steps_to_convergence(curve: &TrainingCurve, fraction: f64, window: usize) -> Result<Option<usize>> {
    if curve.len() <= window {
        return Err(Error::usage(format!(
            "curve of {} points is too short for smoothing window {window}",
            curve.len()
        )));
    }
    let values = curve.values();
    let smoothed = moving_average(&values, window);
    let level = plateau(&values, window);
    Ok(first_reaching(&smoothed, fraction, level).map(|i| curve.points[i].0))
}

/// Maps values affinely onto `[0, 1]`.
pub fn minmax_normalize(curve: &TrainingCurve) -> Result<TrainingCurve> {
    let values = curve.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::usage(format!(
            "cannot min-max normalise a constant curve ({} seed {})",
            curve.scheme, curve.seed
        )));
    }
    let mut out = curve.clone();
    for p in &mut out.points {
        p.1 = if p.1 == hi { 1.0 } else { (p.1 - lo) / (hi - lo) };
    }
    Ok(out)
}

/// Sample mean and sample standard deviation (`n - 1`; zero for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if let Some(&first) = xs.first() {
        if xs.iter().all(|x| *x == first) {
            return (first, 0.0);
        }
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Per-step mean and sample std of aligned curves.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedAggregate {
    pub steps: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn aggregate_curves(curves: &[TrainingCurve]) -> Result<SeedAggregate> {
    let first = curves.first().ok_or_else(|| Error::usage("no curves to aggregate"))?;
    let steps = first.steps();
    for c in curves {
        if c.metric != first.metric || c.scheme != first.scheme || c.algorithm != first.algorithm {
            return Err(Error::usage(format!(
                "cannot aggregate {}/{}/{} with {}/{}/{}",
                first.metric, first.scheme, first.algorithm, c.metric, c.scheme, c.algorithm
            )));
        }
        if c.steps() != steps {
            return Err(Error::usage(format!("curve for seed {} has a different step grid", c.seed)));
        }
    }
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for i in 0..steps.len() {
        let col: Vec<f64> = curves.iter().map(|c| c.points[i].1).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(s);
    }
    Ok(SeedAggregate { steps, mean, std })
}

/// One (scheme, algorithm) line of a convergence report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub final_mean: f64,
    pub final_std: f64,
    /// Mean over seeds whose curve converged; `None` if none did.
    pub steps_mean: Option<f64>,
    pub steps_std: Option<f64>,
    /// Baseline steps over this row's steps.
    pub speedup: Option<f64>,
    pub seeds: usize,
    pub converged: usize,
    /// Per-seed steps to convergence, in seed order.
    pub steps_per_seed: Vec<Option<usize>>,
    pub final_per_seed: Vec<f64>,
}

impl ReportRow {
    pub fn median_steps(&self) -> Option<f64> {
        let xs: Vec<f64> = self.steps_per_seed.iter().flatten().map(|s| *s as f64).collect();
        median(&xs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSettings {
    pub fraction: f64,
    pub window: usize,
}

impl Default for ConvergenceSettings {
    fn default() -> Self {
        Self {
            fraction: 0.95,
            window: 5,
        }
    }
}

/// Table of final validation scores and convergence speed per (scheme, algorithm).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub rows: Vec<ReportRow>,
}

/// Aggregates validation curves (one per seed and arm). Needs at least two seeds per arm.
/// Speedups are filled in when a sparse arm is present.
pub fn aggregate_seeds(curves: &[TrainingCurve], settings: ConvergenceSettings) -> Result<ConvergenceReport> {
    let mut groups: BTreeMap<(Algorithm, Scheme), Vec<&TrainingCurve>> = BTreeMap::new();
    for c in curves {
        groups.entry((c.algorithm, c.scheme)).or_default().push(c);
    }
    if groups.is_empty() {
        return Err(Error::usage("no curves to report"));
    }
    let mut rows = Vec::new();
    for ((algorithm, scheme), mut group) in groups {
        if group.len() < 2 {
            return Err(Error::usage(format!(
                "{scheme}/{algorithm} has {} seed(s); aggregation needs at least 2",
                group.len()
            )));
        }
        group.sort_by_key(|c| c.seed);
        let owned: Vec<TrainingCurve> = group.iter().map(|c| (*c).clone()).collect();
        aggregate_curves(&owned)?;
        let final_per_seed: Vec<f64> = group.iter().map(|c| plateau(&c.values(), settings.window)).collect();
        let steps_per_seed = group
            .iter()
            .map(|c| steps_to_convergence(c, settings.fraction, settings.window))
            .collect::<Result<Vec<_>>>()?;
        let conv: Vec<f64> = steps_per_seed.iter().flatten().map(|s| *s as f64).collect();
        let (final_mean, final_std) = mean_std(&final_per_seed);
        let (steps_mean, steps_std) = if conv.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&conv);
            (Some(m), Some(s))
        };
        rows.push(ReportRow {
            scheme,
            algorithm,
            final_mean,
            final_std,
            steps_mean,
            steps_std,
            speedup: None,
            seeds: group.len(),
            converged: conv.len(),
            steps_per_seed,
            final_per_seed,
        });
    }
    let mut report = ConvergenceReport { rows };
    if report.rows.iter().any(|r| r.scheme == Scheme::Sparse) {
        report.fill_speedups(Scheme::Sparse)?;
    }
    Ok(report)
}

impl ConvergenceReport {
    /// Sets each row's speedup against the `baseline` row of the same algorithm.
    /// Fails when no row uses the baseline scheme.
    pub fn fill_speedups(&mut self, baseline: Scheme) -> Result<()> {
        if !self.rows.iter().any(|r| r.scheme == baseline) {
            return Err(Error::usage(format!("no {baseline} (baseline) run in the report")));
        }
        let base: BTreeMap<Algorithm, Option<f64>> = self
            .rows
            .iter()
            .filter(|r| r.scheme == baseline)
            .map(|r| (r.algorithm, r.steps_mean))
            .collect();
        for row in &mut self.rows {
            row.speedup = match (base.get(&row.algorithm).copied().flatten(), row.steps_mean) {
                (Some(b), Some(s)) if s > 0.0 => Some(b / s),
                (Some(b), Some(_)) if b == 0.0 => Some(1.0),
                _ => None,
            };
        }
        Ok(())
    }

    pub fn row(&self, scheme: Scheme, algorithm: Algorithm) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scheme == scheme && r.algorithm == algorithm)
    }

    pub const CSV_HEADER: &'static str = "scheme,algorithm,final_mean,final_std,steps_mean,steps_std,speedup";

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v}"));
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scheme,
                r.algorithm,
                r.final_mean,
                r.final_std,
                opt(r.steps_mean),
                opt(r.steps_std),
                opt(r.speedup)
            );
        }
        out
    }

    /// Reads a report written by [`ConvergenceReport::to_csv`]. Per-seed detail is not stored there.
    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == Self::CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    path: origin.into(),
                    line: 1,
                    message: format!("expected header '{}'", Self::CSV_HEADER),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fail = |m: String| Error::Parse {
                path: origin.into(),
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(fail(format!("expected 7 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| fail(format!("bad number '{s}'")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(ReportRow {
                scheme: f[0].parse().map_err(|e: Error| fail(e.to_string()))?,
                algorithm: f[1].parse().map_err(|e: Error| fail(e.to_string()))?,
                final_mean: num(f[2])?,
                final_std: num(f[3])?,
                steps_mean: opt(f[4])?,
                steps_std: opt(f[5])?,
                speedup: opt(f[6])?,
                seeds: 0,
                converged: 0,
                steps_per_seed: Vec::new(),
                final_per_seed: Vec::new(),
            });
        }
        Ok(Self { rows })
    }

    /// Fixed-width table with `mean ± std` cells.
    pub fn to_table(&self) -> String {
        let pm = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.2} ± {s:.2}"),
            _ => "n/a".to_string(),
        };
        let mut out = format!(
            "{:<14} {:<6} {:>18} {:>18} {:>8}\n",
            "Method", "Algo", "Val. Score", "Steps to Conv.", "Speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:<6} {:>18} {:>18} {:>8}",
                r.scheme.to_string(),
                r.algorithm.to_string(),
                pm(Some(r.final_mean), Some(r.final_std)),
                pm(r.steps_mean, r.steps_std),
                r.speedup.map_or("n/a".into(), |s| format!("{s:.2}x"))
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(scheme: Scheme, seed: u64, values: &[f64]) -> TrainingCurve {
        TrainingCurve::new("val", scheme, Algorithm::Ppo, seed)
            .with_points(values.iter().copied().enumerate().collect())
            .unwrap()
    }

    #[test]
    fn steps_must_increase() {
        let mut c = TrainingCurve::new("val", Scheme::Sparse, Algorithm::Ppo, 0);
        c.push(0, 1.0).unwrap();
        assert!(c.push(0, 2.0).is_err());
        c.push(3, 2.0).unwrap();
    }

    #[test]
    fn validation_score_examples() {
        let set = prompt_set_digest(&[vec![1, 2, 3]]);
        let m = |mean| HoldoutMean { mean, prompt_set: set };
        assert_eq!(validation_score(m(2.0), m(0.5)).unwrap(), 1.5);
        assert_eq!(validation_score(m(0.37), m(0.37)).unwrap(), 0.0);
        let other = HoldoutMean {
            mean: 0.0,
            prompt_set: prompt_set_digest(&[vec![1, 2], vec![3]]),
        };
        assert!(matches!(validation_score(m(1.0), other), Err(Error::Usage(_))));
    }

    #[test]
    fn convergence_on_presmoothed_curve() {
        let s = [0.0, 0.5, 0.9, 0.95, 1.0, 1.0];
        assert_eq!(first_reaching(&s, 0.95, plateau(&s, 1)), Some(3));
        assert_eq!(moving_average(&s, 1), s.to_vec());
        assert_eq!(first_reaching(&s, 0.95, 0.0), None);
    }

    #[test]
    fn convergence_examples() {
        let c = curve(Scheme::Sparse, 0, &[2.0; 8]);
        assert_eq!(steps_to_convergence(&c, 0.95, 5).unwrap(), Some(0));
        let neg = curve(Scheme::Sparse, 0, &[-1.0; 8]);
        assert_eq!(steps_to_convergence(&neg, 0.95, 5).unwrap(), None);
        assert!(steps_to_convergence(&curve(Scheme::Sparse, 0, &[1.0; 5]), 0.95, 5).is_err());

        // trailing window 2 of [0, 0, 1, 1, 1, 1]: [0, 0, .5, 1, 1, 1]
        let c = curve(Scheme::Sparse, 0, &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(steps_to_convergence(&c, 0.95, 2).unwrap(), Some(3));
        assert_eq!(steps_to_convergence(&c, 0.5, 2).unwrap(), Some(2));
    }

    #[test]
    fn moving_average_values() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(moving_average(&[3.0, 6.0, 9.0], 5), vec![3.0, 4.5, 6.0]);
    }

    #[test]
    fn minmax_examples() {
        let n = minmax_normalize(&curve(Scheme::Sparse, 0, &[2.0, 4.0, 6.0])).unwrap();
        assert_eq!(n.values(), vec![0.0, 0.5, 1.0]);
        let unit = curve(Scheme::Sparse, 0, &[0.0, 0.3, 1.0, 0.6]);
        assert_eq!(minmax_normalize(&unit).unwrap(), unit);
        assert!(matches!(minmax_normalize(&curve(Scheme::Sparse, 0, &[1.0; 3])), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn minmax_properties(vs in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            prop_assume!(vs.iter().any(|v| *v != vs[0]));
            let c = curve(Scheme::Sparse, 0, &vs);
            let n = minmax_normalize(&c).unwrap();
            prop_assert_eq!(minmax_normalize(&n).unwrap(), n.clone());
            let nv = n.values();
            prop_assert!(nv.iter().all(|v| (0.0..=1.0).contains(v)));
            let arg = |xs: &[f64], max: bool| {
                let mut best = 0;
                for i in 1..xs.len() {
                    if (max && xs[i] > xs[best]) || (!max && xs[i] < xs[best]) { best = i; }
                }
                best
            };
            prop_assert_eq!(arg(&vs, true), arg(&nv, true));
            prop_assert_eq!(arg(&vs, false), arg(&nv, false));
        }

        #[test]
        fn convergence_monotone_in_fraction(
            vs in prop::collection::vec(-1.0f64..3.0, 7..40),
            f1 in 0.1f64..1.0,
            f2 in 0.1f64..1.0,
        ) {
            let c = curve(Scheme::Sparse, 0, &vs);
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = steps_to_convergence(&c, lo, 5).unwrap();
            let b = steps_to_convergence(&c, hi, 5).unwrap();
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!(a <= b);
            }
            prop_assert_eq!(a.is_some(), b.is_some());
        }
    }

    #[test]
    fn aggregation_examples() {
        let a = aggregate_curves(&[curve(Scheme::Sparse, 0, &[1.0]), curve(Scheme::Sparse, 1, &[3.0])]).unwrap();
        assert_eq!(a.mean, vec![2.0]);
        assert!((a.std[0] - 2f64.sqrt()).abs() < 1e-15);

        let same: Vec<_> = (0..3).map(|s| curve(Scheme::Sparse, s, &[0.1, 0.5, 0.2])).collect();
        assert!(aggregate_curves(&same).unwrap().std.iter().all(|s| *s == 0.0));

        let short = curve(Scheme::Sparse, 2, &[0.1, 0.5]);
        assert!(matches!(aggregate_curves(&[same[0].clone(), short]), Err(Error::Usage(_))));
    }

    #[test]
    fn report_speedups_and_csv() {
        let rise = |k: usize| -> Vec<f64> { (0..20).map(|i| ((i + 1) as f64 / k as f64).min(1.0)).collect() };
        let mut curves = Vec::new();
        for seed in 0..3 {
            curves.push(curve(Scheme::Sparse, seed, &rise(12)));
            curves.push(curve(Scheme::GazeDistrib, seed, &rise(6)));
        }
        let rep = aggregate_seeds(&curves, ConvergenceSettings::default()).unwrap();
        assert_eq!(rep.rows.len(), 2);
        let base = rep.row(Scheme::Sparse, Algorithm::Ppo).unwrap();
        assert_eq!(base.speedup, Some(1.0));
        let fast = rep.row(Scheme::GazeDistrib, Algorithm::Ppo).unwrap();
        assert!(fast.speedup.unwrap() > 1.5);
        assert_eq!(fast.steps_std, Some(0.0));

        let parsed = ConvergenceReport::parse_csv(&rep.to_csv(), "mem").unwrap();
        assert_eq!(parsed.rows.len(), 2);
        assert_eq!(parsed.rows[1].speedup, fast.speedup);
        assert!(rep.to_table().contains("gaze_distrib"));

        let only_gaze: Vec<_> = curves.iter().filter(|c| c.scheme != Scheme::Sparse).cloned().collect();
        let mut alone = aggregate_seeds(&only_gaze, ConvergenceSettings::default()).unwrap();
        assert_eq!(alone.rows[0].speedup, None);
        assert!(matches!(alone.fill_speedups(Scheme::Sparse), Err(Error::Usage(_))));
        assert!(aggregate_seeds(&curves[..2], ConvergenceSettings::default()).is_err());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn holdout_isolation() {
        let train = [ModelIdentity::new("train", 1, "train"), ModelIdentity::new("train", 2, "train")];
        assert!(check_holdout_isolation(&ModelIdentity::new("holdout", 99, "holdout"), &train).is_ok());
        assert!(matches!(
            check_holdout_isolation(&ModelIdentity::new("holdout", 2, "holdout"), &train),
            Err(Error::Config(_))
        ));
        assert!(check_holdout_isolation(&ModelIdentity::new("holdout", 98, "train"), &train).is_err());
    }
}
