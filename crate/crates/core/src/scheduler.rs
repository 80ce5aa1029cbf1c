//! Inter-domain distance, the transitive λ schedule and competing weighting
//! strategies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TplError};
use crate::objective::Weights;

pub const LAMBDA_EPS: f64 = 1e-6;

pub fn lambda_max() -> f64 {
    -LAMBDA_EPS.ln()
}

/// Row-major features with a class and a domain key per row.
#[derive(Clone, Copy, Debug)]
pub struct LabeledFeatures<'a> {
    pub dim: usize,
    pub values: &'a [f64],
    pub classes: &'a [usize],
    pub domains: &'a [usize],
}

impl<'a> LabeledFeatures<'a> {
    pub fn new(dim: usize, values: &'a [f64], classes: &'a [usize], domains: &'a [usize]) -> Result<Self> {
        let n = classes.len();
        if dim == 0 || values.len() != n * dim || domains.len() != n {
            return Err(TplError::ShapeMismatch {
                op: "labeled_features",
                lhs: vec![values.len()],
                rhs: vec![n, dim, domains.len()],
            });
        }
        Ok(Self { dim, values, classes, domains })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn domain_set(&self) -> BTreeSet<usize> {
        self.domains.iter().copied().collect()
    }
}

/// Unit-normalized centroids keyed by `(outer, inner)`.
fn centroids(f: &LabeledFeatures, outer: &[usize], inner: &[usize]) -> BTreeMap<usize, BTreeMap<usize, Vec<f64>>> {
    let mut acc: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for i in 0..f.len() {
        let c = acc
            .entry(outer[i])
            .or_default()
            .entry(inner[i])
            .or_insert_with(|| vec![0.0; f.dim]);
        for (a, x) in c.iter_mut().zip(f.row(i)) {
            *a += x;
        }
    }
    for c in acc.values_mut().flat_map(|m| m.values_mut()) {
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A zero centroid stays zero: it sits at distance 1/2 from everything.
        if n > 0.0 {
            c.iter_mut().for_each(|x| *x /= n);
        }
    }
    acc
}

/// `(1 − cos)/2` between unit vectors, clipped to `[0, 1]`.
pub fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((1.0 - dot) / 2.0).clamp(0.0, 1.0)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// For each `outer` group with at least two `inner` groups, the mean pairwise
/// distance between the inner centroids.
pub fn grouped_centroid_distance(
    f: &LabeledFeatures,
    outer: &[usize],
    inner: &[usize],
) -> BTreeMap<usize, f64> {
    centroids(f, outer, inner)
        .into_iter()
        .filter_map(|(key, cents)| {
            let cs: Vec<&Vec<f64>> = cents.values().collect();
            let pairs = (0..cs.len()).flat_map(|a| (a + 1..cs.len()).map(move |b| (a, b)));
            mean(pairs.map(|(a, b)| pair_distance(cs[a], cs[b]))).map(|d| (key, d))
        })
        .collect()
}

/// Per-class mean distance between domain centroids.
pub fn per_class_domain_distance(f: &LabeledFeatures) -> Result<BTreeMap<usize, f64>> {
    let m = grouped_centroid_distance(f, f.classes, f.domains);
    if m.is_empty() {
        return Err(TplError::invalid("domain distance: no class spans two or more domains"));
    }
    Ok(m)
}

/// Average inter-domain distance `d ∈ [0, 1]`.
pub fn compute_domain_distance(f: &LabeledFeatures) -> Result<f64> {
    let m = per_class_domain_distance(f)?;
    Ok(mean(m.values().copied()).expect("nonempty"))
}

/// `d^m`: per class, mean distance from domain `m`'s centroid to every other
/// domain's, then averaged over classes.
pub fn per_domain_distances(f: &LabeledFeatures) -> Result<BTreeMap<usize, f64>> {
    let cents = centroids(f, f.classes, f.domains);
    let mut per: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for by_domain in cents.values() {
        if by_domain.len() < 2 {
            continue;
        }
        for (&m, cm) in by_domain {
            let d = mean(by_domain.iter().filter(|(&o, _)| o != m).map(|(_, co)| pair_distance(cm, co)));
            per.entry(m).or_default().extend(d);
        }
    }
    if per.is_empty() {
        return Err(TplError::invalid("domain distance: no class spans two or more domains"));
    }
    Ok(per.into_iter().map(|(m, ds)| (m, mean(ds).expect("nonempty"))).collect())
}

/// `λ = −ln(max(d·(T−t)/θ, ε))`, clamped to `[0, λ_max]`.
pub fn compute_lambda(d: f64, t: usize, total: usize, theta: f64) -> Result<f64> {
    if t >= total {
        return Err(TplError::invalid(format!("compute_lambda: t = {t} must be below T = {total}")));
    }
    if !(d >= 0.0) || !(theta > 0.0) || !theta.is_finite() {
        return Err(TplError::invalid(format!("compute_lambda: need d ≥ 0 and θ > 0, got d = {d}, θ = {theta}")));
    }
    let arg = (d * (total - t) as f64 / theta).max(LAMBDA_EPS);
    let l = -arg.ln();
    // also folds −0.0 into +0.0
    Ok(if l <= 0.0 { 0.0 } else { l.min(lambda_max()) })
}

/// `(w_V, w_S) = (1/(1+λ), λ/(1+λ))`; `w_S` is taken as `1 − w_V` so the
/// pair sums to one exactly.
pub fn compute_weights(lambda: f64) -> Result<Weights> {
    if !(lambda >= 0.0) {
        return Err(TplError::invalid(format!("compute_weights: λ must be ≥ 0, got {lambda}")));
    }
    if lambda.is_infinite() {
        return Ok(Weights::LANGUAGE);
    }
    let vision = 1.0 / (1.0 + lambda);
    Ok(Weights { vision, language: 1.0 - vision })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Transitive,
    Joint,
    Alternating,
    TwoStage,
    Cumulative,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Joint,
        StrategyKind::Alternating,
        StrategyKind::TwoStage,
        StrategyKind::Cumulative,
        StrategyKind::Transitive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Transitive => "transitive",
            StrategyKind::Joint => "joint",
            StrategyKind::Alternating => "alternating",
            StrategyKind::TwoStage => "two_stage",
            StrategyKind::Cumulative => "cumulative",
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = TplError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TplError::invalid(format!("unknown strategy '{s}'")))
    }
}

/// Scheduler constants that stay fixed during a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleParams {
    pub total: usize,
    pub theta: f64,
    pub checkpoint_every: usize,
}

/// Weights of `kind` at iteration `t` given the latest distance `d`.
///
/// The transitive schedule uses its `t → T` limit (λ_max) at and beyond `T`.
pub fn strategy_weights(kind: StrategyKind, t: usize, d: f64, p: &ScheduleParams) -> Weights {
    let total = p.total.max(1);
    match kind {
        StrategyKind::Transitive => {
            let lambda = compute_lambda(d.max(0.0), t, total, p.theta).unwrap_or(lambda_max());
            compute_weights(lambda).expect("clamped λ is non-negative")
        }
        StrategyKind::Joint => Weights::EVEN,
        StrategyKind::Alternating => {
            if (t / p.checkpoint_every.max(1)).is_multiple_of(2) {
                Weights::VISION
            } else {
                Weights::LANGUAGE
            }
        }
        StrategyKind::TwoStage => {
            if 2 * t < total {
                Weights::VISION
            } else {
                Weights::LANGUAGE
            }
        }
        StrategyKind::Cumulative => {
            let r = (t.min(total) as f64) / total as f64;
            let language = r * r;
            Weights { vision: 1.0 - language, language }
        }
    }
}

/// One transitive weight pair per requested domain, from `d^m`.
pub fn per_domain_weights(
    f: &LabeledFeatures,
    domains: &[usize],
    t: usize,
    p: &ScheduleParams,
) -> Result<BTreeMap<usize, Weights>> {
    let dm = per_domain_distances(f)?;
    domains
        .iter()
        .map(|m| {
            let d = dm
                .get(m)
                .ok_or_else(|| TplError::invalid(format!("per-domain weights: domain {m} absent from features")))?;
            Ok((*m, strategy_weights(StrategyKind::Transitive, t, *d, p)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub t: usize,
    pub d: f64,
    pub lambda: f64,
    pub w_v: f64,
    pub w_s: f64,
}

/// Scheduler state owned by one training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub kind: StrategyKind,
    pub t: usize,
    pub total: usize,
    pub theta: f64,
    pub d: f64,
    pub lambda: f64,
    pub weights: Weights,
    pub checkpoint_every: usize,
    /// Latest per-domain weights when that mode is on.
    pub per_domain: Option<BTreeMap<usize, Weights>>,
    pub history: Vec<ScheduleRecord>,
}

impl ScheduleState {
    pub fn new(kind: StrategyKind, total: usize, theta: f64, checkpoint_every: usize) -> Result<Self> {
        if total == 0 || checkpoint_every == 0 || !(theta > 0.0) || !theta.is_finite() {
            return Err(TplError::invalid(format!(
                "schedule: need T > 0, checkpoint_every > 0, θ > 0 (T = {total}, every = {checkpoint_every}, θ = {theta})"
            )));
        }
        let weights = strategy_weights(kind, 0, 1.0, &ScheduleParams { total, theta, checkpoint_every });
        Ok(Self {
            kind,
            t: 0,
            total,
            theta,
            d: 1.0,
            lambda: implied_lambda(weights),
            weights,
            checkpoint_every,
            per_domain: None,
            history: Vec::new(),
        })
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            total: self.total,
            theta: self.theta,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn is_checkpoint(&self, t: usize) -> bool {
        t.is_multiple_of(self.checkpoint_every) || t == self.total
    }

    /// Records a distance measurement at iteration `t` and refreshes the weights.
    pub fn refresh(&mut self, t: usize, d: f64) -> Result<Weights> {
        if !(0.0..=1.0).contains(&d) {
            return Err(TplError::Numerical(format!("inter-domain distance {d} outside [0, 1]")));
        }
        let w = strategy_weights(self.kind, t, d, &self.params());
        self.lambda = match self.kind {
            StrategyKind::Transitive => compute_lambda(d, t, self.total, self.theta).unwrap_or(lambda_max()),
            _ => implied_lambda(w),
        };
        self.t = t;
        self.d = d;
        self.weights = w;
        self.history.push(ScheduleRecord {
            t,
            d,
            lambda: self.lambda,
            w_v: w.vision,
            w_s: w.language,
        });
        Ok(w)
    }

    /// Non-checkpoint iterations keep the last distance but may still change
    /// weights (time-driven strategies).
    pub fn weights_at(&mut self, t: usize) -> Weights {
        self.t = t;
        self.weights = strategy_weights(self.kind, t, self.d, &self.params());
        self.weights
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("t,d,lambda,w_V,w_S\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", r.t, r.d, r.lambda, r.w_v, r.w_s);
        }
        s
    }
}

/// The λ that the weight map would turn into `w`.
fn implied_lambda(w: Weights) -> f64 {
    if w.vision <= 0.0 {
        lambda_max()
    } else {
        (w.language / w.vision).min(lambda_max())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_examples() {
        assert_eq!(compute_lambda(0.5, 0, 2, 1.0).unwrap(), 0.0);
        assert_eq!(compute_lambda(0.0, 0, 10, 1.0).unwrap(), lambda_max());
        let l = compute_lambda(0.2, 2500, 5000, 1250.0).unwrap();
        assert!((l - 0.916290731874155).abs() < 1e-12);
        assert!(compute_lambda(0.2, 5000, 5000, 1250.0).is_err());
        assert!(compute_lambda(0.2, 10, 5000, 0.0).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(compute_weights(0.0).unwrap(), Weights::VISION);
        assert_eq!(compute_weights(1.0).unwrap(), Weights::EVEN);
        assert_eq!(compute_weights(3.0).unwrap(), Weights { vision: 0.25, language: 0.75 });
        assert!(compute_weights(-0.1).is_err());
    }

    #[test]
    fn strategy_examples() {
        let p = ScheduleParams { total: 1000, theta: 100.0, checkpoint_every: 100 };
        assert_eq!(strategy_weights(StrategyKind::TwoStage, 0, 0.3, &p), Weights::VISION);
        assert_eq!(strategy_weights(StrategyKind::TwoStage, 500, 0.3, &p), Weights::LANGUAGE);
        assert_eq!(strategy_weights(StrategyKind::Cumulative, 1000, 0.3, &p), Weights::LANGUAGE);
        assert_eq!(
            strategy_weights(StrategyKind::Cumulative, 500, 0.3, &p),
            Weights { vision: 0.75, language: 0.25 }
        );
        assert_eq!(strategy_weights(StrategyKind::Alternating, 150, 0.3, &p), Weights::LANGUAGE);
        assert_eq!(strategy_weights(StrategyKind::Alternating, 250, 0.3, &p), Weights::VISION);
        assert_eq!(strategy_weights(StrategyKind::Joint, 7, 0.3, &p), Weights::EVEN);
        assert_eq!(strategy_weights(StrategyKind::Transitive, 1000, 0.3, &p), Weights {
            vision: 1.0 / (1.0 + lambda_max()),
            language: 1.0 - 1.0 / (1.0 + lambda_max()),
        });
    }

    #[test]
    fn strategy_names_roundtrip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("bogus".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn distance_extremes() {
        let v = [1.0, 0.0, -1.0, 0.0];
        let f = LabeledFeatures::new(2, &v, &[0, 0], &[0, 1]).unwrap();
        assert_eq!(compute_domain_distance(&f).unwrap(), 1.0);
        let v = [0.6, 0.8, 0.6, 0.8, 0.6, 0.8];
        let f = LabeledFeatures::new(2, &v, &[0, 0, 1], &[0, 1, 0]).unwrap();
        assert_eq!(compute_domain_distance(&f).unwrap(), 0.0);
        let f = LabeledFeatures::new(2, &v, &[0, 1, 2], &[0, 1, 0]).unwrap();
        assert!(compute_domain_distance(&f).is_err());
    }

    #[test]
    fn schedule_csv_and_state() {
        let mut s = ScheduleState::new(StrategyKind::Transitive, 200, 20.0, 100).unwrap();
        s.refresh(0, 0.1).unwrap();
        assert_eq!(s.weights, Weights::VISION);
        s.refresh(100, 0.1).unwrap();
        assert!(s.weights.language > 0.0);
        s.refresh(200, 0.05).unwrap();
        assert_eq!(s.lambda, lambda_max());
        let csv = s.history_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("t,d,lambda,w_V,w_S\n0,0.1,0.0,1.0,0.0\n"));
        assert!(s.refresh(300, 1.5).is_err());
    }
}
