//! Fitting the logit window that defended predictions are steered into.

use serde::{Deserialize, Serialize};

use super::{Fallback, Scenario, SelectionInterval};
use crate::diffusion::ReconstructionBatch;
use crate::metrics::{histogram_weighted, js_divergence, value_range};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Uniformly spaced candidate endpoints over the search region.
    pub num_endpoints: usize,
    /// Shared histogram bins for the JS objective.
    pub num_bins: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { num_endpoints: 20, num_bins: 30 }
    }
}

/// What the defender knows about one calibration sample after
/// reconstructing and scoring it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// Logit score of every reconstruction.
    pub logits: Vec<f64>,
    /// Whether each reconstruction keeps the original predicted label.
    pub candidate: Vec<bool>,
    /// Logit score of the prediction on the unmodified input.
    pub original_logit: f64,
}

impl CalibrationSample {
    pub fn from_batch(batch: &ReconstructionBatch, original_label: usize, original_logit: f64) -> Result<Self> {
        if !batch.is_scored() {
            return Err(Error::arg("reconstruction batch has not been scored"));
        }
        Ok(Self {
            logits: batch.logits.clone(),
            candidate: batch.predictions.iter().map(|p| p.predicted_label() == original_label).collect(),
            original_logit,
        })
    }

    fn candidate_logits(&self) -> impl Iterator<Item = f64> + '_ {
        self.logits.iter().zip(&self.candidate).filter(|(_, &c)| c).map(|(&l, _)| l)
    }

    /// Expected outcome of the selection rule as (logit, probability) pairs:
    /// uniform over in-interval candidates, else the closest candidates
    /// (ties share the mass), else the fallback.
    pub fn selection_distribution(&self, interval: &SelectionInterval, fallback: Fallback) -> Vec<(f64, f64)> {
        let cands: Vec<f64> = self.candidate_logits().collect();
        if cands.is_empty() {
            return match fallback {
                Fallback::Original => vec![(self.original_logit, 1.0)],
                Fallback::Closest => closest_mass(&self.logits, interval),
            };
        }
        let inside: Vec<f64> = cands.iter().copied().filter(|&l| interval.contains(l)).collect();
        if inside.is_empty() {
            closest_mass(&cands, interval)
        } else {
            let w = 1.0 / inside.len() as f64;
            inside.into_iter().map(|l| (l, w)).collect()
        }
    }
}

fn closest_mass(logits: &[f64], interval: &SelectionInterval) -> Vec<(f64, f64)> {
    let best = logits.iter().map(|&l| interval.distance(l)).fold(f64::INFINITY, f64::min);
    let ties: Vec<f64> = logits.iter().copied().filter(|&l| interval.distance(l) == best).collect();
    let w = 1.0 / ties.len() as f64;
    ties.into_iter().map(|l| (l, w)).collect()
}

/// Result of an interval fit, persisted as JSON next to the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedInterval {
    pub scenario: Scenario,
    pub lo: f64,
    pub hi: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub k: usize,
    pub grid: GridConfig,
    /// JS divergence of the simulated member/non-member selections; `None`
    /// for Scenario 2, which has no non-member pool.
    pub js_value: Option<f64>,
    pub calibration_hash: String,
}

impl FittedInterval {
    pub fn interval(&self) -> Result<SelectionInterval> {
        SelectionInterval::new(self.lo, self.hi)
    }
}

/// Outcome of the Scenario 1 grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalFit {
    pub interval: SelectionInterval,
    pub js: f64,
    /// Every evaluated `(interval, js)` pair in enumeration order.
    pub evaluated: Vec<(SelectionInterval, f64)>,
}

/// Shared binning for the JS objective: the pooled range of every logit the
/// defender observed, fixed across candidate intervals.
fn pooled_range(members: &[CalibrationSample], nonmembers: &[CalibrationSample]) -> (f64, f64) {
    let all: Vec<f64> = members
        .iter()
        .chain(nonmembers)
        .flat_map(|s| s.logits.iter().copied().chain(std::iter::once(s.original_logit)))
        .collect();
    value_range(&all)
}

/// JS divergence between the expected member and non-member selections
/// under `interval`.
pub fn simulated_js(
    members: &[CalibrationSample],
    nonmembers: &[CalibrationSample],
    interval: &SelectionInterval,
    fallback: Fallback,
    num_bins: usize,
) -> Result<f64> {
    let range = pooled_range(members, nonmembers);
    js_for(members, nonmembers, interval, fallback, num_bins, range)
}

fn js_for(
    members: &[CalibrationSample],
    nonmembers: &[CalibrationSample],
    interval: &SelectionInterval,
    fallback: Fallback,
    num_bins: usize,
    range: (f64, f64),
) -> Result<f64> {
    let hist = |pool: &[CalibrationSample]| {
        let (values, weights): (Vec<f64>, Vec<f64>) =
            pool.iter().flat_map(|s| s.selection_distribution(interval, fallback)).unzip();
        histogram_weighted(&values, &weights, num_bins, Some(range))
    };
    js_divergence(&hist(members)?, &hist(nonmembers)?)
}

/// JS divergence between member and non-member original (undefended)
/// logits, on the same binning as [`simulated_js`].
pub fn undefended_js(members: &[CalibrationSample], nonmembers: &[CalibrationSample], num_bins: usize) -> Result<f64> {
    let range = pooled_range(members, nonmembers);
    let orig = |pool: &[CalibrationSample]| {
        let v: Vec<f64> = pool.iter().map(|s| s.original_logit).collect();
        histogram_weighted(&v, &vec![1.0; v.len()], num_bins, Some(range))
    };
    js_divergence(&orig(members)?, &orig(nonmembers)?)
}

/// Uniform grid of `n` points on `[a, b]`.
pub fn endpoint_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

const JS_TIE: f64 = 1e-12;

/// Scenario 1: exhaustive search over endpoint pairs `lo < hi` from a
/// uniform grid on `[min(member logits), max(non-member logits)]`,
/// minimizing the JS divergence of the simulated selections. Ties prefer
/// the wider interval, then the lower `lo`.
pub fn fit_interval_scenario1(
    members: &[CalibrationSample],
    nonmembers: &[CalibrationSample],
    grid: GridConfig,
    fallback: Fallback,
) -> Result<IntervalFit> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::arg("Scenario 1 needs non-empty member and non-member pools"));
    }
    if members.iter().chain(nonmembers).any(|s| s.logits.is_empty() || s.logits.len() != s.candidate.len()) {
        return Err(Error::arg("calibration samples need one candidate flag per logit"));
    }
    if grid.num_endpoints < 2 || grid.num_bins == 0 {
        return Err(Error::arg(format!("grid needs >= 2 endpoints and >= 1 bin, got {grid:?}")));
    }
    let lo_region = members.iter().flat_map(|s| s.logits.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi_region =
        nonmembers.iter().flat_map(|s| s.logits.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let range = pooled_range(members, nonmembers);
    if lo_region >= hi_region {
        let mid = 0.5 * (lo_region + hi_region);
        log::warn!(
            "member and non-member logits do not overlap (min member {lo_region:.4} >= max non-member {hi_region:.4}); using the point interval at {mid:.4}"
        );
        let interval = SelectionInterval::new(mid, mid)?;
        let js = js_for(members, nonmembers, &interval, fallback, grid.num_bins, range)?;
        return Ok(IntervalFit { interval, js, evaluated: vec![(interval, js)] });
    }
    let points = endpoint_grid(lo_region, hi_region, grid.num_endpoints);
    let mut evaluated = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    let mut best: Option<(SelectionInterval, f64)> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let interval = SelectionInterval::new(points[i], points[j])?;
            let js = js_for(members, nonmembers, &interval, fallback, grid.num_bins, range)?;
            evaluated.push((interval, js));
            let better = match &best {
                None => true,
                Some((b, bjs)) => {
                    if js < bjs - JS_TIE {
                        true
                    } else if js <= bjs + JS_TIE {
                        let (w, bw) = (interval.width(), b.width());
                        w > bw || (w == bw && interval.lo < b.lo)
                    } else {
                        false
                    }
                }
            };
            if better {
                best = Some((interval, js));
            }
        }
    }
    let (interval, js) = best.expect("grid has at least one pair");
    Ok(IntervalFit { interval, js, evaluated })
}

/// Scenario 2: `[min, mean]` of the member reconstruction logits.
pub fn fit_interval_scenario2(member_logits: &[f64]) -> Result<SelectionInterval> {
    if member_logits.is_empty() {
        return Err(Error::arg("Scenario 2 needs a non-empty member pool"));
    }
    let min = member_logits.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = member_logits.iter().sum::<f64>() / member_logits.len() as f64;
    // the mean of equal values can round below their minimum
    SelectionInterval::new(min, mean.max(min))
}

pub fn calibration_hash(members: &[CalibrationSample], nonmembers: &[CalibrationSample]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (tag, pool) in [(b'm', members), (b'n', nonmembers)] {
        for s in pool {
            h.update([tag]);
            for l in &s.logits {
                h.update(l.to_le_bytes());
            }
            for &c in &s.candidate {
                h.update([u8::from(c)]);
            }
            h.update(s.original_logit.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
