//! Loss-landscape probes around the pretrained weights.
//!
//! All coordinates live in the quantized-weight subvector `w ∈ R^D`; every
//! other parameter stays at its pretrained value. Probe points are built on
//! copies, so the base parameters are never touched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{forward_nll, Parameters};
use crate::par;

/// Unit vector over the quantized-weight coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub seed: u64,
    v: Vec<f64>,
}

impl Direction {
    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Normalized standard-normal vector: uniform on the unit sphere.
pub fn sample_unit_direction(d: usize, seed: u64) -> Result<Direction> {
    if d == 0 {
        return Err(Error::contract("sample_unit_direction", "dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Ok(Direction {
                seed,
                v: v.into_iter().map(|x| x / norm).collect(),
            });
        }
    }
}

/// Euclidean distance between two weight vectors.
pub fn weight_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(
            "weight_distance",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Radial,
    Segment,
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProfileKind::Radial => "radial",
            ProfileKind::Segment => "segment",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    /// `λ` for radial profiles, `t` for segments.
    pub x: f64,
    pub distance: f64,
    pub train_nll: f64,
    pub val_nll: f64,
    /// The loss overflowed; recorded as `f64::MAX`.
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossProfile {
    pub kind: ProfileKind,
    pub anchor_a: String,
    pub anchor_b: String,
    pub seed: Option<u64>,
    pub samples: Vec<ProfileSample>,
}

impl LossProfile {
    pub fn train_losses(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.train_nll).collect()
    }

    pub fn abscissae(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.x).collect()
    }
}

/// Blocks used to evaluate probe points.
#[derive(Clone, Debug)]
pub struct ProbeData<'a> {
    pub train: Vec<&'a [u16]>,
    pub val: Vec<&'a [u16]>,
}

fn evaluate_point(base: &Parameters, w: &[f32], data: &ProbeData<'_>) -> Result<(f64, f64, bool)> {
    let probe = base.with_quantized(w)?;
    let nll = |blocks: &[&[u16]]| match forward_nll(&probe, None, blocks) {
        Ok(v) => Ok((v, false)),
        Err(Error::NumericFault { .. }) => Ok((f64::MAX, true)),
        Err(e) => Err(e),
    };
    let (train, s1) = nll(&data.train)?;
    let (val, s2) = nll(&data.val)?;
    Ok((train, val, s1 || s2))
}

fn check_increasing(xs: &[f64], op: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::contract(op, "no sample points"));
    }
    if xs.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::contract(op, "sample points must be strictly increasing"));
    }
    Ok(())
}

/// Loss at `w + λ·ê` for each radius; the first radius must be 0.
pub fn radial_profile(
    base: &Parameters,
    dir: &Direction,
    radii: &[f64],
    data: &ProbeData<'_>,
    anchor: &str,
) -> Result<LossProfile> {
    check_increasing(radii, "radial_profile")?;
    if radii[0] != 0.0 {
        return Err(Error::contract("radial_profile", "radii must start at 0"));
    }
    let w = base.flatten_quantized();
    if dir.dim() != w.len() {
        return Err(Error::contract(
            "radial_profile",
            format!("direction of dim {} for D = {}", dir.dim(), w.len()),
        ));
    }
    let points = par::map(radii, |&lambda| {
        let probe: Vec<f32> = w
            .iter()
            .zip(dir.as_slice())
            .map(|(&x, &e)| (x as f64 + lambda * e) as f32)
            .collect();
        evaluate_point(base, &probe, data)
    });
    let samples = radii
        .iter()
        .zip(points)
        .map(|(&lambda, r)| {
            r.map(|(train_nll, val_nll, saturated)| ProfileSample {
                x: lambda,
                distance: lambda,
                train_nll,
                val_nll,
                saturated,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LossProfile {
        kind: ProfileKind::Radial,
        anchor_a: anchor.to_string(),
        anchor_b: "direction".to_string(),
        seed: Some(dir.seed),
        samples,
    })
}

/// Loss along `(1 − t)·w_a + t·w_b`; distances are measured from the base weights.
pub fn segment_profile(
    base: &Parameters,
    (name_a, w_a): (&str, &[f32]),
    (name_b, w_b): (&str, &[f32]),
    ts: &[f64],
    data: &ProbeData<'_>,
) -> Result<LossProfile> {
    check_increasing(ts, "segment_profile")?;
    if ts[0] != 0.0 || ts[ts.len() - 1] != 1.0 {
        return Err(Error::contract("segment_profile", "t must run from 0 to 1"));
    }
    let w = base.flatten_quantized();
    if w_a.len() != w.len() || w_b.len() != w.len() {
        return Err(Error::contract(
            "segment_profile",
            "endpoint dimension differs from the base model",
        ));
    }
    let points = par::map(ts, |&t| -> Result<(f64, (f64, f64, bool))> {
        let probe: Vec<f32> = w_a
            .iter()
            .zip(w_b)
            .map(|(&a, &b)| ((1.0 - t) * a as f64 + t * b as f64) as f32)
            .collect();
        let distance = weight_distance(&probe, &w)?;
        Ok((distance, evaluate_point(base, &probe, data)?))
    });
    let samples = ts
        .iter()
        .zip(points)
        .map(|(&t, r)| {
            r.map(|(distance, (train_nll, val_nll, saturated))| ProfileSample {
                x: t,
                distance,
                train_nll,
                val_nll,
                saturated,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LossProfile {
        kind: ProfileKind::Segment,
        anchor_a: name_a.to_string(),
        anchor_b: name_b.to_string(),
        seed: None,
        samples,
    })
}

/// `0` followed by `n` log-spaced radii from `lo` to `hi`.
pub fn log_radii(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && n >= 2) {
        return Err(Error::contract(
            "log_radii",
            format!("need 0 < lo < hi and n ≥ 2, got {lo}, {hi}, {n}"),
        ));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut out = vec![0.0];
    out.extend((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()));
    Ok(out)
}

/// `n` evenly spaced points from 0 to 1 inclusive.
pub fn unit_grid(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0, 1.0];
    }
    (0..n)
        .map(|i| if i == n - 1 { 1.0 } else { i as f64 / (n - 1) as f64 })
        .collect()
}

/// Which loss column the basin estimate reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSplit {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasinRule {
    /// Fraction of the rise from `L₀` to `L∞` that defines `R`.
    pub rise_fraction: f64,
    /// Trailing fraction of radii examined for the plateau test.
    pub plateau_fraction: f64,
    /// Maximum relative loss change over the plateau region.
    pub plateau_tolerance: f64,
    pub split: LossSplit,
}

impl Default for BasinRule {
    fn default() -> Self {
        Self {
            rise_fraction: 0.5,
            plateau_fraction: 0.2,
            plateau_tolerance: 0.05,
            split: LossSplit::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinEstimate {
    pub base_loss: f64,
    pub plateau_loss: f64,
    pub radius: f64,
    pub rule: BasinRule,
    /// Profiles that passed the plateau test.
    pub plateau_profiles: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Half-rise basin radius from radial profiles that share one radius grid.
pub fn basin_radius(profiles: &[LossProfile], rule: &BasinRule) -> Result<BasinEstimate> {
    if !(rule.rise_fraction > 0.0 && rule.rise_fraction <= 1.0) {
        return Err(Error::Config("rise_fraction must lie in (0, 1]".into()));
    }
    let first = profiles
        .first()
        .ok_or_else(|| Error::BasinRefused("no radial profiles supplied".into()))?;
    let radii = first.abscissae();
    if profiles
        .iter()
        .any(|p| p.kind != ProfileKind::Radial || p.abscissae() != radii)
    {
        return Err(Error::contract(
            "basin_radius",
            "profiles must be radial and share one radius grid",
        ));
    }
    if radii.len() < 3 || radii[0] != 0.0 {
        return Err(Error::contract(
            "basin_radius",
            "need at least three radii starting at 0",
        ));
    }
    let loss = |p: &LossProfile| -> Vec<f64> {
        p.samples
            .iter()
            .map(|s| match rule.split {
                LossSplit::Train => s.train_nll,
                LossSplit::Val => s.val_nll,
            })
            .collect()
    };
    let n = radii.len();
    let tail = ((n as f64 * rule.plateau_fraction).ceil() as usize).clamp(2, n - 1);
    let finite: Vec<Vec<f64>> = profiles
        .iter()
        .filter(|p| p.samples.iter().all(|s| !s.saturated))
        .map(loss)
        .collect();
    let plateaued: Vec<&Vec<f64>> = finite
        .iter()
        .filter(|l| {
            let region = &l[n - tail..];
            let lo = region.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = region.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = region.iter().sum::<f64>() / tail as f64;
            hi - lo < rule.plateau_tolerance * mean.abs()
        })
        .collect();
    if plateaued.is_empty() {
        return Err(Error::BasinRefused(format!(
            "none of {} profiles reached a plateau over the last {tail} radii; extend radii",
            profiles.len()
        )));
    }
    let base_loss = median(plateaued.iter().map(|l| l[0]).collect());
    let plateau_loss = median(plateaued.iter().flat_map(|l| l[n - tail..].iter().copied()).collect());
    let rise = plateau_loss - base_loss;
    if !(rise > 1e-12 * base_loss.abs().max(1.0)) {
        return Err(Error::BasinRefused(format!(
            "plateau loss {plateau_loss} does not rise above base loss {base_loss}"
        )));
    }
    let threshold = base_loss + rule.rise_fraction * rise;
    let curve: Vec<f64> = (0..n)
        .map(|i| median(plateaued.iter().map(|l| l[i]).collect()))
        .collect();
    let i = curve
        .iter()
        .position(|&v| v >= threshold)
        .ok_or_else(|| Error::BasinRefused("median loss never reaches the rise threshold; extend radii".into()))?;
    let radius = if i == 0 {
        radii[0]
    } else {
        let (x0, x1, y0, y1) = (radii[i - 1], radii[i], curve[i - 1], curve[i]);
        x0 + (threshold - y0) / (y1 - y0) * (x1 - x0)
    };
    if !(radius > 0.0) {
        return Err(Error::BasinRefused(format!("degenerate radius {radius}")));
    }
    Ok(BasinEstimate {
        base_loss,
        plateau_loss,
        radius,
        rule: *rule,
        plateau_profiles: plateaued.len(),
    })
}

/// Least-squares `c` in `L(λ) − L(0) ≈ c·λ²` over the first `k` positive radii.
pub fn quadratic_curvature(profile: &LossProfile, k: usize) -> f64 {
    let s = &profile.samples;
    let l0 = s[0].train_nll;
    let (mut num, mut den) = (0.0, 0.0);
    for p in s.iter().skip(1).take(k) {
        let x2 = p.x * p.x;
        num += x2 * (p.train_nll - l0);
        den += x2 * x2;
    }
    num / den
}

/// Largest relative excess of an interior sample over the higher endpoint.
pub fn ridge_excess(profile: &LossProfile) -> f64 {
    let l = profile.train_losses();
    let n = l.len();
    if n < 3 {
        return f64::NEG_INFINITY;
    }
    let ends = l[0].max(l[n - 1]);
    l[1..n - 1]
        .iter()
        .map(|&v| v / ends - 1.0)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeConfig {
    pub n_directions: usize,
    pub n_radii: usize,
    /// Smallest radius as a multiple of `‖w_RTN − w‖` at the finest format.
    pub radius_lo_factor: f64,
    /// Largest radius as a multiple of `‖w_RTN − w‖` at the coarsest format.
    pub radius_hi_factor: f64,
    pub segment_samples: usize,
    /// Train and validation blocks per probe evaluation; `None` uses the full splits.
    pub eval_blocks: Option<usize>,
    pub rule: BasinRule,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            n_directions: 16,
            n_radii: 32,
            radius_lo_factor: 0.01,
            radius_hi_factor: 4.0,
            segment_samples: 33,
            eval_blocks: Some(16),
            rule: BasinRule::default(),
        }
    }
}
