//! Scene-level (polar, range, laser) and instance-level point cloud mixing,
//! the weighted random hybrid over all four, and the standard geometric
//! augmentations applied before the encoder.
//!
//! Every mixed point keeps a provenance record `(sample_id, index)` so that
//! its guided feature can be sampled from the camera views of the sample it
//! came from.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{rot_z, DomainSample, PointCloud, IGNORE};
use crate::projection::cloud_mask_ids;

#[derive(Debug, Error, PartialEq)]
pub enum MixError {
    #[error("NoMasksAvailable: donor sample {0} has no points inside any instance mask")]
    NoMasksAvailable(u64),
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
    #[error("RecipeMismatch: recipe names samples {expected:?}, got {got:?}")]
    RecipeMismatch {
        expected: (u64, u64),
        got: (u64, u64),
    },
    #[error("ParseError: {0}")]
    ParseError(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Polar,
    Range,
    Laser,
    Instance,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Polar,
        Strategy::Range,
        Strategy::Laser,
        Strategy::Instance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Polar => "polar",
            Strategy::Range => "range",
            Strategy::Laser => "laser",
            Strategy::Instance => "instance",
        }
    }
}

impl FromStr for Strategy {
    type Err = MixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| MixError::ParseError(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixConfig {
    /// Relative draw weights for polar, range, laser, instance.
    pub weights: [f64; 4],
    /// Inclusive range for the number of instances copied by instance mixing.
    pub instance_range: (usize, usize),
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            weights: [1.0; 4],
            instance_range: (20, 30),
            seed: 0,
        }
    }
}

impl MixConfig {
    pub fn check(&self) -> Result<(), MixError> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MixError::InvalidParameter(
                "weights must be finite and non-negative".into(),
            ));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(MixError::InvalidParameter(
                "weights must not all be zero".into(),
            ));
        }
        let (lo, hi) = self.instance_range;
        if lo < 1 || lo > hi {
            return Err(MixError::InvalidParameter(format!(
                "instance range [{lo}, {hi}] must satisfy 1 <= lower <= upper"
            )));
        }
        Ok(())
    }

    pub fn weight(&self, s: Strategy) -> f64 {
        self.weights[s as usize]
    }
}

/// Parameters that, together with the two input samples, fully determine a mix.
#[derive(Clone, Debug, PartialEq)]
pub enum MixParams {
    Polar {
        theta0: f64,
    },
    Range {
        r0: f64,
    },
    Laser {
        phi0: f64,
    },
    /// Chosen `(view, mask id)` pairs of the donor.
    Instance {
        chosen: Vec<(usize, u16)>,
    },
}

impl MixParams {
    pub fn strategy(&self) -> Strategy {
        match self {
            MixParams::Polar { .. } => Strategy::Polar,
            MixParams::Range { .. } => Strategy::Range,
            MixParams::Laser { .. } => Strategy::Laser,
            MixParams::Instance { .. } => Strategy::Instance,
        }
    }
}

/// Replayable record of one mix. For instance mixes `first` is the donor and
/// `second` the recipient; otherwise `first` supplies the selected region.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub params: MixParams,
    pub first: u64,
    pub second: u64,
    pub seed: Option<u64>,
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "strategy={} a={} b={}",
            self.params.strategy().name(),
            self.first,
            self.second
        )?;
        match &self.params {
            MixParams::Polar { theta0 } => write!(f, " theta0={theta0:?}")?,
            MixParams::Range { r0 } => write!(f, " r0={r0:?}")?,
            MixParams::Laser { phi0 } => write!(f, " phi0={phi0:?}")?,
            MixParams::Instance { chosen } => {
                let ids: Vec<String> = chosen.iter().map(|(v, id)| format!("{v}:{id}")).collect();
                write!(f, " ids={}", ids.join(","))?
            }
        }
        match self.seed {
            Some(s) => write!(f, " seed={s}"),
            None => write!(f, " seed=-"),
        }
    }
}

impl FromStr for Recipe {
    type Err = MixError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| MixError::ParseError(m);
        let mut fields = std::collections::BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {tok:?}")))?;
            if fields.insert(k, v).is_some() {
                return Err(bad(format!("duplicate key {k:?}")));
            }
        }
        let mut take = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| bad(format!("missing key {k:?}")))
        };
        let real = |k: &str, v: &str| v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
        let int = |k: &str, v: &str| v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
        let strategy: Strategy = take("strategy")?.parse()?;
        let first = int("a", take("a")?)?;
        let second = int("b", take("b")?)?;
        let params = match strategy {
            Strategy::Polar => MixParams::Polar {
                theta0: real("theta0", take("theta0")?)?,
            },
            Strategy::Range => MixParams::Range {
                r0: real("r0", take("r0")?)?,
            },
            Strategy::Laser => MixParams::Laser {
                phi0: real("phi0", take("phi0")?)?,
            },
            Strategy::Instance => {
                let raw = take("ids")?;
                let chosen = raw
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|pair| {
                        let (v, id) = pair
                            .split_once(':')
                            .ok_or_else(|| bad(format!("ids: expected view:id, got {pair:?}")))?;
                        Ok((
                            v.parse().map_err(|e| bad(format!("ids: {e}")))?,
                            id.parse().map_err(|e| bad(format!("ids: {e}")))?,
                        ))
                    })
                    .collect::<Result<Vec<_>, MixError>>()?;
                MixParams::Instance { chosen }
            }
        };
        let seed = match take("seed")? {
            "-" => None,
            s => Some(int("seed", s)?),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown key {k:?}")));
        }
        Ok(Recipe {
            params,
            first,
            second,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedCloud {
    pub cloud: PointCloud,
    /// `(sample_id, original point index)` per output point.
    pub provenance: Vec<(u64, usize)>,
    pub recipe: Recipe,
}

impl MixedCloud {
    /// A plain sample as a trivially mixed cloud (every point from itself).
    pub fn identity(sample: &DomainSample) -> Self {
        Self {
            cloud: sample.cloud.clone(),
            provenance: (0..sample.cloud.len())
                .map(|i| (sample.sample_id, i))
                .collect(),
            recipe: Recipe {
                params: MixParams::Instance { chosen: Vec::new() },
                first: sample.sample_id,
                second: sample.sample_id,
                seed: None,
            },
        }
    }
}

/// Concatenates the selected points of `a` then `b`. Missing attributes on
/// one side are filled with 0 intensity / [`IGNORE`] labels.
fn concat(
    a: &DomainSample,
    a_idx: &[usize],
    b: &DomainSample,
    b_idx: &[usize],
    recipe: Recipe,
) -> MixedCloud {
    let ca = &a.cloud;
    let cb = &b.cloud;
    let mut positions = Vec::with_capacity(a_idx.len() + b_idx.len());
    positions.extend(a_idx.iter().map(|&i| ca.positions[i]));
    positions.extend(b_idx.iter().map(|&i| cb.positions[i]));
    let intensity = (ca.intensity.is_some() || cb.intensity.is_some()).then(|| {
        a_idx
            .iter()
            .map(|&i| ca.intensity_at(i))
            .chain(b_idx.iter().map(|&i| cb.intensity_at(i)))
            .collect()
    });
    let labels = (ca.labels.is_some() || cb.labels.is_some()).then(|| {
        a_idx
            .iter()
            .map(|&i| ca.label_at(i))
            .chain(b_idx.iter().map(|&i| cb.label_at(i)))
            .collect()
    });
    let provenance = a_idx
        .iter()
        .map(|&i| (a.sample_id, i))
        .chain(b_idx.iter().map(|&i| (b.sample_id, i)))
        .collect();
    MixedCloud {
        cloud: PointCloud {
            positions,
            intensity,
            labels,
        },
        provenance,
        recipe,
    }
}

/// Splits indices of `cloud` by a predicate: (kept, rejected).
fn split_by(cloud: &PointCloud, pred: impl Fn(&[f64; 3]) -> bool) -> (Vec<usize>, Vec<usize>) {
    (0..cloud.len()).partition(|&i| pred(&cloud.positions[i]))
}

pub fn azimuth(p: &[f64; 3]) -> f64 {
    p[1].atan2(p[0])
}

pub fn planar_radius(p: &[f64; 3]) -> f64 {
    p[0].hypot(p[1])
}

pub fn pitch(p: &[f64; 3]) -> f64 {
    p[2].atan2(planar_radius(p))
}

/// True if the azimuth lies in the half-open arc `[theta0, theta0 + pi)` mod 2 pi.
pub fn in_polar_arc(p: &[f64; 3], theta0: f64) -> bool {
    (azimuth(p) - theta0).rem_euclid(TAU) < PI
}

pub fn polar_mix(a: &DomainSample, b: &DomainSample, theta0: f64) -> MixedCloud {
    let (a_idx, _) = split_by(&a.cloud, |p| in_polar_arc(p, theta0));
    let (_, b_idx) = split_by(&b.cloud, |p| in_polar_arc(p, theta0));
    let recipe = Recipe {
        params: MixParams::Polar { theta0 },
        first: a.sample_id,
        second: b.sample_id,
        seed: None,
    };
    concat(a, &a_idx, b, &b_idx, recipe)
}

/// Inner disc (`radius < r0`) from `a`, outer ring from `b`.
pub fn range_mix(a: &DomainSample, b: &DomainSample, r0: f64) -> Result<MixedCloud, MixError> {
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(MixError::InvalidParameter(format!(
            "range split r0 = {r0} must be positive"
        )));
    }
    let (a_idx, _) = split_by(&a.cloud, |p| planar_radius(p) < r0);
    let (_, b_idx) = split_by(&b.cloud, |p| planar_radius(p) < r0);
    let recipe = Recipe {
        params: MixParams::Range { r0 },
        first: a.sample_id,
        second: b.sample_id,
        seed: None,
    };
    Ok(concat(a, &a_idx, b, &b_idx, recipe))
}

/// Points of `a` with pitch >= `phi0` plus points of `b` below it.
pub fn laser_mix(a: &DomainSample, b: &DomainSample, phi0: f64) -> MixedCloud {
    let (a_idx, _) = split_by(&a.cloud, |p| pitch(p) >= phi0);
    let (_, b_idx) = split_by(&b.cloud, |p| pitch(p) >= phi0);
    let recipe = Recipe {
        params: MixParams::Laser { phi0 },
        first: a.sample_id,
        second: b.sample_id,
        seed: None,
    };
    concat(a, &a_idx, b, &b_idx, recipe)
}

/// Instance membership of a donor's points, reusable across mixes.
#[derive(Clone, Debug, PartialEq)]
pub struct DonorIndex {
    /// Distinct `(view, mask id)` pairs hit by at least one point, sorted.
    pub available: Vec<(usize, u16)>,
    pub per_point: Vec<Option<(usize, u16)>>,
}

impl DonorIndex {
    pub fn new(donor: &DomainSample) -> Self {
        let per_point = cloud_mask_ids(&donor.cloud, &donor.views);
        let available: BTreeSet<(usize, u16)> = per_point.iter().flatten().copied().collect();
        Self {
            available: available.into_iter().collect(),
            per_point,
        }
    }
}

fn instance_concat(
    donor: &DomainSample,
    recipient: &DomainSample,
    per_point: &[Option<(usize, u16)>],
    chosen: Vec<(usize, u16)>,
    seed: Option<u64>,
) -> MixedCloud {
    let set: BTreeSet<(usize, u16)> = chosen.iter().copied().collect();
    let donor_idx: Vec<usize> = per_point
        .iter()
        .enumerate()
        .filter(|(_, id)| id.is_some_and(|id| set.contains(&id)))
        .map(|(i, _)| i)
        .collect();
    let recipient_idx: Vec<usize> = (0..recipient.cloud.len()).collect();
    let recipe = Recipe {
        params: MixParams::Instance { chosen },
        first: donor.sample_id,
        second: recipient.sample_id,
        seed,
    };
    // recipient first so its points keep their indices
    concat(recipient, &recipient_idx, donor, &donor_idx, recipe)
}

/// Appends the points of `k` randomly chosen donor instances to the full recipient cloud.
pub fn instance_mix(
    donor: &DomainSample,
    recipient: &DomainSample,
    cfg: &MixConfig,
    seed: u64,
) -> Result<MixedCloud, MixError> {
    instance_mix_indexed(donor, &DonorIndex::new(donor), recipient, cfg, seed)
}

/// [`instance_mix`] with a precomputed donor index.
pub fn instance_mix_indexed(
    donor: &DomainSample,
    index: &DonorIndex,
    recipient: &DomainSample,
    cfg: &MixConfig,
    seed: u64,
) -> Result<MixedCloud, MixError> {
    cfg.check()?;
    let DonorIndex {
        available,
        per_point,
    } = index;
    if available.is_empty() {
        return Err(MixError::NoMasksAvailable(donor.sample_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.instance_range;
    let k = rng.gen_range(lo..=hi).min(available.len());
    let mut picks = index::sample(&mut rng, available.len(), k).into_vec();
    picks.sort_unstable();
    let chosen = picks.into_iter().map(|i| available[i]).collect();
    Ok(instance_concat(
        donor,
        recipient,
        per_point,
        chosen,
        Some(seed),
    ))
}

/// Linear-interpolated percentile of sorted values, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Interquartile bounds of the planar radii of both clouds.
pub fn radius_quartiles(a: &PointCloud, b: &PointCloud) -> (f64, f64) {
    let mut radii: Vec<f64> = a
        .positions
        .iter()
        .chain(&b.positions)
        .map(planar_radius)
        .collect();
    radii.sort_by(f64::total_cmp);
    (percentile(&radii, 0.25), percentile(&radii, 0.75))
}

const MIN_RANGE_SPLIT: f64 = 1e-6;

fn draw_strategy(rng: &mut ChaCha8Rng, weights: &[f64; 4]) -> Strategy {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for s in Strategy::ALL {
        let w = weights[s as usize];
        if x < w {
            return s;
        }
        x -= w;
    }
    // rounding at the upper end: last strategy with positive weight
    *Strategy::ALL
        .iter()
        .rev()
        .find(|s| weights[**s as usize] > 0.0)
        .expect("weights sum is positive")
}

/// Draws a strategy in proportion to `cfg.weights` and applies it with
/// randomly drawn parameters. `a` is the instance donor. If instance mixing
/// is drawn but `a` has no usable masks, the draw is repeated among the
/// scene-level strategies (uniformly if they all have weight zero).
pub fn hybrid_mix(
    a: &DomainSample,
    b: &DomainSample,
    cfg: &MixConfig,
    seed: u64,
) -> Result<MixedCloud, MixError> {
    hybrid_mix_indexed(a, None, b, cfg, seed)
}

/// [`hybrid_mix`] with an optional precomputed index of `a`'s instances.
pub fn hybrid_mix_indexed(
    a: &DomainSample,
    a_index: Option<&DonorIndex>,
    b: &DomainSample,
    cfg: &MixConfig,
    seed: u64,
) -> Result<MixedCloud, MixError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strategy = draw_strategy(&mut rng, &cfg.weights);
    let instance_seed: u64 = rng.gen();
    if strategy == Strategy::Instance {
        let mixed = match a_index {
            Some(index) => instance_mix_indexed(a, index, b, cfg, instance_seed),
            None => instance_mix(a, b, cfg, instance_seed),
        };
        match mixed {
            Ok(mut mixed) => {
                mixed.recipe.seed = Some(seed);
                return Ok(mixed);
            }
            Err(MixError::NoMasksAvailable(_)) => {
                let mut scene = cfg.weights;
                scene[Strategy::Instance as usize] = 0.0;
                if scene.iter().sum::<f64>() <= 0.0 {
                    scene = [1.0, 1.0, 1.0, 0.0];
                }
                strategy = draw_strategy(&mut rng, &scene);
            }
            Err(e) => return Err(e),
        }
    }
    let params = match strategy {
        Strategy::Polar => MixParams::Polar {
            theta0: rng.gen_range(0.0..TAU),
        },
        Strategy::Range => {
            let (q1, q3) = radius_quartiles(&a.cloud, &b.cloud);
            let r0 = if q3 > q1 { rng.gen_range(q1..q3) } else { q1 };
            MixParams::Range {
                r0: r0.max(MIN_RANGE_SPLIT),
            }
        }
        Strategy::Laser => MixParams::Laser { phi0: 0.0 },
        Strategy::Instance => unreachable!("instance handled above"),
    };
    let recipe = Recipe {
        params,
        first: a.sample_id,
        second: b.sample_id,
        seed: Some(seed),
    };
    replay(&recipe, a, b)
}

/// Re-applies a recipe. `a`/`b` must be the samples named by the recipe,
/// in order (`a` = donor for instance recipes).
pub fn replay(recipe: &Recipe, a: &DomainSample, b: &DomainSample) -> Result<MixedCloud, MixError> {
    if (a.sample_id, b.sample_id) != (recipe.first, recipe.second) {
        return Err(MixError::RecipeMismatch {
            expected: (recipe.first, recipe.second),
            got: (a.sample_id, b.sample_id),
        });
    }
    let mut mixed = match &recipe.params {
        MixParams::Polar { theta0 } => polar_mix(a, b, *theta0),
        MixParams::Range { r0 } => range_mix(a, b, *r0)?,
        MixParams::Laser { phi0 } => laser_mix(a, b, *phi0),
        MixParams::Instance { chosen } => instance_concat(
            a,
            b,
            &DonorIndex::new(a).per_point,
            chosen.clone(),
            recipe.seed,
        ),
    };
    mixed.recipe.seed = recipe.seed;
    Ok(mixed)
}

/// Random flip / scale / vertical-axis rotation. Applied as
/// `p' = Rz(angle) * (scale * flip_x(p))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_x: bool,
    pub scale: f64,
    pub angle: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flip_x: false,
        scale: 1.0,
        angle: 0.0,
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip_x: rng.gen_bool(0.5),
            scale: rng.gen_range(0.95..=1.05),
            angle: rng.gen_range(0.0..TAU),
        }
    }

    /// The transform of a single point (or offset vector; the map is linear).
    pub fn apply_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = rot_z(self.angle);
        let sx = if self.flip_x { -self.scale } else { self.scale };
        let q = [sx * p[0], self.scale * p[1], self.scale * p[2]];
        [
            r[0][0] * q[0] + r[0][1] * q[1],
            r[1][0] * q[0] + r[1][1] * q[1],
            q[2],
        ]
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            positions: cloud
                .positions
                .iter()
                .map(|p| self.apply_point(p))
                .collect(),
            intensity: cloud.intensity.clone(),
            labels: cloud.labels.clone(),
        }
    }
}

pub fn standard_augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    Augmentation::draw(rng).apply(cloud)
}

/// Labels of a mixed cloud with points from unlabeled samples set to [`IGNORE`].
pub fn labels_or_ignore(cloud: &PointCloud) -> Vec<i32> {
    cloud
        .labels
        .clone()
        .unwrap_or_else(|| vec![IGNORE; cloud.len()])
}
