//! Synthetic LiDAR scenes with a forward camera, class-informative feature
//! maps and instance masks.
//!
//! A scene is a ground plane plus boxes and vertical cylinders. The cloud is
//! ray cast from the sensor origin over a beam × azimuth grid with first-hit
//! semantics; the camera renders, per pixel, the unit embedding of the class
//! it sees (plus noise) and the id of the object instance.

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataio::{key_value_lines, write_manifest, write_sample, DataError};
use crate::exec::Exec;
use crate::model::{
    mat_vec, CameraCalibration, CameraView, Domain, DomainSample, FeatureMap, MaskMap, PointCloud,
    Vec3,
};

/// Height of the sensor above the ground plane (meters).
pub const SENSOR_HEIGHT: f64 = 1.73;
pub const MAX_RANGE: f64 = 50.0;
/// Sample ids of target scenes start here.
pub const TARGET_ID_OFFSET: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("UnknownKey: {0}")]
    UnknownKey(String),
    #[error("ParseError: line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainParams {
    pub domain: Domain,
    pub beams: usize,
    pub azimuth_steps: usize,
    /// Lowest and highest beam elevation (radians).
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub object_scale: f64,
    pub coord_noise: f64,
    pub feature_noise: f64,
    /// Multiplier on the per-class reflectance.
    pub intensity_gain: f64,
    /// Whether the sensor records intensity at all.
    pub intensity: bool,
    pub num_classes: usize,
    pub class_seed: u64,
    pub domain_seed: u64,
    /// Square image side in pixels.
    pub image_size: usize,
    pub channels: usize,
}

impl DomainParams {
    pub fn source() -> Self {
        Self {
            domain: Domain::Source,
            beams: 64,
            azimuth_steps: 100,
            pitch_min: -24.8f64.to_radians(),
            pitch_max: 2.0f64.to_radians(),
            objects_min: 10,
            objects_max: 16,
            object_scale: 1.0,
            coord_noise: 0.02,
            feature_noise: 0.05,
            intensity_gain: 1.0,
            intensity: true,
            num_classes: 6,
            class_seed: 7,
            domain_seed: 11,
            image_size: 96,
            channels: 16,
        }
    }

    pub fn target() -> Self {
        Self {
            domain: Domain::Target,
            beams: 32,
            pitch_min: -30.7f64.to_radians(),
            pitch_max: 10.7f64.to_radians(),
            object_scale: 1.2,
            coord_noise: 0.05,
            feature_noise: 0.08,
            intensity_gain: 1.5,
            domain_seed: 23,
            ..Self::source()
        }
    }

    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidParameter(m.to_string()));
        if self.beams < 2 {
            return bad("beams must be >= 2");
        }
        if self.azimuth_steps < 8 {
            return bad("azimuth_steps must be >= 8");
        }
        if !(self.pitch_min < self.pitch_max
            && self.pitch_min > -PI / 2.0
            && self.pitch_max < PI / 2.0)
        {
            return bad("pitch range must be increasing and inside (-pi/2, pi/2)");
        }
        if self.objects_min > self.objects_max {
            return bad("objects_min must not exceed objects_max");
        }
        if !(self.object_scale > 0.0 && self.object_scale.is_finite()) {
            return bad("object_scale must be positive");
        }
        if !(self.coord_noise >= 0.0 && self.feature_noise >= 0.0 && self.intensity_gain >= 0.0) {
            return bad("noise levels and intensity gain must be non-negative");
        }
        if self.num_classes < 1 || self.channels < 1 || self.image_size < 2 {
            return bad("num_classes and channels must be >= 1, image_size >= 2");
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 17] = [
        "domain",
        "beams",
        "azimuth_steps",
        "pitch_min",
        "pitch_max",
        "objects_min",
        "objects_max",
        "object_scale",
        "coord_noise",
        "feature_noise",
        "intensity_gain",
        "intensity",
        "num_classes",
        "class_seed",
        "domain_seed",
        "image_size",
        "channels",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SynthError> {
            v.parse()
                .map_err(|_| SynthError::InvalidParameter(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "domain" => {
                self.domain = Domain::parse(value).ok_or_else(|| {
                    SynthError::InvalidParameter(format!("domain: unknown tag {value:?}"))
                })?
            }
            "beams" => self.beams = p(key, value)?,
            "azimuth_steps" => self.azimuth_steps = p(key, value)?,
            "pitch_min" => self.pitch_min = p(key, value)?,
            "pitch_max" => self.pitch_max = p(key, value)?,
            "objects_min" => self.objects_min = p(key, value)?,
            "objects_max" => self.objects_max = p(key, value)?,
            "object_scale" => self.object_scale = p(key, value)?,
            "coord_noise" => self.coord_noise = p(key, value)?,
            "feature_noise" => self.feature_noise = p(key, value)?,
            "intensity_gain" => self.intensity_gain = p(key, value)?,
            "intensity" => self.intensity = p(key, value)?,
            "num_classes" => self.num_classes = p(key, value)?,
            "class_seed" => self.class_seed = p(key, value)?,
            "domain_seed" => self.domain_seed = p(key, value)?,
            "image_size" => self.image_size = p(key, value)?,
            "channels" => self.channels = p(key, value)?,
            _ => return Err(SynthError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "domain" => self.domain.to_string(),
            "beams" => self.beams.to_string(),
            "azimuth_steps" => self.azimuth_steps.to_string(),
            "pitch_min" => format!("{:?}", self.pitch_min),
            "pitch_max" => format!("{:?}", self.pitch_max),
            "objects_min" => self.objects_min.to_string(),
            "objects_max" => self.objects_max.to_string(),
            "object_scale" => format!("{:?}", self.object_scale),
            "coord_noise" => format!("{:?}", self.coord_noise),
            "feature_noise" => format!("{:?}", self.feature_noise),
            "intensity_gain" => format!("{:?}", self.intensity_gain),
            "intensity" => self.intensity.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "class_seed" => self.class_seed.to_string(),
            "domain_seed" => self.domain_seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "channels" => self.channels.to_string(),
            _ => return None,
        })
    }

    /// `key = value` lines in [`Self::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k} = {}", self.get(k).unwrap()).unwrap();
        }
        out
    }

    /// Parses `key = value` lines over the defaults of `base`.
    pub fn from_text(text: &str, base: DomainParams) -> Result<Self, SynthError> {
        let mut p = base;
        for (line, kv) in key_value_lines(text) {
            let (k, v) = kv.map_err(|e| SynthError::ParseError {
                line,
                message: e.to_string(),
            })?;
            p.set(k, v)?;
        }
        p.check()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    /// Axis-aligned box given by its min / max corners.
    Box { lo: Vec3, hi: Vec3 },
    /// Vertical cylinder standing on the ground.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        top: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Object {
    shape: Shape,
    class: usize,
    reflectance: f64,
}

/// Per-class mean reflectance; object classes cycle through the templates.
fn class_reflectance(class: usize) -> f64 {
    const R: [f64; 6] = [0.25, 0.6, 0.45, 0.8, 0.35, 0.15];
    if class == 0 {
        R[0]
    } else {
        R[1 + (class - 1) % 5]
    }
}

/// Nominal (length, width, height) of an object class, or radius and height
/// for cylinders (width unused).
fn template(class: usize) -> (bool, f64, f64, f64) {
    match (class - 1) % 5 {
        0 => (true, 4.2, 1.8, 1.5),
        1 => (true, 8.0, 2.5, 3.2),
        2 => (false, 0.15, 0.0, 4.0),
        3 => (true, 0.3, 8.0, 2.5),
        _ => (false, 1.5, 0.0, 3.0),
    }
}

const GROUND_Z: f64 = -SENSOR_HEIGHT;

fn place_objects<R: Rng>(params: &DomainParams, rng: &mut R) -> Vec<Object> {
    if params.num_classes < 2 {
        return Vec::new();
    }
    let count = rng.gen_range(params.objects_min..=params.objects_max);
    let s = params.object_scale;
    (0..count)
        .map(|i| {
            let class = 1 + rng.gen_range(0..params.num_classes - 1);
            // every other object lands in the camera's field of view
            let az = if i % 2 == 0 {
                rng.gen_range(-FRAC_PI_4 * 0.9..FRAC_PI_4 * 0.9)
            } else {
                rng.gen_range(-PI..PI)
            };
            let dist = rng.gen_range(5.0..28.0);
            let c = [dist * az.cos(), dist * az.sin()];
            let (is_box, a, b, h) = template(class);
            let jitter = rng.gen_range(0.85..1.15) * s;
            let shape = if is_box {
                let (mut l, mut w) = (a * jitter, b * jitter);
                if rng.gen_bool(0.5) {
                    std::mem::swap(&mut l, &mut w);
                }
                Shape::Box {
                    lo: [c[0] - l / 2.0, c[1] - w / 2.0, GROUND_Z],
                    hi: [c[0] + l / 2.0, c[1] + w / 2.0, GROUND_Z + h * jitter],
                }
            } else {
                Shape::Cylinder {
                    center: c,
                    radius: a * jitter,
                    top: GROUND_Z + h * jitter,
                }
            };
            Object {
                shape,
                class,
                reflectance: class_reflectance(class) * rng.gen_range(0.9..1.1),
            }
        })
        .collect()
}

fn hit_box(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<f64> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 1e-9).then_some(t0)
}

fn hit_cylinder(o: &Vec3, d: &Vec3, center: &[f64; 2], radius: f64, top: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
    let a = d[0] * d[0] + d[1] * d[1];
    if a > 1e-15 {
        let b = 2.0 * (ox * d[0] + oy * d[1]);
        let c = ox * ox + oy * oy - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = o[2] + t * d[2];
                if (GROUND_Z..=top).contains(&z) {
                    consider(t);
                }
            }
        }
    }
    if d[2].abs() > 1e-12 {
        let t = (top - o[2]) / d[2];
        let (x, y) = (ox + t * d[0], oy + t * d[1]);
        if x * x + y * y <= radius * radius {
            consider(t);
        }
    }
    best
}

/// First hit along a ray: distance and object index (`None` = ground).
fn cast(objects: &[Object], o: &Vec3, d: &Vec3) -> Option<(f64, Option<usize>)> {
    let mut best: Option<(f64, Option<usize>)> = None;
    if d[2] < -1e-12 {
        let t = (GROUND_Z - o[2]) / d[2];
        if t > 0.0 {
            best = Some((t, None));
        }
    }
    for (k, obj) in objects.iter().enumerate() {
        let t = match obj.shape {
            Shape::Box { lo, hi } => hit_box(o, d, &lo, &hi),
            Shape::Cylinder {
                center,
                radius,
                top,
            } => hit_cylinder(o, d, &center, radius, top),
        };
        if let Some(t) = t {
            if best.is_none_or(|(b, _)| t < b) {
                best = Some((t, Some(k)));
            }
        }
    }
    best.filter(|(t, _)| *t <= MAX_RANGE)
}

/// Unit class embeddings (one extra row for sky) drawn from `seed`.
pub fn class_embeddings(num_classes: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..=num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..channels).map(|_| normal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Forward-looking (+x) pinhole camera at `center` with a 90 degree field of view.
pub fn forward_camera(size: usize, center: Vec3) -> CameraCalibration {
    let f = size as f64 / 2.0;
    let c = (size as f64 - 1.0) / 2.0;
    let rotation = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    let rc = mat_vec(&rotation, &center);
    CameraCalibration {
        intrinsic: [[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]],
        rotation,
        translation: [-rc[0], -rc[1], -rc[2]],
        width: size as u32,
        height: size as u32,
    }
}

pub const CAMERA_CENTER: Vec3 = [0.1, 0.0, 0.0];

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One scene; its sample id is `scene_seed`.
pub fn gen_scene(params: &DomainParams, scene_seed: u64) -> DomainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(params.domain_seed ^ splitmix(scene_seed)));
    let objects = place_objects(params, &mut rng);
    let coord = Normal::new(0.0, params.coord_noise.max(0.0)).unwrap();
    let inten = Normal::new(0.0, 0.03).unwrap();
    let origin = [0.0; 3];

    let mut positions = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    for bi in 0..params.beams {
        let pitch = params.pitch_min
            + (params.pitch_max - params.pitch_min) * bi as f64 / (params.beams - 1) as f64;
        for ai in 0..params.azimuth_steps {
            let az = -PI + TAU * ai as f64 / params.azimuth_steps as f64;
            let d = [pitch.cos() * az.cos(), pitch.cos() * az.sin(), pitch.sin()];
            let Some((t, obj)) = cast(&objects, &origin, &d) else {
                continue;
            };
            let (class, refl) = match obj {
                Some(k) => (objects[k].class, objects[k].reflectance),
                None => (0, class_reflectance(0)),
            };
            let mut p = [t * d[0], t * d[1], t * d[2]];
            for v in &mut p {
                *v += coord.sample(&mut rng);
            }
            positions.push(p);
            intensity.push((refl * params.intensity_gain + inten.sample(&mut rng)).max(0.0));
            labels.push(class as i32);
        }
    }

    let size = params.image_size;
    let calib = forward_camera(size, CAMERA_CENTER);
    let emb = class_embeddings(params.num_classes, params.channels, params.class_seed);
    let fnoise = Normal::new(0.0, params.feature_noise.max(0.0)).unwrap();
    let mut features = FeatureMap::zeros(size, size, params.channels);
    let mut mask = MaskMap::background(size, size);
    let k = calib.intrinsic;
    for row in 0..size {
        for col in 0..size {
            // camera-frame ray through the pixel centre, rotated to the sensor frame
            let xc = (col as f64 - k[0][2]) / k[0][0];
            let yc = (row as f64 - k[1][2]) / k[1][1];
            let d_cam = [xc, yc, 1.0];
            let r = calib.rotation;
            let mut d = [0.0; 3];
            for a in 0..3 {
                d[a] = r[0][a] * d_cam[0] + r[1][a] * d_cam[1] + r[2][a] * d_cam[2];
            }
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let d = [d[0] / n, d[1] / n, d[2] / n];
            let (class, id) = match cast(&objects, &CAMERA_CENTER, &d) {
                Some((_, Some(o))) => (objects[o].class, o as u16 + 1),
                Some((_, None)) => (0, 0),
                None => (params.num_classes, 0),
            };
            let px = features.pixel_mut(row, col);
            for (c, v) in px.iter_mut().enumerate() {
                *v = (emb[class][c] + fnoise.sample(&mut rng)) as f32;
            }
            mask.ids[row * size + col] = id;
        }
    }

    let mut cloud = PointCloud::new(positions).with_labels(labels);
    if params.intensity {
        cloud = cloud.with_intensity(intensity);
    }
    DomainSample {
        cloud,
        views: vec![CameraView {
            calib,
            features,
            mask: Some(mask),
        }],
        domain: params.domain,
        sample_id: scene_seed,
    }
}

/// Domain seed of a generated pair member under a run `seed`.
pub fn seeded(params: &DomainParams, seed: u64) -> DomainParams {
    DomainParams {
        domain_seed: splitmix(params.domain_seed ^ splitmix(seed.wrapping_add(1))),
        ..params.clone()
    }
}

/// `count` scenes with sample ids `id_offset..id_offset + count`.
pub fn gen_domain(
    params: &DomainParams,
    count: usize,
    id_offset: u64,
    exec: Exec,
) -> Vec<DomainSample> {
    exec.map(count, |i| gen_scene(params, id_offset + i as u64))
}

/// Writes `scenes` source and target samples plus `source.manifest` and
/// `target.manifest` into `dir`; returns the two manifest paths.
pub fn gen_domain_pair(
    src: &DomainParams,
    tgt: &DomainParams,
    scenes: usize,
    seed: u64,
    dir: &Path,
) -> Result<(PathBuf, PathBuf), DataError> {
    for p in [src, tgt] {
        p.check()
            .map_err(|e| DataError::InvariantViolation(e.to_string()))?;
    }
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (params, prefix, offset, name) in [
        (src, "src", 0, "source.manifest"),
        (tgt, "tgt", TARGET_ID_OFFSET, "target.manifest"),
    ] {
        let samples = gen_domain(&seeded(params, seed), scenes, offset, Exec::default());
        let entries = samples
            .iter()
            .enumerate()
            .map(|(i, s)| write_sample(dir, &format!("{prefix}_{i:04}"), s))
            .collect::<Result<Vec<_>, _>>()?;
        let path = dir.join(name);
        write_manifest(&path, &entries)?;
        out.push(path);
    }
    Ok((out.remove(0), out.remove(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate;
    use crate::projection::project_point;

    fn small() -> DomainParams {
        DomainParams {
            beams: 16,
            azimuth_steps: 64,
            image_size: 32,
            ..DomainParams::source()
        }
    }

    #[test]
    fn empty_scene_is_all_ground() {
        let p = DomainParams {
            objects_min: 0,
            objects_max: 0,
            ..small()
        };
        let s = gen_scene(&p, 3);
        assert!(!s.cloud.is_empty());
        assert!(s.cloud.labels.as_ref().unwrap().iter().all(|&l| l == 0));
        assert!(s.views[0].mask.as_ref().unwrap().instance_ids().is_empty());
    }

    #[test]
    fn generated_samples_validate() {
        for seed in 0..4 {
            let s = gen_scene(&small(), seed);
            assert!(validate(&s).is_empty(), "{:?}", validate(&s));
        }
        let t = gen_scene(&DomainParams::target(), 1);
        assert!(validate(&t).is_empty());
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_scene(&small(), 5), gen_scene(&small(), 5));
        assert_ne!(gen_scene(&small(), 5).cloud, gen_scene(&small(), 6).cloud);
    }

    #[test]
    fn camera_looks_forward() {
        let c = forward_camera(96, CAMERA_CENTER);
        assert!(c.violations().is_empty());
        let (uv, depth) = project_point(&c, &[10.1, 0.0, 0.0]).unwrap();
        assert!((uv[0] - 47.5).abs() < 1e-12 && (uv[1] - 47.5).abs() < 1e-12);
        assert!((depth - 10.0).abs() < 1e-12);
        // +y (left) maps to smaller u, +z (up) to smaller v
        let (uv, _) = project_point(&c, &[10.1, 1.0, 1.0]).unwrap();
        assert!(uv[0] < 47.5 && uv[1] < 47.5);
    }

    #[test]
    fn class_embeddings_are_unit() {
        for e in class_embeddings(6, 16, 1) {
            assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_hits() {
        let bx = Shape::Box {
            lo: [4.0, -1.0, GROUND_Z],
            hi: [6.0, 1.0, 0.5],
        };
        let objs = [Object {
            shape: bx,
            class: 1,
            reflectance: 0.5,
        }];
        let (t, k) = cast(&objs, &[0.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!((t, k), (4.0, Some(0)));
        let (t, k) = cast(&objs, &[0.0; 3], &[0.0, 0.0, -1.0]).unwrap();
        assert!((t - SENSOR_HEIGHT).abs() < 1e-12 && k.is_none());
        assert!(cast(&objs, &[0.0; 3], &[0.0, 0.0, 1.0]).is_none());
        let cyl = [Object {
            shape: Shape::Cylinder {
                center: [0.0, 5.0],
                radius: 1.0,
                top: 1.0,
            },
            class: 3,
            reflectance: 0.5,
        }];
        let (t, _) = cast(&cyl, &[0.0; 3], &[0.0, 1.0, 0.0]).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
    }

    #[test]
    fn params_text_roundtrip() {
        let p = DomainParams::target();
        let back = DomainParams::from_text(&p.to_text(), DomainParams::source()).unwrap();
        assert_eq!(back, p);
        assert_eq!(
            DomainParams::from_text("bogus = 1\n", DomainParams::source()),
            Err(SynthError::UnknownKey("bogus".into()))
        );
    }
}
