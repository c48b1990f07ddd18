//! Shared domain types and their invariant checks.

use std::fmt;

/// Label sentinel for points that take part in no loss and no metric.
pub const IGNORE: i32 = -1;

/// Tolerance for the orthonormality and determinant checks on extrinsic rotations.
pub const ROTATION_TOL: f64 = 1e-6;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about the vertical axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// A LiDAR sweep in the sensor frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub intensity: Option<Vec<f64>>,
    /// Class ids in `[0, num_classes)` or [`IGNORE`].
    pub labels: Option<Vec<i32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>) -> Self {
        Self {
            positions,
            intensity: None,
            labels: None,
        }
    }

    pub fn with_intensity(mut self, intensity: Vec<f64>) -> Self {
        self.intensity = Some(intensity);
        self
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn intensity_at(&self, i: usize) -> f64 {
        self.intensity.as_ref().map_or(0.0, |v| v[i])
    }

    pub fn label_at(&self, i: usize) -> i32 {
        self.labels.as_ref().map_or(IGNORE, |v| v[i])
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    fn check(&self, num_classes: Option<usize>, out: &mut Vec<Violation>) {
        let n = self.len();
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            out.push(Violation::new(
                "PointCloud",
                "positions",
                format!("coordinate of point {i} is not finite"),
            ));
        }
        if let Some(intensity) = &self.intensity {
            if intensity.len() != n {
                out.push(Violation::new(
                    "PointCloud",
                    "intensity",
                    format!("length {} differs from point count {n}", intensity.len()),
                ));
            } else if let Some(i) = intensity.iter().position(|v| !v.is_finite()) {
                out.push(Violation::new(
                    "PointCloud",
                    "intensity",
                    format!("value of point {i} is not finite"),
                ));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                out.push(Violation::new(
                    "PointCloud",
                    "labels",
                    format!("length {} differs from point count {n}", labels.len()),
                ));
            } else {
                let bad = labels.iter().position(|&l| {
                    l < IGNORE || num_classes.is_some_and(|c| l >= 0 && l as usize >= c)
                });
                if let Some(i) = bad {
                    out.push(Violation::new(
                        "PointCloud",
                        "labels",
                        format!("label {} of point {i} is out of range", labels[i]),
                    ));
                }
            }
        }
    }
}

/// Pinhole intrinsics plus the LiDAR-to-camera rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalibration {
    pub intrinsic: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl CameraCalibration {
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            intrinsic: IDENTITY3,
            rotation: IDENTITY3,
            translation: [0.0; 3],
            width,
            height,
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        self.check(&mut out);
        out
    }

    fn check(&self, out: &mut Vec<Violation>) {
        let k = &self.intrinsic;
        let finite = k
            .iter()
            .chain(self.rotation.iter())
            .flatten()
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            out.push(Violation::new(
                "CameraCalibration",
                "intrinsic/rotation/translation",
                "entries must be finite".into(),
            ));
            return;
        }
        if k[2][2] != 1.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            out.push(Violation::new(
                "CameraCalibration",
                "intrinsic",
                format!(
                    "last row must be [0, 0, 1] (got [{}, {}, {}])",
                    k[2][0], k[2][1], k[2][2]
                ),
            ));
        }
        let r = &self.rotation;
        let rrt = mat_mul(r, &transpose(r));
        let off = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rrt[i][j] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        if off > ROTATION_TOL {
            out.push(Violation::new(
                "CameraCalibration",
                "rotation",
                format!("must be orthonormal (max |R R^T - I| = {off:e})"),
            ));
        } else {
            let det = determinant(r);
            if (det - 1.0).abs() > ROTATION_TOL {
                out.push(Violation::new(
                    "CameraCalibration",
                    "rotation",
                    format!("determinant must be +1 (got {det})"),
                ));
            }
        }
        if self.width < 1 || self.height < 1 {
            out.push(Violation::new(
                "CameraCalibration",
                "width/height",
                format!("must be >= 1 (got {}x{})", self.width, self.height),
            ));
        }
    }
}

/// Dense frozen image embedding, `height x width x channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    fn check(&self, out: &mut Vec<Violation>) {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            out.push(Violation::new(
                "FeatureMap",
                "dimensions",
                format!(
                    "must be positive (got {}x{}x{})",
                    self.height, self.width, self.channels
                ),
            ));
        }
        if self.data.len() != self.height * self.width * self.channels {
            out.push(Violation::new(
                "FeatureMap",
                "data",
                format!(
                    "length {} differs from h*w*c = {}",
                    self.data.len(),
                    self.height * self.width * self.channels
                ),
            ));
        } else if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            out.push(Violation::new(
                "FeatureMap",
                "data",
                format!("entry {i} is not finite"),
            ));
        }
    }
}

/// Per-pixel instance ids, 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl MaskMap {
    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.ids[row * self.width + col]
    }

    /// Sorted set of nonzero ids.
    pub fn instance_ids(&self) -> Vec<u16> {
        let mut ids: Vec<u16> = self.ids.iter().copied().filter(|&i| i != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn check(&self, out: &mut Vec<Violation>) {
        if self.height == 0 || self.width == 0 {
            out.push(Violation::new(
                "MaskMap",
                "dimensions",
                format!("must be positive (got {}x{})", self.height, self.width),
            ));
        }
        if self.ids.len() != self.height * self.width {
            out.push(Violation::new(
                "MaskMap",
                "ids",
                format!(
                    "length {} differs from h*w = {}",
                    self.ids.len(),
                    self.height * self.width
                ),
            ));
        }
    }
}

/// `rows x cols` real matrix, row-major. Holds both trainable point
/// embeddings and camera-guided embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One camera attached to a scene: calibration, frozen features, optional instance masks.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub calib: CameraCalibration,
    pub features: FeatureMap,
    pub mask: Option<MaskMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub cloud: PointCloud,
    pub views: Vec<CameraView>,
    pub domain: Domain,
    pub sample_id: u64,
}

impl DomainSample {
    pub fn has_masks(&self) -> bool {
        self.views.iter().any(|v| v.mask.is_some())
    }

    /// Feature channel count shared by all views, if any view exists.
    pub fn channels(&self) -> Option<usize> {
        self.views.first().map(|v| v.features.channels)
    }
}

/// One failed invariant: which type, which field, what condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub type_name: &'static str,
    pub field: String,
    pub condition: String,
}

impl Violation {
    fn new(type_name: &'static str, field: &str, condition: String) -> Self {
        Self {
            type_name,
            field: field.to_string(),
            condition,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}: {}", self.type_name, self.field, self.condition)
    }
}

/// Checks every invariant of a sample; an empty list means the sample is well formed.
pub fn validate(sample: &DomainSample) -> Vec<Violation> {
    validate_with_classes(sample, None)
}

/// Like [`validate`], additionally bounding labels by `num_classes`.
pub fn validate_with_classes(sample: &DomainSample, num_classes: Option<usize>) -> Vec<Violation> {
    let mut out = Vec::new();
    sample.cloud.check(num_classes, &mut out);
    if sample.domain == Domain::Source && sample.cloud.labels.is_none() {
        out.push(Violation::new(
            "DomainSample",
            "cloud.labels",
            "source samples must carry labels".into(),
        ));
    }
    let channels = sample.channels();
    for (vi, view) in sample.views.iter().enumerate() {
        let before = out.len();
        view.calib.check(&mut out);
        view.features.check(&mut out);
        if let Some(mask) = &view.mask {
            mask.check(&mut out);
            if mask.height != view.features.height || mask.width != view.features.width {
                out.push(Violation::new(
                    "MaskMap",
                    "dimensions",
                    format!(
                        "{}x{} differs from feature map grid {}x{}",
                        mask.height, mask.width, view.features.height, view.features.width
                    ),
                ));
            }
        }
        if Some(view.features.channels) != channels {
            out.push(Violation::new(
                "DomainSample",
                "views",
                format!("view {vi} has a different channel count than view 0"),
            ));
        }
        for v in &mut out[before..] {
            v.field = format!("{} (view {vi})", v.field);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DomainSample {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]])
            .with_intensity(vec![0.5, 0.1])
            .with_labels(vec![0, IGNORE]);
        DomainSample {
            cloud,
            views: vec![CameraView {
                calib: CameraCalibration::identity(4, 3),
                features: FeatureMap::zeros(3, 4, 2),
                mask: Some(MaskMap::background(3, 4)),
            }],
            domain: Domain::Source,
            sample_id: 7,
        }
    }

    #[test]
    fn well_formed_sample_has_no_violations() {
        assert!(validate(&sample()).is_empty());
    }

    #[test]
    fn reflection_is_reported_on_rotation() {
        let mut s = sample();
        s.views[0].calib.rotation = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let v = validate(&s);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].type_name, "CameraCalibration");
        assert!(v[0].field.starts_with("rotation"));
        assert!(v[0].condition.contains("determinant"));
    }

    #[test]
    fn unlabeled_source_is_reported() {
        let mut s = sample();
        s.cloud.labels = None;
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].type_name, "DomainSample");
        assert!(v[0].field.contains("labels"));
        s.domain = Domain::Target;
        assert!(validate(&s).is_empty());
    }

    #[test]
    fn length_and_finiteness_checks() {
        let mut s = sample();
        s.cloud.intensity = Some(vec![1.0]);
        s.cloud.positions[1][2] = f64::NAN;
        s.views[0].features.data.push(0.0);
        s.views[0].calib.intrinsic[2][0] = 0.5;
        s.views[0].mask = Some(MaskMap::background(2, 2));
        let v = validate(&s);
        let fields: Vec<String> = v
            .iter()
            .map(|v| format!("{}.{}", v.type_name, v.field))
            .collect();
        assert_eq!(v.len(), 5, "{fields:?}");
    }

    #[test]
    fn label_range_checked_when_classes_known() {
        let mut s = sample();
        s.cloud.labels = Some(vec![6, 0]);
        assert!(validate(&s).is_empty());
        assert_eq!(validate_with_classes(&s, Some(6)).len(), 1);
        s.cloud.labels = Some(vec![-2, 0]);
        assert_eq!(validate(&s).len(), 1);
    }

    #[test]
    fn validate_is_pure() {
        let mut s = sample();
        s.views[0].calib.rotation[0][0] = 2.0;
        assert_eq!(validate(&s), validate(&s));
    }

    #[test]
    fn mask_instance_ids_sorted_unique() {
        let m = MaskMap {
            height: 2,
            width: 3,
            ids: vec![0, 2, 1, 2, 0, 1],
        };
        assert_eq!(m.instance_ids(), vec![1, 2]);
    }
}
