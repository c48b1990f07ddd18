//! On-disk formats: point clouds (`PCDA`), calibrations (text), feature maps
//! (`FMAP`), instance masks (`IMSK`) and sample manifests (text).
//!
//! All binary formats are little-endian regardless of host.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{
    CameraCalibration, CameraView, Domain, DomainSample, FeatureMap, MaskMap, PointCloud,
};

pub const CLOUD_MAGIC: &[u8; 4] = b"PCDA";
pub const FEATURE_MAGIC: &[u8; 4] = b"FMAP";
pub const MASK_MAGIC: &[u8; 4] = b"IMSK";

const FLAG_INTENSITY: u8 = 0b01;
const FLAG_LABELS: u8 = 0b10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("BadMagic: expected {expected:?} at byte offset 0")]
    BadMagic { expected: String },
    #[error("TruncatedFile: data ends at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("TrailingData: unexpected bytes from offset {offset}")]
    TrailingData { offset: u64 },
    #[error("NonFiniteValue at byte offset {offset}")]
    NonFiniteValue { offset: u64 },
    #[error("SizeMismatch: header declares {declared} payload bytes, file holds {actual}")]
    SizeMismatch { declared: u64, actual: u64 },
    #[error("MissingKey({0:?})")]
    MissingKey(String),
    #[error("DuplicateKey({key:?}) on line {line}")]
    DuplicateKey { key: String, line: usize },
    #[error("ParseError on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("InvariantViolation: {0}")]
    InvariantViolation(String),
    #[error("DanglingPath: {0}")]
    DanglingPath(PathBuf),
    #[error("DuplicateSampleId({0})")]
    DuplicateSampleId(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    /// Short name of the error kind, as surfaced by the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            DataError::BadMagic { .. } => "BadMagic",
            DataError::TruncatedFile { .. } => "TruncatedFile",
            DataError::TrailingData { .. } => "TrailingData",
            DataError::NonFiniteValue { .. } => "NonFiniteValue",
            DataError::SizeMismatch { .. } => "SizeMismatch",
            DataError::MissingKey(_) => "MissingKey",
            DataError::DuplicateKey { .. } => "DuplicateKey",
            DataError::ParseError { .. } => "ParseError",
            DataError::InvariantViolation(_) => "InvariantViolation",
            DataError::DanglingPath(_) => "DanglingPath",
            DataError::DuplicateSampleId(_) => "DuplicateSampleId",
            DataError::Io { .. } => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Cursor over a little-endian byte buffer that reports offsets on failure.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.remaining() < N {
            return Err(DataError::TruncatedFile {
                offset: self.buf.len() as u64,
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        match self.take::<4>() {
            Ok(m) if &m == expected => Ok(()),
            _ => Err(DataError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
            }),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take()?))
    }

    /// Reads an f32 and rejects NaN/infinity.
    pub(crate) fn finite_f32(&mut self) -> Result<f32> {
        let offset = self.offset();
        let v = f32::from_le_bytes(self.take()?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DataError::NonFiniteValue { offset })
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(DataError::TrailingData {
                offset: self.offset(),
            })
        }
    }
}

fn checked_payload(counts: &[u32], item_bytes: u64) -> Option<u64> {
    counts
        .iter()
        .try_fold(item_bytes, |acc, &c| acc.checked_mul(u64::from(c)))
}

fn size_check(reader: &ByteReader<'_>, declared: Option<u64>) -> Result<()> {
    let actual = reader.remaining() as u64;
    match declared {
        Some(d) if d == actual => Ok(()),
        d => Err(DataError::SizeMismatch {
            declared: d.unwrap_or(u64::MAX),
            actual,
        }),
    }
}

fn f32_of(v: f64, what: &str) -> Result<f32> {
    let s = v as f32;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(DataError::InvariantViolation(format!(
            "{what} value {v} is not representable as a finite f32"
        )))
    }
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Result<Vec<u8>> {
    let n = cloud.len();
    let count = u32::try_from(n)
        .map_err(|_| DataError::InvariantViolation(format!("{n} points exceed u32")))?;
    if cloud.intensity.as_ref().is_some_and(|v| v.len() != n)
        || cloud.labels.as_ref().is_some_and(|v| v.len() != n)
    {
        return Err(DataError::InvariantViolation(
            "PointCloud intensity/labels length differs from point count".into(),
        ));
    }
    let mut flags = 0u8;
    let mut record = 12;
    if cloud.intensity.is_some() {
        flags |= FLAG_INTENSITY;
        record += 4;
    }
    if cloud.labels.is_some() {
        flags |= FLAG_LABELS;
        record += 4;
    }
    let mut out = Vec::with_capacity(9 + n * record);
    out.extend_from_slice(CLOUD_MAGIC);
    out.push(flags);
    out.extend_from_slice(&count.to_le_bytes());
    for i in 0..n {
        for c in cloud.positions[i] {
            out.extend_from_slice(&f32_of(c, "coordinate")?.to_le_bytes());
        }
        if let Some(intensity) = &cloud.intensity {
            out.extend_from_slice(&f32_of(intensity[i], "intensity")?.to_le_bytes());
        }
        if let Some(labels) = &cloud.labels {
            out.extend_from_slice(&labels[i].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = ByteReader::new(bytes);
    r.magic(CLOUD_MAGIC)?;
    let flags = r.u8()?;
    let n = r.u32()?;
    let has_intensity = flags & FLAG_INTENSITY != 0;
    let has_labels = flags & FLAG_LABELS != 0;
    let record = 12 + 4 * u64::from(has_intensity) + 4 * u64::from(has_labels);
    let declared = record * u64::from(n);
    if (r.remaining() as u64) < declared {
        return Err(DataError::TruncatedFile {
            offset: bytes.len() as u64,
        });
    }
    let n = n as usize;
    let mut positions = Vec::with_capacity(n);
    let mut intensity = has_intensity.then(|| Vec::with_capacity(n));
    let mut labels = has_labels.then(|| Vec::with_capacity(n));
    for _ in 0..n {
        let x = r.finite_f32()?;
        let y = r.finite_f32()?;
        let z = r.finite_f32()?;
        positions.push([f64::from(x), f64::from(y), f64::from(z)]);
        if let Some(v) = intensity.as_mut() {
            v.push(f64::from(r.finite_f32()?));
        }
        if let Some(v) = labels.as_mut() {
            v.push(r.i32()?);
        }
    }
    r.finish()?;
    Ok(PointCloud {
        positions,
        intensity,
        labels,
    })
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    decode_point_cloud(&read_bytes(path)?)
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_point_cloud(cloud)?)
}

pub fn encode_feature_map(fm: &FeatureMap) -> Result<Vec<u8>> {
    let dims = [fm.height, fm.width, fm.channels].map(|d| u32::try_from(d).ok());
    let [Some(h), Some(w), Some(c)] = dims else {
        return Err(DataError::InvariantViolation(
            "FeatureMap dimension exceeds u32".into(),
        ));
    };
    if fm.data.len() != fm.height * fm.width * fm.channels {
        return Err(DataError::InvariantViolation(
            "FeatureMap data length differs from h*w*c".into(),
        ));
    }
    let mut out = Vec::with_capacity(16 + 4 * fm.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for d in [h, w, c] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &fm.data {
        if !v.is_finite() {
            return Err(DataError::InvariantViolation(
                "FeatureMap entry is not finite".into(),
            ));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let h = r.u32()?;
    let w = r.u32()?;
    let c = r.u32()?;
    size_check(&r, checked_payload(&[h, w, c], 4))?;
    let len = h as usize * w as usize * c as usize;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.finite_f32()?);
    }
    Ok(FeatureMap {
        height: h as usize,
        width: w as usize,
        channels: c as usize,
        data,
    })
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(&read_bytes(path)?)
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    write_bytes(path, &encode_feature_map(fm)?)
}

pub fn encode_mask_map(mm: &MaskMap) -> Result<Vec<u8>> {
    let (Ok(h), Ok(w)) = (u32::try_from(mm.height), u32::try_from(mm.width)) else {
        return Err(DataError::InvariantViolation(
            "MaskMap dimension exceeds u32".into(),
        ));
    };
    if mm.ids.len() != mm.height * mm.width {
        return Err(DataError::InvariantViolation(
            "MaskMap id count differs from h*w".into(),
        ));
    }
    let mut out = Vec::with_capacity(12 + 2 * mm.ids.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    for id in &mm.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mask_map(bytes: &[u8]) -> Result<MaskMap> {
    let mut r = ByteReader::new(bytes);
    r.magic(MASK_MAGIC)?;
    let h = r.u32()?;
    let w = r.u32()?;
    size_check(&r, checked_payload(&[h, w], 2))?;
    let len = h as usize * w as usize;
    let mut ids = Vec::with_capacity(len);
    for _ in 0..len {
        ids.push(r.u16()?);
    }
    Ok(MaskMap {
        height: h as usize,
        width: w as usize,
        ids,
    })
}

pub fn read_mask_map(path: &Path) -> Result<MaskMap> {
    decode_mask_map(&read_bytes(path)?)
}

pub fn write_mask_map(path: &Path, mm: &MaskMap) -> Result<()> {
    write_bytes(path, &encode_mask_map(mm)?)
}

/// Iterates `key = values` lines, skipping blanks and `#` comments.
/// Yields 1-based line numbers.
pub fn key_value_lines(text: &str) -> impl Iterator<Item = (usize, Result<(&str, &str)>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        let parsed = match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
            _ => Err(DataError::ParseError {
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            }),
        };
        Some((i + 1, parsed))
    })
}

fn parse_reals<const N: usize>(line: usize, key: &str, value: &str) -> Result<[f64; N]> {
    let parsed: Vec<f64> = value
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| DataError::ParseError {
            line,
            message: format!("{key}: {e}"),
        })?;
    let arr: [f64; N] = parsed
        .try_into()
        .map_err(|v: Vec<f64>| DataError::ParseError {
            line,
            message: format!("{key}: expected {N} values, got {}", v.len()),
        })?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err(DataError::ParseError {
            line,
            message: format!("{key}: values must be finite"),
        });
    }
    Ok(arr)
}

fn to_mat3(v: [f64; 9]) -> [[f64; 3]; 3] {
    [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]
}

pub fn parse_calibration(text: &str) -> Result<CameraCalibration> {
    let mut k = None;
    let mut r = None;
    let mut t = None;
    let mut size = None;
    for (line, kv) in key_value_lines(text) {
        let (key, value) = kv?;
        let dup = || DataError::DuplicateKey {
            key: key.to_string(),
            line,
        };
        match key {
            "K" => {
                if k.replace(to_mat3(parse_reals::<9>(line, key, value)?))
                    .is_some()
                {
                    return Err(dup());
                }
            }
            "R" => {
                if r.replace(to_mat3(parse_reals::<9>(line, key, value)?))
                    .is_some()
                {
                    return Err(dup());
                }
            }
            "T" => {
                if t.replace(parse_reals::<3>(line, key, value)?).is_some() {
                    return Err(dup());
                }
            }
            "size" => {
                let dims: Vec<u32> = value
                    .split_whitespace()
                    .map(str::parse::<u32>)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| DataError::ParseError {
                        line,
                        message: format!("size: {e}"),
                    })?;
                let [w, h] = dims[..] else {
                    return Err(DataError::ParseError {
                        line,
                        message: format!("size: expected 2 integers, got {}", dims.len()),
                    });
                };
                if size.replace((w, h)).is_some() {
                    return Err(dup());
                }
            }
            other => {
                return Err(DataError::ParseError {
                    line,
                    message: format!("unknown key {other:?}"),
                })
            }
        }
    }
    let missing = |key: &str| DataError::MissingKey(key.to_string());
    let (width, height) = size.ok_or_else(|| missing("size"))?;
    let calib = CameraCalibration {
        intrinsic: k.ok_or_else(|| missing("K"))?,
        rotation: r.ok_or_else(|| missing("R"))?,
        translation: t.ok_or_else(|| missing("T"))?,
        width,
        height,
    };
    let violations = calib.violations();
    if let Some(first) = violations.first() {
        return Err(DataError::InvariantViolation(first.to_string()));
    }
    Ok(calib)
}

/// Emits keys in the order K, R, T, size with 17 significant digits.
pub fn format_calibration(calib: &CameraCalibration) -> String {
    let mut out = String::new();
    let mut line = |key: &str, values: &mut dyn Iterator<Item = f64>| {
        out.push_str(key);
        out.push_str(" =");
        for v in values {
            write!(out, " {v:.16e}").unwrap();
        }
        out.push('\n');
    };
    line("K", &mut calib.intrinsic.iter().flatten().copied());
    line("R", &mut calib.rotation.iter().flatten().copied());
    line("T", &mut calib.translation.iter().copied());
    writeln!(out, "size = {} {}", calib.width, calib.height).unwrap();
    out
}

pub fn read_calibration(path: &Path) -> Result<CameraCalibration> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| DataError::ParseError {
        line: 0,
        message: e.to_string(),
    })?;
    parse_calibration(&text)
}

pub fn write_calibration(path: &Path, calib: &CameraCalibration) -> Result<()> {
    write_bytes(path, format_calibration(calib).as_bytes())
}

/// File names of one camera view, relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewPaths {
    pub calib: PathBuf,
    pub features: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: u64,
    pub domain: Domain,
    pub cloud: PathBuf,
    pub views: Vec<ViewPaths>,
}

/// Parsed manifest; samples are loaded on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<DomainSample> {
        let base = &self.base_dir;
        let cloud = read_point_cloud(&base.join(&entry.cloud))?;
        let mut views = Vec::with_capacity(entry.views.len());
        for v in &entry.views {
            views.push(CameraView {
                calib: read_calibration(&base.join(&v.calib))?,
                features: read_feature_map(&base.join(&v.features))?,
                mask: v
                    .mask
                    .as_ref()
                    .map(|m| read_mask_map(&base.join(m)))
                    .transpose()?,
            });
        }
        let sample = DomainSample {
            cloud,
            views,
            domain: entry.domain,
            sample_id: entry.sample_id,
        };
        let violations = crate::model::validate(&sample);
        if let Some(first) = violations.first() {
            return Err(DataError::InvariantViolation(format!(
                "sample {}: {first}",
                entry.sample_id
            )));
        }
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<DomainSample>> {
        self.entries.iter().map(|e| self.load(e)).collect()
    }
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DataError::ParseError {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 || !(fields.len() - 3).is_multiple_of(3) {
            return Err(err(format!(
                "expected `sample_id domain cloud [calib featmap mask|-]...`, got {} fields",
                fields.len()
            )));
        }
        let sample_id: u64 = fields[0]
            .parse()
            .map_err(|e| err(format!("sample_id: {e}")))?;
        let domain = Domain::parse(fields[1])
            .ok_or_else(|| err(format!("unknown domain {:?}", fields[1])))?;
        if !seen.insert(sample_id) {
            return Err(DataError::DuplicateSampleId(sample_id));
        }
        let views = fields[3..]
            .chunks(3)
            .map(|c| ViewPaths {
                calib: PathBuf::from(c[0]),
                features: PathBuf::from(c[1]),
                mask: (c[2] != "-").then(|| PathBuf::from(c[2])),
            })
            .collect();
        entries.push(ManifestEntry {
            sample_id,
            domain,
            cloud: PathBuf::from(fields[2]),
            views,
        });
    }
    Ok(Manifest {
        base_dir: base_dir.to_path_buf(),
        entries,
    })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| DataError::ParseError {
        line: 0,
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let manifest = parse_manifest(&text, &base)?;
    for e in &manifest.entries {
        let paths = std::iter::once(&e.cloud).chain(
            e.views
                .iter()
                .flat_map(|v| [Some(&v.calib), Some(&v.features), v.mask.as_ref()])
                .flatten(),
        );
        for p in paths {
            if !base.join(p).is_file() {
                return Err(DataError::DanglingPath(p.clone()));
            }
        }
    }
    Ok(manifest)
}

fn path_field(p: &Path) -> Result<String> {
    let s = p.to_string_lossy().into_owned();
    if s.is_empty() || s == "-" || s.contains(char::is_whitespace) || s.contains('#') {
        return Err(DataError::InvariantViolation(format!(
            "path {s:?} cannot be stored in a manifest"
        )));
    }
    Ok(s)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        write!(
            out,
            "{} {} {}",
            e.sample_id,
            e.domain,
            path_field(&e.cloud)?
        )
        .unwrap();
        for v in &e.views {
            let mask = match &v.mask {
                Some(m) => path_field(m)?,
                None => "-".to_string(),
            };
            write!(
                out,
                " {} {} {}",
                path_field(&v.calib)?,
                path_field(&v.features)?,
                mask
            )
            .unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_bytes(path, format_manifest(entries)?.as_bytes())
}

/// Writes every file of `sample` into `dir` under `prefix`, returning the
/// manifest entry that references them.
pub fn write_sample(dir: &Path, prefix: &str, sample: &DomainSample) -> Result<ManifestEntry> {
    let cloud = PathBuf::from(format!("{prefix}.pcda"));
    write_point_cloud(&dir.join(&cloud), &sample.cloud)?;
    let mut views = Vec::with_capacity(sample.views.len());
    for (i, view) in sample.views.iter().enumerate() {
        let paths = ViewPaths {
            calib: PathBuf::from(format!("{prefix}_cam{i}.calib")),
            features: PathBuf::from(format!("{prefix}_cam{i}.fmap")),
            mask: view
                .mask
                .as_ref()
                .map(|_| PathBuf::from(format!("{prefix}_cam{i}.imsk"))),
        };
        write_calibration(&dir.join(&paths.calib), &view.calib)?;
        write_feature_map(&dir.join(&paths.features), &view.features)?;
        if let (Some(m), Some(p)) = (&view.mask, &paths.mask) {
            write_mask_map(&dir.join(p), m)?;
        }
        views.push(paths);
    }
    Ok(ManifestEntry {
        sample_id: sample.sample_id,
        domain: sample.domain,
        cloud,
        views,
    })
}
