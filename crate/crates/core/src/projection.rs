//! LiDAR-to-image projection, bilinear feature sampling and mask lookup.

use thiserror::Error;

use crate::exec::Exec;
use crate::model::{
    mat_vec, CameraCalibration, CameraView, EmbeddingMatrix, FeatureMap, MaskMap, PointCloud,
};

/// Points whose camera-frame depth is at or below this are behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("OutOfBounds: query {index} at uv ({u}, {v}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        index: usize,
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
}

/// Result of projecting a cloud into one camera. `uv` is (column, row).
///
/// `uv` and `depth` are meaningful only where `visible` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPoints {
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub visible: Vec<bool>,
    pub view_index: usize,
}

impl ProjectedPoints {
    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Projects one point; `None` if it is behind the camera.
#[inline]
pub fn project_point(calib: &CameraCalibration, p: &[f64; 3]) -> Option<([f64; 2], f64)> {
    let q = mat_vec(&calib.rotation, p);
    let q = [
        q[0] + calib.translation[0],
        q[1] + calib.translation[1],
        q[2] + calib.translation[2],
    ];
    if q[2] <= EPS_DEPTH {
        return None;
    }
    let img = mat_vec(&calib.intrinsic, &q);
    Some(([img[0] / img[2], img[1] / img[2]], img[2]))
}

#[inline]
fn in_image(calib: &CameraCalibration, uv: &[f64; 2]) -> bool {
    uv[0] >= 0.0
        && uv[1] >= 0.0
        && uv[0] <= f64::from(calib.width - 1)
        && uv[1] <= f64::from(calib.height - 1)
}

pub fn project_points(cloud: &PointCloud, calib: &CameraCalibration) -> ProjectedPoints {
    project_points_with(cloud, calib, Exec::default())
}

pub fn project_points_with(
    cloud: &PointCloud,
    calib: &CameraCalibration,
    exec: Exec,
) -> ProjectedPoints {
    let per_point = exec.map_slice(&cloud.positions, |p| match project_point(calib, p) {
        Some((uv, depth)) => (uv, depth, in_image(calib, &uv)),
        None => ([f64::NAN; 2], f64::NAN, false),
    });
    let mut out = ProjectedPoints {
        uv: Vec::with_capacity(per_point.len()),
        depth: Vec::with_capacity(per_point.len()),
        visible: Vec::with_capacity(per_point.len()),
        view_index: 0,
    };
    for (uv, depth, visible) in per_point {
        out.uv.push(uv);
        out.depth.push(depth);
        out.visible.push(visible);
    }
    out
}

/// Which view covers each point, and where it lands in that view.
#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// First view (in view order) where the point is visible; `None` = uncovered.
    pub view: Vec<Option<usize>>,
    /// Pixel coordinates in the assigned view; NaN for uncovered points.
    pub uv: Vec<[f64; 2]>,
}

impl Coverage {
    pub fn covered_count(&self) -> usize {
        self.view.iter().filter(|v| v.is_some()).count()
    }

    /// Indices of points assigned to `view`, with their pixel coordinates.
    pub fn points_in_view(&self, view: usize) -> (Vec<usize>, Vec<[f64; 2]>) {
        self.view
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == Some(view))
            .map(|(i, _)| (i, self.uv[i]))
            .unzip()
    }
}

pub fn project_to_views(cloud: &PointCloud, calibs: &[&CameraCalibration]) -> Coverage {
    project_to_views_with(cloud, calibs, Exec::default())
}

pub fn project_to_views_with(
    cloud: &PointCloud,
    calibs: &[&CameraCalibration],
    exec: Exec,
) -> Coverage {
    let per_point = exec.map_slice(&cloud.positions, |p| {
        calibs.iter().enumerate().find_map(|(vi, calib)| {
            project_point(calib, p)
                .filter(|(uv, _)| in_image(calib, uv))
                .map(|(uv, _)| (vi, uv))
        })
    });
    let (view, uv) = per_point
        .into_iter()
        .map(|hit| match hit {
            Some((vi, uv)) => (Some(vi), uv),
            None => (None, [f64::NAN; 2]),
        })
        .unzip();
    Coverage { view, uv }
}

/// Coverage over the cameras of a sample.
pub fn cover_views(cloud: &PointCloud, views: &[CameraView]) -> Coverage {
    let calibs: Vec<&CameraCalibration> = views.iter().map(|v| &v.calib).collect();
    project_to_views(cloud, &calibs)
}

#[inline]
fn check_bounds(
    index: usize,
    uv: &[f64; 2],
    width: usize,
    height: usize,
) -> Result<(), ProjectionError> {
    let ok =
        uv[0] >= 0.0 && uv[1] >= 0.0 && uv[0] <= (width - 1) as f64 && uv[1] <= (height - 1) as f64;
    if ok {
        Ok(())
    } else {
        Err(ProjectionError::OutOfBounds {
            index,
            u: uv[0],
            v: uv[1],
            width,
            height,
        })
    }
}

/// Lower grid index and fractional offset along one axis, clamped so the
/// upper neighbour stays inside `[0, len-1]`.
#[inline]
fn axis_cell(x: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let lo = (x.floor() as usize).min(len - 2);
    (lo, lo + 1, x - lo as f64)
}

/// Bilinear interpolation of one pixel-space location into `out`.
#[inline]
pub fn bilinear_into(fm: &FeatureMap, uv: &[f64; 2], out: &mut [f64]) {
    let (x0, x1, a) = axis_cell(uv[0], fm.width);
    let (y0, y1, b) = axis_cell(uv[1], fm.height);
    let f00 = fm.pixel(y0, x0);
    let f10 = fm.pixel(y0, x1);
    let f01 = fm.pixel(y1, x0);
    let f11 = fm.pixel(y1, x1);
    let w00 = (1.0 - a) * (1.0 - b);
    let w10 = a * (1.0 - b);
    let w01 = (1.0 - a) * b;
    let w11 = a * b;
    for (ch, o) in out.iter_mut().enumerate() {
        *o = w00 * f64::from(f00[ch])
            + w10 * f64::from(f10[ch])
            + w01 * f64::from(f01[ch])
            + w11 * f64::from(f11[ch]);
    }
}

/// Samples the feature map at continuous pixel coordinates; row `i` of the
/// result is the guided embedding of query `i`.
pub fn sample_features(
    fm: &FeatureMap,
    uv: &[[f64; 2]],
) -> Result<EmbeddingMatrix, ProjectionError> {
    sample_features_with(fm, uv, Exec::default())
}

pub fn sample_features_with(
    fm: &FeatureMap,
    uv: &[[f64; 2]],
    exec: Exec,
) -> Result<EmbeddingMatrix, ProjectionError> {
    for (i, q) in uv.iter().enumerate() {
        check_bounds(i, q, fm.width, fm.height)?;
    }
    let c = fm.channels;
    let rows = exec.map_slice(uv, |q| {
        let mut row = vec![0.0; c];
        bilinear_into(fm, q, &mut row);
        row
    });
    Ok(EmbeddingMatrix {
        rows: uv.len(),
        cols: c,
        data: rows.concat(),
    })
}

/// Nearest-pixel instance id per query.
pub fn point_mask_ids(mm: &MaskMap, uv: &[[f64; 2]]) -> Result<Vec<u16>, ProjectionError> {
    uv.iter()
        .enumerate()
        .map(|(i, q)| {
            check_bounds(i, q, mm.width, mm.height)?;
            let row = (q[1].round() as usize).min(mm.height - 1);
            let col = (q[0].round() as usize).min(mm.width - 1);
            Ok(mm.at(row, col))
        })
        .collect()
}

/// Maps image pixel coordinates onto a grid of another resolution with the
/// same field of view (corner pixels map to corner cells).
#[inline]
pub fn image_to_grid(
    calib: &CameraCalibration,
    width: usize,
    height: usize,
    uv: &[f64; 2],
) -> [f64; 2] {
    let scale = |x: f64, grid: usize, image: u32| {
        if grid as u32 == image {
            x
        } else if image <= 1 {
            0.0
        } else {
            (x * (grid - 1) as f64 / f64::from(image - 1)).min((grid - 1) as f64)
        }
    };
    [
        scale(uv[0], width, calib.width),
        scale(uv[1], height, calib.height),
    ]
}

/// Instance id of every point under its covering view; 0 when the point is
/// uncovered or its view has no mask. Ids are paired with the view index.
pub fn cloud_mask_ids(cloud: &PointCloud, views: &[CameraView]) -> Vec<Option<(usize, u16)>> {
    let coverage = cover_views(cloud, views);
    let mut out = vec![None; cloud.len()];
    for (vi, view) in views.iter().enumerate() {
        let Some(mask) = &view.mask else { continue };
        let (idx, uv) = coverage.points_in_view(vi);
        let uv: Vec<[f64; 2]> = uv
            .iter()
            .map(|q| image_to_grid(&view.calib, mask.width, mask.height, q))
            .collect();
        let ids = point_mask_ids(mask, &uv).expect("covered point outside mask grid");
        for (i, id) in idx.into_iter().zip(ids) {
            if id != 0 {
                out[i] = Some((vi, id));
            }
        }
    }
    out
}

/// Guided embedding per point (zero rows where uncovered) and the coverage mask.
pub fn guided_features(
    cloud: &PointCloud,
    views: &[CameraView],
    channels: usize,
) -> (EmbeddingMatrix, Vec<bool>) {
    let mut guided = EmbeddingMatrix::zeros(cloud.len(), channels);
    let mut covered = vec![false; cloud.len()];
    if views.is_empty() {
        return (guided, covered);
    }
    let coverage = cover_views(cloud, views);
    for (vi, view) in views.iter().enumerate() {
        let (idx, uv) = coverage.points_in_view(vi);
        let fm = &view.features;
        for (i, q) in idx.into_iter().zip(uv) {
            let scaled = image_to_grid(&view.calib, fm.width, fm.height, &q);
            bilinear_into(fm, &scaled, guided.row_mut(i));
            covered[i] = true;
        }
    }
    (guided, covered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::IDENTITY3;

    fn calib(k: [[f64; 3]; 3], t: [f64; 3], w: u32, h: u32) -> CameraCalibration {
        CameraCalibration {
            intrinsic: k,
            rotation: IDENTITY3,
            translation: t,
            width: w,
            height: h,
        }
    }

    #[test]
    fn identity_projection() {
        let cloud = PointCloud::new(vec![[2.0, 4.0, 2.0]]);
        let p = project_points(&cloud, &calib(IDENTITY3, [0.0; 3], 4, 4));
        assert_eq!(p.uv[0], [1.0, 2.0]);
        assert_eq!(p.depth[0], 2.0);
        assert!(p.visible[0]);
        let small = project_points(&cloud, &calib(IDENTITY3, [0.0; 3], 2, 2));
        assert!(!small.visible[0]);
    }

    #[test]
    fn pure_translation() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 1.0]]);
        let p = project_points(&cloud, &calib(IDENTITY3, [0.0, 0.0, 1.0], 1, 1));
        assert_eq!(p.uv[0], [0.0, 0.0]);
        assert_eq!(p.depth[0], 2.0);
        assert!(p.visible[0]);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1e-7]]);
        let p = project_points(&cloud, &calib(IDENTITY3, [0.0; 3], 10, 10));
        assert_eq!(p.visible, vec![false; 3]);
    }

    #[test]
    fn intrinsics_scale_and_shift() {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let cloud = PointCloud::new(vec![[1.0, 0.0, 2.0]]);
        let p = project_points(&cloud, &calib(k, [0.0; 3], 101, 101));
        assert_eq!(p.uv[0], [100.0, 50.0]);
        assert_eq!(p.depth[0], 2.0);
        assert!(p.visible[0]);
    }

    #[test]
    fn first_visible_view_wins() {
        let front = calib(IDENTITY3, [0.0; 3], 10, 10);
        let shifted = calib(IDENTITY3, [5.0, 5.0, 0.0], 10, 10);
        let cloud = PointCloud::new(vec![[1.0, 1.0, 1.0], [-4.0, -4.0, 1.0], [-40.0, 0.0, 1.0]]);
        let cov = project_to_views(&cloud, &[&front]);
        assert_eq!(cov.view, vec![Some(0), None, None]);
        let cov = project_to_views(&cloud, &[&front, &shifted]);
        assert_eq!(cov.view, vec![Some(0), Some(1), None]);
        assert_eq!(cov.uv[1], [1.0, 1.0]);
    }

    fn ramp(h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap {
            height: h,
            width: w,
            channels: c,
            data: (0..h * w * c).map(|i| (i as f32 * 0.37).sin()).collect(),
        }
    }

    #[test]
    fn bilinear_exact_at_nodes() {
        let fm = ramp(5, 4, 3);
        let s = sample_features(&fm, &[[2.0, 3.0], [3.0, 4.0], [0.0, 0.0]]).unwrap();
        let want: Vec<f64> = fm.pixel(3, 2).iter().map(|&v| f64::from(v)).collect();
        assert_eq!(s.row(0), &want[..]);
        let corner: Vec<f64> = fm.pixel(4, 3).iter().map(|&v| f64::from(v)).collect();
        assert_eq!(s.row(1), &corner[..]);
    }

    #[test]
    fn bilinear_midpoint() {
        let fm = FeatureMap {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![0.0, 0.0, 1.0, 1.0],
        };
        let s = sample_features(&fm, &[[0.5, 0.5]]).unwrap();
        assert_eq!(s.row(0), &[0.5]);
    }

    #[test]
    fn bilinear_single_row_or_column_maps() {
        let fm = FeatureMap {
            height: 1,
            width: 3,
            channels: 1,
            data: vec![0.0, 2.0, 4.0],
        };
        let s = sample_features(&fm, &[[1.5, 0.0]]).unwrap();
        assert_eq!(s.row(0), &[3.0]);
    }

    #[test]
    fn bilinear_out_of_bounds() {
        let fm = ramp(3, 3, 1);
        let err = sample_features(&fm, &[[1.0, 1.0], [2.0001, 0.0]]).unwrap_err();
        assert!(matches!(err, ProjectionError::OutOfBounds { index: 1, .. }));
        assert!(sample_features(&fm, &[[-0.1, 0.0]]).is_err());
        assert!(sample_features(&fm, &[[f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn mask_lookup_rounds_to_nearest() {
        let mm = MaskMap {
            height: 3,
            width: 3,
            ids: vec![0, 0, 7, 0, 0, 0, 0, 0, 0],
        };
        assert_eq!(point_mask_ids(&mm, &[[1.6, 0.2]]).unwrap(), vec![7]);
        assert_eq!(point_mask_ids(&mm, &[[1.0, 1.0]]).unwrap(), vec![0]);
        assert!(point_mask_ids(&mm, &[[3.0, 0.0]]).is_err());
    }

    #[test]
    fn sequential_and_parallel_projection_agree() {
        let cloud = PointCloud::new(
            (0..500)
                .map(|i| {
                    let t = i as f64 * 0.1;
                    [
                        t.sin() * 3.0,
                        t.cos() * 2.0,
                        1.0 + (t * 0.3).sin().abs() * 5.0,
                    ]
                })
                .collect(),
        );
        let c = calib(
            [[20.0, 0.0, 10.0], [0.0, 20.0, 10.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            21,
            21,
        );
        let a = project_points_with(&cloud, &c, Exec::Sequential);
        let b = project_points_with(&cloud, &c, Exec::Parallel);
        assert_eq!(a.visible, b.visible);
        for i in 0..cloud.len() {
            if a.visible[i] {
                assert_eq!(a.uv[i], b.uv[i]);
            }
        }
    }
}
