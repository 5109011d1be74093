//! Motion-recovery metrics: bounding-box IoU between recovered and true
//! silhouettes, and trajectory errors of the box centres normalized by the
//! image diagonal. A world-space centroid error is reported alongside.

use std::io::Write;

use nalgebra::{SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::Vec3;
use crate::render::Mask;

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [usize; 2],
    pub max: [usize; 2],
}

impl BBox {
    pub fn new(min: [usize; 2], max: [usize; 2]) -> Result<Self> {
        if max[0] < min[0] || max[1] < min[1] {
            return Err(invalid("bounding box max must not precede min"));
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> usize {
        self.max[0] - self.min[0] + 1
    }

    pub fn height(&self) -> usize {
        self.max[1] - self.min[1] + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(
            (self.min[0] + self.max[0]) as f64 / 2.0,
            (self.min[1] + self.max[1]) as f64 / 2.0,
        )
    }
}

/// Tight box around the foreground pixels.
pub fn silhouette_bbox(mask: &Mask) -> Result<BBox> {
    let mut min = [usize::MAX; 2];
    let mut max = [0usize; 2];
    let mut any = false;
    for y in 0..mask.height {
        let row = &mask.data[y * mask.width..(y + 1) * mask.width];
        let Some(first) = row.iter().position(|&b| b) else {
            continue;
        };
        let last = row.iter().rposition(|&b| b).expect("row has a foreground pixel");
        any = true;
        min = [min[0].min(first), min[1].min(y)];
        max = [max[0].max(last), max[1].max(y)];
    }
    if !any {
        return Err(Error::EmptySilhouette);
    }
    Ok(BBox { min, max })
}

/// Intersection over union of the pixel areas of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let lo = [a.min[0].max(b.min[0]), a.min[1].max(b.min[1])];
    let hi = [a.max[0].min(b.max[0]), a.max[1].min(b.max[1])];
    let inter = if hi[0] >= lo[0] && hi[1] >= lo[1] {
        (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Per-frame normalized distances, their mean (ATE) and root mean square (RMSE).
pub fn trajectory_errors<const D: usize>(
    recovered: &[SVector<f64, D>],
    truth: &[SVector<f64, D>],
    normalizer: f64,
) -> Result<(f64, f64)> {
    let e = per_frame_errors(recovered, truth, normalizer)?;
    Ok(summarize(&e))
}

fn per_frame_errors<const D: usize>(
    recovered: &[SVector<f64, D>],
    truth: &[SVector<f64, D>],
    normalizer: f64,
) -> Result<Vec<f64>> {
    if recovered.len() != truth.len() {
        return Err(invalid(format!(
            "trajectory lengths differ: {} vs {}",
            recovered.len(),
            truth.len()
        )));
    }
    if recovered.is_empty() {
        return Err(invalid("trajectories are empty"));
    }
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(invalid("normalizer must be positive"));
    }
    Ok(recovered.iter().zip(truth).map(|(a, b)| (a - b).norm() / normalizer).collect())
}

fn summarize(e: &[f64]) -> (f64, f64) {
    let n = e.len() as f64;
    let ate = e.iter().sum::<f64>() / n;
    let rmse = (e.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    (ate, rmse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub iou: f64,
    /// Box-centre distance over the image diagonal.
    pub error: f64,
    /// World centroid distance over the object diameter, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_iou: f64,
    pub ate: f64,
    pub rmse: f64,
    /// Mean world centroid distance over the object diameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_ate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_rmse: Option<f64>,
    pub per_frame: Vec<FrameMetrics>,
}

/// World-space centroids of both trajectories and the normalizing diameter.
#[derive(Debug, Clone, Copy)]
pub struct CentroidTracks<'a> {
    pub recovered: &'a [Vec3],
    pub truth: &'a [Vec3],
    pub diameter: f64,
}

/// Metrics of recovered silhouettes against the true ones.
pub fn evaluate(recovered: &[Mask], truth: &[Mask], centroids: Option<CentroidTracks<'_>>) -> Result<MetricsReport> {
    if recovered.len() != truth.len() || recovered.is_empty() {
        return Err(invalid(format!(
            "mask sequences must be nonempty and equally long: {} vs {}",
            recovered.len(),
            truth.len()
        )));
    }
    let diag = {
        let m = &truth[0];
        ((m.width * m.width + m.height * m.height) as f64).sqrt()
    };
    let mut ious = Vec::with_capacity(truth.len());
    let mut rec_centers = Vec::with_capacity(truth.len());
    let mut true_centers = Vec::with_capacity(truth.len());
    for (frame, (r, t)) in recovered.iter().zip(truth).enumerate() {
        let wrap = |e: Error| Error::Frame {
            frame,
            source: Box::new(e),
        };
        let rb = silhouette_bbox(r).map_err(wrap)?;
        let tb = silhouette_bbox(t).map_err(wrap)?;
        ious.push(iou(&rb, &tb));
        rec_centers.push(rb.center());
        true_centers.push(tb.center());
    }
    let errors = per_frame_errors(&rec_centers, &true_centers, diag)?;
    let (ate, rmse) = summarize(&errors);
    let centroid_errors = centroids
        .map(|c| per_frame_errors(c.recovered, c.truth, c.diameter))
        .transpose()?;
    if let Some(ce) = &centroid_errors {
        if ce.len() != errors.len() {
            return Err(invalid("centroid tracks and masks disagree on frame count"));
        }
    }
    let summary = centroid_errors.as_deref().map(summarize);
    let per_frame = (0..errors.len())
        .map(|frame| FrameMetrics {
            frame,
            iou: ious[frame],
            error: errors[frame],
            centroid_error: centroid_errors.as_ref().map(|c| c[frame]),
        })
        .collect();
    Ok(MetricsReport {
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        ate,
        rmse,
        centroid_ate: summary.map(|s| s.0),
        centroid_rmse: summary.map(|s| s.1),
        per_frame,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per frame: `frame,iou,error,centroid_error`.
    pub fn write_plot_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frame", "iou", "error", "centroid_error"])?;
        for f in &self.per_frame {
            w.write_record([
                f.frame.to_string(),
                format!("{:e}", f.iou),
                format!("{:e}", f.error),
                f.centroid_error.map(|v| format!("{v:e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(w: usize, h: usize, pixels: &[(usize, usize)]) -> Mask {
        let mut m = Mask::new(w, h);
        for &(x, y) in pixels {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn bbox_examples() {
        let single = silhouette_bbox(&mask_from(16, 16, &[(5, 7)])).unwrap();
        assert_eq!(single, BBox::new([5, 7], [5, 7]).unwrap());
        let mut full = Mask::new(20, 16);
        full.data.iter_mut().for_each(|b| *b = true);
        assert_eq!(silhouette_bbox(&full).unwrap(), BBox::new([0, 0], [19, 15]).unwrap());
        assert!(matches!(silhouette_bbox(&Mask::new(8, 8)), Err(Error::EmptySilhouette)));
        assert!(BBox::new([3, 0], [2, 0]).is_err());
    }

    #[test]
    fn bbox_matches_pixel_scan_on_l_shape() {
        let mut pixels: Vec<(usize, usize)> = (3..12).map(|y| (4, y)).collect();
        pixels.extend((4..15).map(|x| (x, 11)));
        let m = mask_from(20, 20, &pixels);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..m.height {
            for x in 0..m.width {
                if m.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        assert_eq!(silhouette_bbox(&m).unwrap(), BBox::new([x0, y0], [x1, y1]).unwrap());
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new([0, 0], [9, 9]).unwrap();
        let b = BBox::new([5, 0], [14, 9]).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new([20, 20], [25, 25]).unwrap()), 0.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn trajectory_error_examples() {
        let zero = [Vector2::new(0.0, 0.0); 3];
        assert_eq!(trajectory_errors(&zero, &zero, 1.0).unwrap(), (0.0, 0.0));
        let truth = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 1.0), Vector2::new(2.0, 2.0)];
        let shifted: Vec<_> = truth.iter().map(|p| p + Vector2::new(3.0, 4.0)).collect();
        let (ate, rmse) = trajectory_errors(&shifted, &truth, 10.0).unwrap();
        assert!((ate - 0.5).abs() < 1e-15 && (rmse - 0.5).abs() < 1e-15);
        let rec = [Vector2::new(0.0, 0.0), Vector2::new(3.0, 0.0), Vector2::new(0.0, 4.0)];
        let (ate, rmse) = trajectory_errors(&rec, &zero, 1.0).unwrap();
        assert!((ate - 7.0 / 3.0).abs() < 1e-15);
        assert!((rmse - (25.0_f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(trajectory_errors(&rec[..2], &zero, 1.0).is_err());
        assert!(trajectory_errors(&rec, &zero, 0.0).is_err());
    }

    #[test]
    fn ground_truth_against_itself() {
        let masks: Vec<Mask> = (0..4).map(|i| mask_from(32, 32, &[(i + 2, 3), (i + 9, 12)])).collect();
        let c: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect();
        let report = evaluate(
            &masks,
            &masks,
            Some(CentroidTracks {
                recovered: &c,
                truth: &c,
                diameter: 1.0,
            }),
        )
        .unwrap();
        assert_eq!((report.mean_iou, report.ate, report.rmse), (1.0, 0.0, 0.0));
        assert_eq!(report.centroid_ate, Some(0.0));
        let json = report.to_json().unwrap();
        assert!(json.contains("\"mean_iou\"") && json.contains("\"per_frame\""));
        let mut csv = Vec::new();
        report.write_plot_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0usize..40, 0usize..40, 0usize..20, 0usize..20).prop_map(|(x, y, w, h)| BBox::new([x, y], [x + w, y + h]).unwrap())
    }

    proptest! {
        #[test]
        fn rmse_dominates_ate(errs in prop::collection::vec(0.0..100.0f64, 1..40)) {
            let rec: Vec<Vector2<f64>> = errs.iter().map(|&e| Vector2::new(e, 0.0)).collect();
            let truth = vec![Vector2::zeros(); errs.len()];
            let (ate, rmse) = trajectory_errors(&rec, &truth, 1.0).unwrap();
            prop_assert!(rmse >= ate * (1.0 - 1e-12));
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
