//! Contour sets to binary images.

use serde::{Deserialize, Serialize};

use super::slice::ContourSet;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterMode {
    /// Even-odd fill of closed contours.
    #[default]
    Silhouette,
    /// Pixels the contour passes through.
    Outline,
}

/// Square region of the slicing plane mapped onto the image. Row `r`
/// covers increasing local y, column `c` increasing local x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterFrame {
    pub min: [f64; 2],
    pub size: f64,
}

impl RasterFrame {
    /// Smallest square containing the box, centered on it, grown by
    /// `margin` of its side on every edge.
    pub fn bounding_square(lo: [f64; 2], hi: [f64; 2], margin: f64) -> Self {
        let side = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let size = side * (1.0 + 2.0 * margin);
        let cx = 0.5 * (lo[0] + hi[0]);
        let cy = 0.5 * (lo[1] + hi[1]);
        RasterFrame {
            min: [cx - 0.5 * size, cy - 0.5 * size],
            size,
        }
    }

    pub fn pixel_size(&self, resolution: usize) -> f64 {
        self.size / resolution as f64
    }

    pub fn pixel_center(&self, col: usize, row: usize, resolution: usize) -> [f64; 2] {
        let s = self.pixel_size(resolution);
        [self.min[0] + (col as f64 + 0.5) * s, self.min[1] + (row as f64 + 0.5) * s]
    }
}

pub fn rasterize_contours(
    contours: &ContourSet,
    frame: &RasterFrame,
    resolution: usize,
    mode: RasterMode,
) -> Result<Image> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::contract(format!(
            "raster resolution must be at least {MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let mut img = Image::filled(resolution, resolution, 0.0f32);
    match mode {
        RasterMode::Silhouette => fill_even_odd(contours, frame, resolution, &mut img),
        RasterMode::Outline => trace_outline(contours, frame, resolution, &mut img),
    }
    Ok(img)
}

fn fill_even_odd(contours: &ContourSet, frame: &RasterFrame, res: usize, img: &mut Image) {
    let edges: Vec<([f64; 2], [f64; 2])> = contours
        .polylines
        .iter()
        .filter(|p| p.closed)
        .flat_map(|p| {
            let n = p.points.len();
            (0..n).map(move |i| (p.points[i], p.points[(i + 1) % n]))
        })
        .collect();
    let s = frame.pixel_size(res);
    let mut xs = Vec::new();
    for row in 0..res {
        let y = frame.min[1] + (row as f64 + 0.5) * s;
        xs.clear();
        for &(a, b) in &edges {
            // half-open in y so shared endpoints count once
            if (a[1] > y) != (b[1] > y) {
                xs.push(a[0] + (y - a[1]) / (b[1] - a[1]) * (b[0] - a[0]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // columns whose centers lie in [span0, span1)
            let first = ((span[0] - frame.min[0]) / s - 0.5).ceil().max(0.0) as usize;
            let last = ((span[1] - frame.min[0]) / s - 0.5).ceil().max(0.0) as usize;
            for col in first..last.min(res) {
                img.set(col, row, 1.0);
            }
        }
    }
}

fn trace_outline(contours: &ContourSet, frame: &RasterFrame, res: usize, img: &mut Image) {
    let s = frame.pixel_size(res);
    let mut mark = |p: [f64; 2]| {
        let c = ((p[0] - frame.min[0]) / s).floor();
        let r = ((p[1] - frame.min[1]) / s).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < res && (r as usize) < res {
            img.set(c as usize, r as usize, 1.0);
        }
    };
    for p in &contours.polylines {
        let n = p.points.len();
        let segs = if p.closed { n } else { n.saturating_sub(1) };
        if n == 1 {
            mark(p.points[0]);
        }
        for i in 0..segs {
            let (a, b) = (p.points[i], p.points[(i + 1) % n]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            // quarter-pixel steps visit every cell the segment crosses
            // except corner grazes
            let steps = (4.0 * len / s).ceil().max(1.0) as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                mark([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
            }
        }
    }
}
