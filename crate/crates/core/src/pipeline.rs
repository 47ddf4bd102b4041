//! Mesh in, structure volume out, and threshold extraction back to a mesh.

use serde::{Deserialize, Serialize};

use crate::dataset::{from_training_range, to_training_range};
use crate::error::{Error, Result};
use crate::geometry::{
    assemble_volume, marching_cubes, normalize_to_unit_cube, plane_coordinates, rasterize_contours,
    slice_mesh, Axis, MeshSurface, Placement, RasterFrame, RasterMode, SliceFrame, VolumeGrid,
};
use crate::image::Image;
use crate::nn::{GeneratorNet, Mode};
use crate::tensor::Tensor;

/// Slices translated per generator call.
pub const INFER_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferParams {
    pub axis: Axis,
    pub resolution: usize,
    pub mode: RasterMode,
    /// Extra border around the bounding square, as a fraction of its side.
    pub margin: f64,
}

impl Default for InferParams {
    fn default() -> Self {
        InferParams {
            axis: Axis::Z,
            resolution: 64,
            mode: RasterMode::Silhouette,
            margin: 0.0,
        }
    }
}

/// Contour images of a mesh together with where they sit in space.
#[derive(Debug, Clone)]
pub struct Silhouettes {
    pub images: Vec<Image>,
    /// Grid placement in unit-cube coordinates, slicing axis last.
    pub frame: SliceFrame,
    pub placement: Placement,
    pub axis: Axis,
    /// Slices whose contours had open chains.
    pub open_slices: Vec<usize>,
}

impl Silhouettes {
    /// Volume frame in model units, still with the slicing axis last.
    pub fn model_frame(&self) -> SliceFrame {
        let p = &self.placement;
        let center = self.axis.to_local(p.center);
        SliceFrame {
            origin: [0, 1, 2].map(|a| (self.frame.origin[a] - 0.5) / p.scale + center[a]),
            spacing: self.frame.spacing.map(|s| s / p.scale),
        }
    }
}

pub fn silhouettes(mesh: &MeshSurface, params: &InferParams) -> Result<Silhouettes> {
    if !(params.margin >= 0.0 && params.margin.is_finite()) {
        return Err(Error::Config(format!("margin must be non-negative, got {}", params.margin)));
    }
    let (unit, placement) = normalize_to_unit_cube(mesh)?;
    let n = params.resolution;
    let contours = slice_mesh(&unit, params.axis, n)?;
    let (lo, hi) = params.axis.apply_local(&unit).bounds().expect("non-empty");
    let raster = RasterFrame::bounding_square([lo[0], lo[1]], [hi[0], hi[1]], params.margin);
    let images = contours
        .iter()
        .map(|c| rasterize_contours(c, &raster, n, params.mode))
        .collect::<Result<Vec<_>>>()?;
    let planes = plane_coordinates(lo[2], hi[2], n);
    let s = raster.pixel_size(n);
    let dz = (hi[2] - lo[2]) / n as f64;
    let frame = SliceFrame {
        origin: [raster.min[0] + 0.5 * s, raster.min[1] + 0.5 * s, planes[0]],
        // flat meshes still get a usable spacing
        spacing: [s, s, if dz > 0.0 { dz } else { s }],
    };
    let open_slices = contours
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.warnings.is_empty())
        .map(|(k, _)| k)
        .collect();
    Ok(Silhouettes {
        images,
        frame,
        placement,
        axis: params.axis,
        open_slices,
    })
}

/// Run the generator over contour images in [0, 1]; outputs in [0, 1].
pub fn translate_slices(
    g: &GeneratorNet,
    images: &[Image],
    mut on_progress: impl FnMut(usize, usize),
) -> Result<Vec<Image>> {
    let r = g.resolution();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * r * r);
        for (k, img) in chunk.iter().enumerate() {
            if img.width != r || img.height != r {
                return Err(Error::dim(format!(
                    "slice {} is {}x{}, generator expects {r}x{r}",
                    out.len() + k,
                    img.width,
                    img.height
                )));
            }
            data.extend(img.data.iter().map(|&v| to_training_range(v)));
        }
        let y = Tensor::from_vec(&[chunk.len(), 1, r, r], data)?;
        let x = g.forward(&y, Mode::Eval)?;
        let x = x.data();
        for k in 0..chunk.len() {
            let px = x[k * r * r..(k + 1) * r * r].iter().map(|&v| from_training_range(v)).collect();
            out.push(Image::from_vec(r, r, px)?);
        }
        on_progress(out.len(), images.len());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// Structure volume in model units, slicing axis as the grid's z.
    pub volume: VolumeGrid,
    pub axis: Axis,
    pub open_slices: Vec<usize>,
}

/// Slice, translate and stack. `on_progress(done, total)` fires after each
/// generator batch.
pub fn infer_volume(
    mesh: &MeshSurface,
    g: &GeneratorNet,
    params: &InferParams,
    on_progress: impl FnMut(usize, usize),
) -> Result<Inference> {
    if g.resolution() != params.resolution {
        return Err(Error::Config(format!(
            "checkpoint was trained at {}x{0}, requested resolution {}",
            g.resolution(),
            params.resolution
        )));
    }
    let sil = silhouettes(mesh, params)?;
    let translated = translate_slices(g, &sil.images, on_progress)?;
    let volume = assemble_volume(&translated, sil.model_frame())?;
    Ok(Inference {
        volume,
        axis: sil.axis,
        open_slices: sil.open_slices,
    })
}

/// Isosurface of the region above `threshold`, closed at the volume
/// border and returned in model axes. Welded, so exporting and parsing it
/// again keeps the topology.
pub fn extract_region(volume: &VolumeGrid, threshold: f64, axis: Axis) -> Result<MeshSurface> {
    let mesh = marching_cubes(&volume.padded(1), threshold)?;
    Ok(axis.apply_model(&mesh).welded())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::measure::unit_cube;
    use crate::nn::{build_generator, GeneratorConfig};
    use rand::SeedableRng;

    fn params(axis: Axis, resolution: usize) -> InferParams {
        InferParams {
            axis,
            resolution,
            ..InferParams::default()
        }
    }

    #[test]
    fn cube_fills_the_frame() {
        let mut cube = unit_cube();
        cube.vertices.iter_mut().for_each(|v| *v = v.map(|c| 3.0 * c - 1.0));
        let s = silhouettes(&cube, &params(Axis::Z, 16)).unwrap();
        assert_eq!(s.images.len(), 16);
        assert!(s.images.iter().all(|i| i.data.iter().all(|&v| v == 1.0)));
        let f = s.model_frame();
        // first sample sits half a pixel inside the model box
        for a in 0..3 {
            assert!((f.origin[a] - (-1.0 + 1.5 / 16.0)).abs() < 1e-12);
            assert!((f.spacing[a] - 3.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_changes_the_stack_direction() {
        // box long in x: slicing along x gives square slices of the yz section
        let mut b = unit_cube();
        b.vertices.iter_mut().for_each(|v| v[0] *= 4.0);
        let s = silhouettes(&b, &params(Axis::X, 16)).unwrap();
        assert!(s.images.iter().all(|i| i.data.iter().all(|&v| v == 1.0)));
        let z = silhouettes(&b, &params(Axis::Z, 16)).unwrap();
        let filled = z.images[8].data.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(filled, 16 * 4);
    }

    #[test]
    fn extraction_returns_to_model_space() {
        let mut b = unit_cube();
        b.vertices.iter_mut().for_each(|v| *v = [v[0] * 2.0 + 5.0, v[1] + 1.0, v[2] * 0.5]);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let s = silhouettes(&b, &params(axis, 16)).unwrap();
            let vol = assemble_volume(&s.images, s.model_frame()).unwrap();
            let m = extract_region(&vol, 0.5, axis).unwrap();
            let (lo, hi) = m.bounds().unwrap();
            let want = ([5.0, 1.0, 0.0], [7.0, 2.0, 0.5]);
            for a in 0..3 {
                assert!((lo[a] - want.0[a]).abs() < 1e-9, "{axis:?} {lo:?}");
                assert!((hi[a] - want.1[a]).abs() < 1e-9, "{axis:?} {hi:?}");
            }
            assert!(crate::geometry::measure::signed_volume(&m) > 0.0);
        }
    }

    #[test]
    fn resolution_must_match_checkpoint() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let g: GeneratorNet = build_generator(GeneratorConfig::new(16), &mut rng).unwrap();
        let err = infer_volume(&unit_cube(), &g, &params(Axis::Z, 32), |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let mut calls = vec![];
        let inf = infer_volume(&unit_cube(), &g, &params(Axis::Z, 16), |d, t| calls.push((d, t))).unwrap();
        assert_eq!(inf.volume.dims, [16, 16, 16]);
        assert_eq!(calls, vec![(16, 16)]);
        assert!(inf.volume.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
