//! Mesh ingestion, slicing, rasterization, volume assembly and isosurface
//! extraction.

mod mcubes;
pub mod measure;
mod mesh;
mod raster;
mod slice;
mod volume;

pub use mcubes::{marching_cubes, ISO_NUDGE};
pub use mesh::{export_mesh, parse_mesh, ExportFormat, MeshFormat, MeshSurface, WELD_TOLERANCE};
pub use raster::{rasterize_contours, RasterFrame, RasterMode, MIN_RESOLUTION};
pub use slice::{
    normalize_to_unit_cube, plane_coordinates, slice_at, slice_mesh, Axis, ContourSet, Placement,
    Polyline,
};
pub use volume::{assemble_volume, SliceFrame, VolumeGrid};
