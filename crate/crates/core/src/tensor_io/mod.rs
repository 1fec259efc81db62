//! Portable tensor files, the scene manifest, PPM export and checkpoint archives.
//!
//! All data crossing module or process boundaries goes through these formats.

mod archive;
mod manifest;
mod ppm;
mod tensor;

pub use archive::{Archive, ARCHIVE_MAGIC};
pub use manifest::{
    load_manifest, save_manifest, BinSpec, CameraRole, CameraSpec, ContractionSpec, OccupancySpec,
    OctreeSpec, SceneManifest, VirtualViewSpec,
};
pub use ppm::{encode_ppm, export_ppm, import_ppm, quantize};
pub use tensor::{read_tensor, write_tensor, DType, Tensor, TensorData, MAGIC};
