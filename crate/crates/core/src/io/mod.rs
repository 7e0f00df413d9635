//! On-disk formats, image codecs and dataset handling. All binary formats
//! are little-endian.

mod bytes;
pub mod checkpoint;
pub mod dataset;
pub mod kv;
pub mod netpbm;
pub mod ptsr;
pub mod synth;

pub(crate) use bytes::{read_file, write_file, Reader};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use netpbm::{load_pgm, load_ppm, save_pgm, save_ppm};
pub use ptsr::{load_tensor, save_tensor};
