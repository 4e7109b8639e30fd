//! On-disk formats: `SINO` arrays, `SDIF` checkpoints, PGM previews, mask
//! records, the dataset manifest and the loss log.

mod checkpoint;
mod manifest;
mod sino;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use manifest::{read_mask, write_mask, DatasetManifest, SampleRecord, Split, MANIFEST_FILE};
pub use sino::{
    decode_sino, encode_sino, read_image, read_sino_grid, read_sinogram, write_image, write_pgm, write_sinogram,
    SinoGrid,
};

use std::path::Path;

use crate::diffusion::LossRecord;
use crate::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `step,loss` CSV.
pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,loss\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    out
}
