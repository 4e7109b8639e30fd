//! `SINO` v1: magic `SINO`, u16 version, u32 rows (angles), u32 columns
//! (bins), then rows×columns little-endian f32 values, row-major. Images
//! use the same layout with rows = columns = image size.

use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::grid::{Image, ProjectionGeometry, Sinogram};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SINO";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// Raw 2D array as stored in a `SINO` file.
#[derive(Clone, Debug, PartialEq)]
pub struct SinoGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl SinoGrid {
    pub fn into_sinogram(self, image_size: usize) -> Result<Sinogram> {
        let g = ProjectionGeometry::new(self.rows, self.cols, image_size)?;
        Sinogram::from_vec(g, self.data)
    }

    pub fn into_image(self) -> Result<Image> {
        Image::from_vec(self.cols, self.rows, self.data)
    }
}

pub fn encode_sino(rows: usize, cols: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != rows * cols {
        return Err(Error::shape(format!("{rows}x{cols} values"), data.len()));
    }
    let (r, c) = (u32::try_from(rows), u32::try_from(cols));
    let (Ok(r), Ok(c)) = (r, c) else {
        return Err(Error::invalid("array too large for the SINO format"));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_sino(bytes: &[u8]) -> Result<SinoGrid> {
    let bad = |reason: String| Error::format("SINO", reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| bad(format!("dimensions {rows}x{cols} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(bad(format!("{rows}x{cols} needs {expected} payload bytes, found {}", payload.len())));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(SinoGrid { rows, cols, data })
}

pub fn read_sino_grid(path: &Path) -> Result<SinoGrid> {
    decode_sino(&read_bytes(path)?).map_err(|e| match e {
        Error::Format { kind, reason } => Error::Format { kind, reason: format!("{}: {reason}", path.display()) },
        other => other,
    })
}

pub fn read_sinogram(path: &Path, image_size: usize) -> Result<Sinogram> {
    read_sino_grid(path)?.into_sinogram(image_size)
}

pub fn write_sinogram(path: &Path, s: &Sinogram) -> Result<()> {
    let g = s.geometry();
    write_bytes(path, &encode_sino(g.n_angles(), g.n_bins(), s.data())?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    read_sino_grid(path)?.into_image()
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_sino(img.size(), img.size(), img.data())?)
}

/// Binary (P5) 8-bit PGM, min–max scaled; a constant array maps to 0.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape(format!("{width}x{height} pixels"), data.len()));
    }
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    write_bytes(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_corruption() {
        let good = encode_sino(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!(decode_sino(&good).is_ok());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_sino(&bad_magic), Err(Error::Format { .. })));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode_sino(&bad_version).is_err());
        assert!(decode_sino(&good[..good.len() - 1]).is_err());
        assert!(decode_sino(&good[..10]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_sino(&trailing).is_err());
        assert!(encode_sino(2, 2, &[0.0; 3]).is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = encode_sino(1, 2, &[1.5, -2.0]).unwrap();
        assert_eq!(&bytes[..4], b"SINO");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[1, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[2, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        write_pgm(&path, 3, 2, &[0.0, 0.5, 1.0, 1.0, 0.0, 0.25]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 0, 64]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff))
                .collect();
            let grid = decode_sino(&encode_sino(rows, cols, &data).unwrap()).unwrap();
            prop_assert_eq!(grid.rows, rows);
            prop_assert_eq!(grid.cols, cols);
            prop_assert!(grid.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
