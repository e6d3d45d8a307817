//! IVMX: the toolkit's binary matrix format.
//!
//! Layout: magic "IVMX", version byte (1), dtype byte (1 = float32),
//! rows and cols as unsigned 32-bit little-endian, then rows*cols float32
//! little-endian values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IVMX";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;

/// Write one IVMX block. Values are narrowed to f32.
pub fn write_ivmx<W: Write>(writer: &mut W, matrix: ArrayView2<f64>) -> Result<()> {
    let rows = u32::try_from(matrix.nrows())
        .map_err(|_| Error::InvalidData("matrix has too many rows for IVMX".into()))?;
    let cols = u32::try_from(matrix.ncols())
        .map_err(|_| Error::InvalidData("matrix has too many columns for IVMX".into()))?;
    writer.write_all(MAGIC)?;
    writer.write_all(&[VERSION, DTYPE_F32])?;
    writer.write_all(&rows.to_le_bytes())?;
    writer.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(matrix.len() * 4);
    for v in matrix.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    writer.write_all(&buf)?;
    Ok(())
}

/// Read one IVMX block, widening to f64.
pub fn read_ivmx<R: Read>(reader: &mut R) -> Result<Array2<f64>> {
    let mut header = [0u8; 14];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated IVMX header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad IVMX magic".into()));
    }
    if header[4] != VERSION {
        return Err(Error::Format(format!("unsupported IVMX version {}", header[4])));
    }
    if header[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported IVMX dtype {}", header[5])));
    }
    let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; rows * cols * 4];
    reader.read_exact(&mut payload).map_err(|_| {
        Error::Format(format!(
            "truncated IVMX payload: expected {} bytes for {rows}x{cols}",
            rows * cols * 4
        ))
    })?;
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("bad IVMX shape: {e}")))
}

/// Write a matrix as a standalone IVMX file.
pub fn write_ivmx_file(path: &Path, matrix: ArrayView2<f64>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ivmx(&mut file, matrix)?;
    file.flush()?;
    Ok(())
}

/// Read a standalone IVMX file; trailing bytes are a format error.
pub fn read_ivmx_file(path: &Path) -> Result<Array2<f64>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let matrix = read_ivmx(&mut file)?;
    let mut rest = [0u8; 1];
    if file.read(&mut rest)? != 0 {
        return Err(Error::Format(format!(
            "trailing bytes after IVMX payload in {}",
            path.display()
        )));
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_exact_for_f32_values() {
        let m = array![[1.5, -2.25], [0.0, 1024.0], [1e-3, -0.5]];
        let mut buf = Vec::new();
        write_ivmx(&mut buf, m.view()).unwrap();
        assert_eq!(buf.len(), 14 + 6 * 4);
        let back = read_ivmx(&mut buf.as_slice()).unwrap();
        // 1e-3 is not f32-exact; everything else is.
        assert_eq!(back[[0, 0]], 1.5);
        assert_eq!(back[[1, 1]], 1024.0);
        assert!((back[[2, 0]] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_ivmx(&mut buf, array![[1.0]].view()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_ivmx(&mut bad.as_slice()), Err(Error::Format(_))));

        let truncated = &buf[..buf.len() - 2];
        assert!(matches!(
            read_ivmx(&mut &truncated[..]),
            Err(Error::Format(_))
        ));

        let mut wrong_version = buf.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            read_ivmx(&mut wrong_version.as_slice()),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_precision(
            rows in 1usize..8,
            cols in 1usize..8,
            seed in 0u64..1000
        ) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| {
                // Start from f32 so the round-trip is lossless.
                (rng.random::<f32>() * 100.0 - 50.0) as f64
            });
            let mut buf = Vec::new();
            write_ivmx(&mut buf, m.view()).unwrap();
            let back = read_ivmx(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
