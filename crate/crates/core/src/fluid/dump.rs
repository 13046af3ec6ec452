//! Binary cell-field dumps: `FLD1`, `ny`, `nx` (u32 LE), a dtype tag, then
//! row-major little-endian f64 values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

const MAGIC: &[u8; 4] = b"FLD1";
const DTYPE_F64: u32 = 8;

pub fn write_field(w: &mut impl Write, field: &ScalarField) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(field.grid.ny as u32).to_le_bytes())?;
    w.write_all(&(field.grid.nx as u32).to_le_bytes())?;
    w.write_all(&DTYPE_F64.to_le_bytes())?;
    for v in &field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dump; `dx` is not stored and must be supplied.
pub fn read_field(r: &mut impl Read, dx: f64) -> Result<ScalarField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("field dump", "bad magic"));
    }
    let mut word = [0u8; 4];
    let mut next = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let ny = next(r)? as usize;
    let nx = next(r)? as usize;
    let dtype = next(r)?;
    if dtype != DTYPE_F64 {
        return Err(Error::format("field dump", format!("unsupported dtype tag {dtype}")));
    }
    let grid = Grid::new(nx, ny, dx)?;
    let mut values = Vec::with_capacity(grid.n_cells());
    let mut buf = [0u8; 8];
    for _ in 0..grid.n_cells() {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok(ScalarField { grid, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let g = Grid::new(4, 3, 0.5).unwrap();
        let f = ScalarField::from_fn(g, |x, y| x * 10.0 - y);
        let mut bytes = Vec::new();
        write_field(&mut bytes, &f).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * 12);
        assert_eq!(&bytes[..4], b"FLD1");
        assert_eq!(read_field(&mut bytes.as_slice(), 0.5).unwrap(), f);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"FLDX\0\0\0\0".to_vec();
        assert!(read_field(&mut bytes.as_slice(), 1.0).is_err());
    }
}
