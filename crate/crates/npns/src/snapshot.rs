//! Field snapshot files: a one-line ASCII header followed by row-major
//! (x fastest) little-endian f64 values, one file per scalar field.
//!
//! Header: `NPNSFLD v1 dim=<d> nx=<..> ny=<..> [nz=<..>] hx=<..> hy=<..> [hz=<..>]`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

pub fn write_field(path: &Path, f: &ScalarField) -> Result<()> {
    let g = &f.grid;
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = format!("NPNSFLD v1 dim={}", g.dim());
    let names = ["nx", "ny", "nz"];
    for a in 0..g.dim() {
        header.push_str(&format!(" {}={}", names[a], g.extent(a)));
    }
    let hnames = ["hx", "hy", "hz"];
    for a in 0..g.dim() {
        header.push_str(&format!(" {}={:.17e}", hnames[a], g.spacing(a)));
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    for v in &f.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > 4096 {
            return Err(Error::Parse("snapshot header too long".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| Error::Parse("non-utf8 header".into()))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some("NPNSFLD") || tokens.next() != Some("v1") {
        return Err(Error::Parse(format!("bad snapshot magic in {header:?}")));
    }
    let mut dim = 0usize;
    let mut extents = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    for tok in tokens {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header token {tok:?}")))?;
        match key {
            "dim" => dim = val.parse().map_err(|_| Error::Parse("bad dim".into()))?,
            "nx" => extents[0] = val.parse().map_err(|_| Error::Parse("bad nx".into()))?,
            "ny" => extents[1] = val.parse().map_err(|_| Error::Parse("bad ny".into()))?,
            "nz" => extents[2] = val.parse().map_err(|_| Error::Parse("bad nz".into()))?,
            "hx" => spacing[0] = val.parse().map_err(|_| Error::Parse("bad hx".into()))?,
            "hy" => spacing[1] = val.parse().map_err(|_| Error::Parse("bad hy".into()))?,
            "hz" => spacing[2] = val.parse().map_err(|_| Error::Parse("bad hz".into()))?,
            _ => return Err(Error::Parse(format!("unknown header key {key:?}"))),
        }
    }
    if dim != 2 && dim != 3 {
        return Err(Error::Parse(format!("bad dim {dim}")));
    }
    let grid = Grid::new(
        dim,
        &extents[..dim],
        &spacing[..dim],
        &vec![0.0; dim],
        0,
    )?;
    read_values(&mut reader, &grid)
}

fn read_values(reader: &mut impl Read, grid: &Arc<Grid>) -> Result<ScalarField> {
    let n = grid.cell_count();
    let mut values = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        reader.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok(ScalarField {
        grid: grid.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn round_trip_preserves_bits() {
        let g = Grid::unit_box(2, 8, 0);
        let f = ScalarField::from_fn(&g, |x| (x[0] * 13.7).sin() + x[1]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fld");
        write_field(&path, &f).unwrap();
        let back = read_field(&path).unwrap();
        assert_eq!(back.values, f.values);
        assert_eq!(back.grid.extent(0), 8);
        assert_eq!(back.grid.dim(), 2);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fld");
        std::fs::write(&path, b"NOTAFIELD v1 dim=2\n").unwrap();
        assert!(read_field(&path).is_err());
    }
}
