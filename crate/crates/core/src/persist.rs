//! Atomic result files and binary state checkpoints.
//!
//! Checkpoint layout, all little endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `BOEMSTAT` |
//! | 4 | `u32` layout version (1) |
//! | 4 | `u32` grid points `n` |
//! | 4 | `u32` electronic dimension `d` |
//! | 4 | `u32` photon modes `M` (0 for a molecular state) |
//! | 8 | `f64` domain length |
//! | 16 per entry | `f64` real part, `f64` imaginary part |
//!
//! Entries follow the state order: sector (vacuum, then one per mode), grid point, component.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::state::State;
use crate::C64;

pub const MAGIC: &[u8; 8] = b"BOEMSTAT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

/// Write `bytes` to a temporary file next to `path` and rename it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn encode_state(psi: &State) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * psi.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(psi.grid().n() as u32).to_le_bytes());
    out.extend_from_slice(&(psi.dim() as u32).to_le_bytes());
    out.extend_from_slice(&((psi.sectors() - 1) as u32).to_le_bytes());
    out.extend_from_slice(&psi.grid().length().to_le_bytes());
    for v in psi.data() {
        out.extend_from_slice(&v.re.to_le_bytes());
        out.extend_from_slice(&v.im.to_le_bytes());
    }
    out
}

pub fn decode_state(bytes: &[u8]) -> Result<State> {
    let bad = |m: &str| Error::Validation(format!("checkpoint: {m}"));
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(bad("missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(8) != VERSION as usize {
        return Err(bad("unsupported layout version"));
    }
    let (n, d, modes, length) = (u32_at(12), u32_at(16), u32_at(20), f64_at(24));
    let len = n * d * (modes + 1);
    if bytes.len() != HEADER_LEN + 16 * len {
        return Err(bad("payload length does not match the header"));
    }
    let grid = Grid::new(n, length)?;
    let data = (0..len).map(|k| C64::new(f64_at(HEADER_LEN + 16 * k), f64_at(HEADER_LEN + 16 * k + 8))).collect();
    Ok(State::from_data(&grid, d, modes + 1, data))
}

pub fn write_state(path: &Path, psi: &State) -> Result<()> {
    write_atomic(path, &encode_state(psi))
}

pub fn read_state(path: &Path) -> Result<State> {
    decode_state(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_modes() {
        let g = Grid::new(8, 3.0).unwrap();
        let data: Vec<C64> = (0..8 * 2 * 4).map(|k| C64::new(k as f64, -0.5 * k as f64)).collect();
        let psi = State::from_data(&g, 2, 4, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("psi.bin");
        write_state(&path, &psi).unwrap();
        let back = read_state(&path).unwrap();
        assert_eq!(back.data(), psi.data());
        assert_eq!((back.dim(), back.sectors(), back.grid().length()), (2, 4, 3.0));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 3);
        assert!(decode_state(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
