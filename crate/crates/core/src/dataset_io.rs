//! Dataset files.
//!
//! Binary `.mdd` layout, all integers and floats little-endian:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `DDMDATA\0`                       |
//! | 8      | 4    | version (`1`)                           |
//! | 12     | 4    | M, Voigt components per block (`6`)     |
//! | 16     | 8    | N, number of points                     |
//! | 24     | 8    | sampling seed                           |
//! | 32     | 8    | lower strain bound (f64)                |
//! | 40     | 8    | upper strain bound (f64)                |
//! | 48     | N·2M·8 | points, row-major: ε then σ per point |
//! | end-4  | 4    | CRC-32 of every preceding byte          |
//!
//! The CSV form has the header
//! `e11,e22,e33,g12,g13,g23,s11,s22,s33,s12,s13,s23` and one point per row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};
use crate::matgen::MaterialDataset;
use crate::phase::{PhaseState, PHASE_DIM, VOIGT};

pub const MDD_MAGIC: &[u8; 8] = b"DDMDATA\0";
pub const MDD_VERSION: u32 = 1;
pub const MDD_HEADER_LEN: usize = 48;
pub const CSV_HEADER: &str = "e11,e22,e33,g12,g13,g23,s11,s22,s33,s12,s13,s23";

pub fn encode_mdd(d: &MaterialDataset) -> Vec<u8> {
    let n = d.len();
    let mut out = Vec::with_capacity(MDD_HEADER_LEN + n * PHASE_DIM * 8 + 4);
    out.extend_from_slice(MDD_MAGIC);
    out.extend_from_slice(&MDD_VERSION.to_le_bytes());
    out.extend_from_slice(&(VOIGT as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&d.seed.to_le_bytes());
    out.extend_from_slice(&d.bounds.0.to_le_bytes());
    out.extend_from_slice(&d.bounds.1.to_le_bytes());
    for p in d.points() {
        for v in p.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

pub fn decode_mdd(bytes: &[u8]) -> Result<MaterialDataset, FormatError> {
    if bytes.len() < MDD_HEADER_LEN {
        return Err(FormatError::Header(format!("file is {} bytes, header needs {MDD_HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != MDD_MAGIC {
        return Err(FormatError::Header("bad magic".into()));
    }
    let version = le_u32(bytes, 8);
    if version != MDD_VERSION {
        return Err(FormatError::Header(format!("unsupported version {version}")));
    }
    let m = le_u32(bytes, 12);
    if m as usize != VOIGT {
        return Err(FormatError::Header(format!("expected M = {VOIGT}, found {m}")));
    }
    let n = le_u64(bytes, 16);
    let seed = le_u64(bytes, 24);
    let bounds = (le_f64(bytes, 32), le_f64(bytes, 40));
    if n == 0 {
        return Err(FormatError::Header("N = 0".into()));
    }
    let expected = n
        .checked_mul((PHASE_DIM * 8) as u64)
        .and_then(|p| p.checked_add((MDD_HEADER_LEN + 4) as u64))
        .ok_or_else(|| FormatError::Header(format!("N = {n} overflows")))?;
    if (bytes.len() as u64) < expected {
        return Err(FormatError::Truncated { expected, found: bytes.len() as u64 });
    }
    if (bytes.len() as u64) > expected {
        return Err(FormatError::Invalid(format!("{} trailing bytes", bytes.len() as u64 - expected)));
    }
    let body_end = bytes.len() - 4;
    let stored = le_u32(bytes, body_end);
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    let points = bytes[MDD_HEADER_LEN..body_end]
        .chunks_exact(PHASE_DIM * 8)
        .map(|row| {
            let mut a = [0.0; PHASE_DIM];
            for (i, v) in a.iter_mut().enumerate() {
                *v = le_f64(row, i * 8);
            }
            PhaseState::from_array(&a)
        })
        .collect();
    MaterialDataset::from_points(points, seed, bounds).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn encode_csv(d: &MaterialDataset) -> String {
    let mut out = String::with_capacity(d.len() * PHASE_DIM * 24);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in d.points() {
        for (i, v) in p.to_array().iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            // `{:?}` prints the shortest representation that parses back exactly.
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses the CSV form. Seed is 0 and bounds are the observed strain range.
pub fn decode_csv(text: &str) -> Result<MaterialDataset, FormatError> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(FormatError::Header("empty file".into())),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != CSV_HEADER.split(',').collect::<Vec<_>>() {
        return Err(FormatError::Header(format!("unexpected header {header:?}")));
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut a = [0.0; PHASE_DIM];
        let mut count = 0;
        for field in line.split(',') {
            if count == PHASE_DIM {
                return Err(FormatError::Record { line: idx + 1, msg: "too many columns".into() });
            }
            a[count] = field
                .trim()
                .parse::<f64>()
                .map_err(|e| FormatError::Record { line: idx + 1, msg: format!("{field:?}: {e}") })?;
            if !a[count].is_finite() {
                return Err(FormatError::Record { line: idx + 1, msg: "non-finite value".into() });
            }
            count += 1;
        }
        if count != PHASE_DIM {
            return Err(FormatError::Record { line: idx + 1, msg: format!("expected {PHASE_DIM} columns, got {count}") });
        }
        points.push(PhaseState::from_array(&a));
    }
    if points.is_empty() {
        return Err(FormatError::Invalid("no data rows".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &points {
        for &v in p.strain.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    MaterialDataset::from_points(points, 0, (lo, hi)).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes `.csv` paths as CSV and everything else as binary.
pub fn save_dataset(d: &MaterialDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        fs::write(path, encode_csv(d))?;
    } else {
        fs::write(path, encode_mdd(d))?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MaterialDataset> {
    let path = path.as_ref();
    if is_csv(path) {
        Ok(decode_csv(&fs::read_to_string(path)?)?)
    } else {
        Ok(decode_mdd(&fs::read(path)?)?)
    }
}
