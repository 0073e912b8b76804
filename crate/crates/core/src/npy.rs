//! NPY v1.0/v2.0 tensor container: the on-disk contract for every matrix.
//!
//! Reading accepts little-endian float32/float64, C-order, 2-D arrays;
//! float32 is widened to float64 on load. Writing always produces v1.0
//! float64 little-endian C-order files, so `load(save(m)) == m` bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Load a 2-D float matrix from an NPY file, widening f32 to f64.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let header = read_header(path, &mut reader)?;
    let (rows, cols) = header.shape;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::npy(path, "shape overflow"))?;

    let elem = if header.f64 { 8 } else { 4 };
    let mut payload = vec![0u8; count * elem];
    reader
        .read_exact(&mut payload)
        .map_err(|_| Error::npy(path, "truncated data section"))?;
    let mut probe = [0u8; 1];
    if reader.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::npy(path, "trailing bytes after data section"));
    }

    let data: Vec<f64> = if header.f64 {
        payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect()
    };

    let m = Matrix::new(rows, cols, data)
        .map_err(|e| Error::npy(path, format!("bad shape: {e}")))?;
    m.validate_finite()?;
    Ok(m)
}

/// Write a matrix as NPY v1.0, float64 little-endian, C-order.
pub fn save_matrix(m: &Matrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);

    let dict = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({}, {}), }}",
        m.rows(),
        m.cols()
    );
    // magic(6) + version(2) + hlen(2) + dict + padding + '\n', total % 64 == 0
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let hlen = (dict.len() + pad + 1) as u16;

    w.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    w.write_all(&[1, 0]).map_err(|e| Error::io(path, e))?;
    w.write_all(&hlen.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.write_all(dict.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.write_all(&vec![b' '; pad]).map_err(|e| Error::io(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Header {
    shape: (usize, usize),
    f64: bool,
}

fn read_header(path: &Path, reader: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 6];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::npy(path, "file too short for magic"))?;
    if &magic != MAGIC {
        return Err(Error::npy(path, "bad magic"));
    }

    let mut version = [0u8; 2];
    reader
        .read_exact(&mut version)
        .map_err(|_| Error::npy(path, "missing version"))?;
    let hlen = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            reader
                .read_exact(&mut b)
                .map_err(|_| Error::npy(path, "missing header length"))?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            reader
                .read_exact(&mut b)
                .map_err(|_| Error::npy(path, "missing header length"))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::npy(path, format!("unsupported version {v}.{}", version[1]))),
    };

    let mut dict = vec![0u8; hlen];
    reader
        .read_exact(&mut dict)
        .map_err(|_| Error::npy(path, "truncated header"))?;
    let dict = String::from_utf8(dict).map_err(|_| Error::npy(path, "header not utf-8"))?;

    let descr = dict_value(&dict, "descr").ok_or_else(|| Error::npy(path, "missing descr"))?;
    let f64 = match descr.trim_matches(['\'', '"']) {
        "<f8" => true,
        "<f4" => false,
        other => return Err(Error::npy(path, format!("unsupported dtype {other:?}"))),
    };

    let order = dict_value(&dict, "fortran_order")
        .ok_or_else(|| Error::npy(path, "missing fortran_order"))?;
    if order != "False" {
        return Err(Error::npy(path, "only C-order supported"));
    }

    let shape = dict_value(&dict, "shape").ok_or_else(|| Error::npy(path, "missing shape"))?;
    let dims: Vec<usize> = shape
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::npy(path, format!("unparseable shape {shape:?}")))?;
    if dims.len() != 2 {
        return Err(Error::npy(path, format!("expected 2-D array, got {}-D", dims.len())));
    }

    Ok(Header {
        shape: (dims[0], dims[1]),
        f64,
    })
}

/// Pull the raw token following `'key':` out of the header dict. The NPY
/// header is a restricted python literal, so a scan is sufficient.
fn dict_value<'a>(dict: &'a str, key: &str) -> Option<&'a str> {
    let pat = format!("'{key}':");
    let start = dict.find(&pat)? + pat.len();
    let rest = dict[start..].trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find([',', '}'])?
    };
    Some(rest[..end].trim())
}
