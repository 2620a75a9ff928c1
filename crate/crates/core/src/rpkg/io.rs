//! Binary container:
//!
//! ```text
//! "RPKG" | version: u16 LE | header_len: u32 LE | header JSON
//!        | D as f64 LE | K as f64 LE | CRC32 (u32 LE) of everything before it
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rpkg::{Relation, RelationalPriorKnowledgeGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RPKG_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RPKG";

#[derive(Serialize, Deserialize)]
struct Header {
    classes: Vec<String>,
    relations: Vec<Relation>,
    d_shape: Vec<usize>,
    k_shape: Vec<usize>,
}

pub fn write_rpkg<T: Scalar>(g: &RelationalPriorKnowledgeGraph<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        classes: g.classes().to_vec(),
        relations: g.relations().to_vec(),
        d_shape: g.embeddings().shape().to_vec(),
        k_shape: g.priors().shape().to_vec(),
    })?;
    let mut out =
        Vec::with_capacity(14 + header.len() + 8 * (g.embeddings().len() + g.priors().len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&RPKG_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in g.embeddings().data().iter().chain(g.priors().data()) {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn read_rpkg<T: Scalar>(bytes: &[u8]) -> Result<RelationalPriorKnowledgeGraph<T>> {
    let split = bytes.len().saturating_sub(4);
    let (body, tail) = bytes.split_at(split);
    let stored = if tail.len() == 4 {
        u32::from_le_bytes(tail.try_into().unwrap())
    } else {
        0
    };
    let computed = crc32fast::hash(body);
    if stored != computed || body.len() < 10 {
        return Err(Error::Checksum { stored, computed });
    }
    if &body[..4] != MAGIC {
        return Err(Error::Format("missing RPKG magic".into()));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != RPKG_VERSION {
        return Err(Error::Version {
            found: version,
            expected: RPKG_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[6..10].try_into().unwrap()) as usize;
    let rest = &body[10..];
    if rest.len() < hlen {
        return Err(Error::Format("header length exceeds file".into()));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen])?;
    let c = header.classes.len();
    if header.d_shape.len() != 2 || header.d_shape[0] != c {
        return Err(Error::Format(format!(
            "embedding shape {:?} does not match {c} classes",
            header.d_shape
        )));
    }
    if header.k_shape.len() != 3 || header.k_shape[0] != c || header.k_shape[1] != c {
        return Err(Error::Format(format!(
            "prior shape {:?} does not match {c} classes",
            header.k_shape
        )));
    }
    let nd: usize = header.d_shape.iter().product();
    let nk: usize = header.k_shape.iter().product();
    let blob = &rest[hlen..];
    if blob.len() != 8 * (nd + nk) {
        return Err(Error::Format(format!(
            "blob holds {} bytes, header implies {}",
            blob.len(),
            8 * (nd + nk)
        )));
    }
    let vals: Vec<T> = blob
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let (d, k) = vals.split_at(nd);
    RelationalPriorKnowledgeGraph::new(
        header.classes,
        header.relations,
        Tensor::new(header.d_shape, d.to_vec())?,
        Tensor::new(header.k_shape, k.to_vec())?,
    )
}

pub fn save_rpkg<T: Scalar>(g: &RelationalPriorKnowledgeGraph<T>, path: &Path) -> Result<()> {
    let bytes = write_rpkg(g)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_rpkg<T: Scalar>(path: &Path) -> Result<RelationalPriorKnowledgeGraph<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_rpkg(&bytes)
}
