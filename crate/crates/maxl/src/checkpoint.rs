//! Checkpoints: named f64 arrays in a small little-endian binary format
//! (magic, version, then name / dims / values per entry).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{Node, ParamSet, Shape};
use crate::Error;

const MAGIC: &[u8; 8] = b"MAXLCKPT";
const VERSION: u32 = 1;

pub fn save(path: &Path, params: &ParamSet) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, node) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let dims = &node.shape().0;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in node.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, Error> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, Error> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Load a checkpoint as fresh leaf parameters.
pub fn load(path: &Path) -> Result<ParamSet, Error> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: invalid entry name", path.display())))?;
        let ndims = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            dims.push(read_u64(&mut r)? as usize);
        }
        let shape = Shape(dims);
        let mut values = vec![0.0f64; shape.numel()];
        for v in &mut values {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        params.insert(&name, Node::param(shape, values));
    }
    Ok(params)
}

/// Load a checkpoint into the shape of `template`: every common entry must
/// match shapes exactly; entries found on only one side are allowed only
/// under one of `optional_prefixes` (used for the interface-dependent SLU
/// head, which keeps its template initialization).
pub fn load_into(
    path: &Path,
    template: &ParamSet,
    optional_prefixes: &[&str],
) -> Result<ParamSet, Error> {
    let loaded = load(path)?;
    let optional = |name: &str| optional_prefixes.iter().any(|p| name.starts_with(p));
    let mut out = ParamSet::new();
    for (name, node) in template {
        match loaded.get(name) {
            Some(l) => {
                if l.shape() != node.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape mismatch for {}: checkpoint {} vs expected {}",
                        path.display(),
                        name,
                        l.shape(),
                        node.shape()
                    )));
                }
                out.insert(name, Node::param(l.shape().clone(), l.values().to_vec()));
            }
            None if optional(name) => {
                out.insert(name, Node::param(node.shape().clone(), node.values().to_vec()));
            }
            None => {
                return Err(Error::Checkpoint(format!(
                    "{}: missing entry {}",
                    path.display(),
                    name
                )));
            }
        }
    }
    for (name, _) in &loaded {
        if template.get(name).is_none() && !optional(name) {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected entry {}",
                path.display(),
                name
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    fn scratch_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("maxl-ckpt-{}-{}", tag, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.w", Node::param(Shape::matrix(2, 3), vec![1.0, -2.5, 0.0, 3.25, 1e-12, 7.0]));
        p.insert("a.b", Node::param(Shape::vector(3), vec![0.5, -0.5, 9.0]));
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = scratch_dir("roundtrip");
        let path = dir.join("ck.bin");
        let p = sample();
        save(&path, &p).unwrap();
        let q = load(&path).unwrap();
        assert_eq!(p.names(), q.names());
        for (name, node) in &p {
            assert_eq!(q.at(name).shape(), node.shape());
            assert_eq!(q.at(name).values(), node.values());
        }
    }

    #[test]
    fn rejects_wrong_magic_and_shape_mismatch() {
        let dir = scratch_dir("reject");
        let bad = dir.join("bad.bin");
        std::fs::write(&bad, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(matches!(load(&bad), Err(Error::Checkpoint(_))));

        let path = dir.join("ck.bin");
        save(&path, &sample()).unwrap();
        let mut template = ParamSet::new();
        template.insert("a.w", Node::param(Shape::matrix(3, 2), vec![0.0; 6]));
        template.insert("a.b", Node::param(Shape::vector(3), vec![0.0; 3]));
        let err = load_into(&path, &template, &[]).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn optional_prefix_keeps_template_entries() {
        let dir = scratch_dir("optional");
        let path = dir.join("ck.bin");
        save(&path, &sample()).unwrap();
        let mut template = sample();
        template.insert("slu.w", Node::param(Shape::matrix(2, 2), vec![9.0; 4]));
        // Missing from checkpoint without the prefix: error.
        assert!(load_into(&path, &template, &[]).is_err());
        // With the prefix: template initialization kept.
        let out = load_into(&path, &template, &["slu."]).unwrap();
        assert_eq!(out.at("slu.w").values(), &[9.0; 4]);
        assert_eq!(out.at("a.b").values(), sample().at("a.b").values());
    }
}
