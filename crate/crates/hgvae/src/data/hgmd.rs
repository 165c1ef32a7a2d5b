//! HGMD dataset container.
//!
//! Layout (all integers little-endian):
//!   magic "HGMD" | version u32 | J u32 | N u32 | count u32 |
//!   has_labels u8 | [count x u32 labels] |
//!   count sequences of J*3*N f64 positions, sequence-major, each in
//!   joint-major (j, dim, t) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::MotionDataset;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: [u8; 4] = *b"HGMD";
const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, ds: &MotionDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.joint_count as u32).to_le_bytes())?;
    w.write_all(&(ds.timepoints as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    match &ds.labels {
        Some(labels) => {
            w.write_all(&[1u8])?;
            for &l in labels {
                w.write_all(&(l as u32).to_le_bytes())?;
            }
        }
        None => w.write_all(&[0u8])?,
    }
    for seq in &ds.sequences {
        for &v in seq.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(path: &Path) -> Result<MotionDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion {
            expected: VERSION,
            found: version,
        });
    }
    let j = read_u32(&mut r, "joint count")? as usize;
    let n = read_u32(&mut r, "timepoints")? as usize;
    let count = read_u32(&mut r, "sequence count")? as usize;
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag, "label flag")?;
    let labels = match flag[0] {
        0 => None,
        1 => {
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                labels.push(read_u32(&mut r, &format!("label {i}"))? as usize);
            }
            Some(labels)
        }
        other => {
            return Err(Error::Parse(format!(
                "HGMD: label flag must be 0 or 1, got {other}"
            )))
        }
    };
    let per = j * 3 * n;
    let mut sequences = Vec::with_capacity(count);
    let mut buf = vec![0u8; per * 8];
    for i in 0..count {
        read_exact(&mut r, &mut buf, &format!("sequence {i}"))?;
        let data: Vec<Real> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect();
        sequences.push(Tensor::new(vec![j, 3, n], data)?);
    }
    // trailing garbage means the header lied about the payload
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Parse(
            "HGMD: trailing bytes after declared payload".into(),
        ));
    }
    MotionDataset::new(sequences, labels, path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_motions, SkeletonSpec};

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.hgmd");
        let ds = synthesize_motions(&SkeletonSpec::default_18(), 5, 3, 10, 42).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.sequences.iter().zip(&ds.sequences) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_a_truncation_error_not_a_partial_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.hgmd");
        let ds = synthesize_motions(&SkeletonSpec::default_18(), 4, 2, 8, 1).unwrap();
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 13];
        std::fs::write(&path, cut).unwrap();
        match read_dataset(&path) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.hgmd");
        let ds = synthesize_motions(&SkeletonSpec::default_18(), 2, 1, 4, 2).unwrap();
        write_dataset(&path, &ds).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        std::fs::write(&path, &wrong_magic).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::BadMagic { .. })));

        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::BadVersion { .. })));
    }

    #[test]
    fn default_skeleton_flattens_to_54_nodes() {
        let ds = synthesize_motions(&SkeletonSpec::default_18(), 1, 1, 50, 3).unwrap();
        assert_eq!(ds.node_count(), 54);
        let flat = crate::data::flatten_nodes(&ds.sequences[0]).unwrap();
        assert_eq!(flat.shape(), &[54, 50]);
    }
}
