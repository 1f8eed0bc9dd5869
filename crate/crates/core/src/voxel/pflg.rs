//! Labeled-grid files.
//!
//! ```text
//! PFLG1
//! <R>
//! <K>
//! <name 1>
//! ...
//! <name K>
//! (label, count) byte pairs in binvox voxel order
//! ```

use super::binvox::encode_runs;
use super::grid::{LabeledGrid, PartSchema};
use crate::error::{Error, Result};
use std::path::Path;

const FORMAT: &str = "PFLG1";
const MAGIC: &[u8] = b"PFLG1\n";

pub fn write_pflg(grid: &LabeledGrid) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(format!("{}\n{}\n", grid.resolution(), grid.schema().len()).bytes());
    for name in grid.schema().names() {
        out.extend(name.bytes());
        out.push(b'\n');
    }
    encode_runs(grid.labels(), &mut out);
    out
}

pub fn read_pflg(bytes: &[u8]) -> Result<LabeledGrid> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::format(FORMAT, 0, "bad magic"));
    }
    let mut pos = MAGIC.len();
    let line = |pos: &mut usize| -> Result<(usize, &str)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(FORMAT, start, "unterminated header line"))?;
        *pos = start + rel + 1;
        let s = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| Error::format(FORMAT, start, "header is not UTF-8"))?;
        Ok((start, s))
    };
    let (off, r) = line(&mut pos)?;
    let r: usize = r
        .parse()
        .ok()
        .filter(|&r| r > 0)
        .ok_or_else(|| Error::format(FORMAT, off, "bad resolution"))?;
    let (off, k) = line(&mut pos)?;
    let k: usize = k
        .parse()
        .map_err(|_| Error::format(FORMAT, off, "bad part count"))?;
    let mut names = Vec::with_capacity(k);
    for _ in 0..k {
        let (_, n) = line(&mut pos)?;
        names.push(n.to_string());
    }
    let schema = PartSchema::new(names).map_err(|e| Error::format(FORMAT, pos, e.to_string()))?;

    let total = r * r * r;
    let mut labels = Vec::with_capacity(total);
    while labels.len() < total {
        if pos + 1 >= bytes.len() {
            return Err(Error::format(
                FORMAT,
                pos,
                format!("run-length underrun: {} of {total} voxels decoded", labels.len()),
            ));
        }
        let (label, count) = (bytes[pos], bytes[pos + 1] as usize);
        if label as usize > k {
            return Err(Error::format(FORMAT, pos, format!("label {label} exceeds {k}")));
        }
        if count == 0 || labels.len() + count > total {
            return Err(Error::format(FORMAT, pos, "run-length overrun"));
        }
        labels.extend(std::iter::repeat_n(label, count));
        pos += 2;
    }
    if pos != bytes.len() {
        return Err(Error::format(FORMAT, pos, "trailing bytes after label data"));
    }
    LabeledGrid::from_labels(r, labels, schema)
}

pub fn save_pflg(grid: &LabeledGrid, path: &Path) -> Result<()> {
    std::fs::write(path, write_pflg(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_pflg(path: &Path) -> Result<LabeledGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pflg(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(r in 1usize..7, labels in proptest::collection::vec(0u8..5, 216)) {
            let n = r * r * r;
            let g = LabeledGrid::from_labels(r, labels[..n].to_vec(), PartSchema::chairs()).unwrap();
            let bytes = write_pflg(&g);
            prop_assert_eq!(read_pflg(&bytes).unwrap(), g);
        }
    }

    #[test]
    fn header_layout() {
        let g = LabeledGrid::empty(2, PartSchema::tables());
        let b = write_pflg(&g);
        assert_eq!(&b[..], b"PFLG1\n2\n3\ntop\nleg\nshelf\n\x00\x08");
    }

    #[test]
    fn rejects_out_of_range_label() {
        let mut b = b"PFLG1\n1\n2\na\nb\n".to_vec();
        b.extend([3, 1]);
        assert!(read_pflg(&b).is_err());
    }
}
