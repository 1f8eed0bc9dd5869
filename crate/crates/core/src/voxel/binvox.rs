//! binvox occupancy streams.
//!
//! ```text
//! #binvox 1
//! dim D D D
//! [translate tx ty tz]
//! [scale s]
//! data
//! (value, count) byte pairs, y fastest, then z, then x
//! ```

use super::grid::OccupancyGrid;
use crate::error::{Error, Result};

const FORMAT: &str = "binvox";

pub fn read_binvox(bytes: &[u8]) -> Result<OccupancyGrid> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(FORMAT, start, "unterminated header line"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| Error::format(FORMAT, start, "header is not ASCII"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic.trim() != "#binvox 1" {
        return Err(Error::format(FORMAT, off, format!("bad magic {magic:?}")));
    }

    let mut dim: Option<usize> = None;
    loop {
        let (off, line) = next_line(&mut pos)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("dim") => {
                let dims: Vec<usize> = words
                    .map(|w| w.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(FORMAT, off, "unparsable dim"))?;
                if dims.len() != 3 {
                    return Err(Error::format(FORMAT, off, "dim needs three values"));
                }
                if dims[0] != dims[1] || dims[1] != dims[2] {
                    return Err(Error::format(FORMAT, off, format!("non-cubic dim {dims:?}")));
                }
                if dims[0] == 0 {
                    return Err(Error::format(FORMAT, off, "zero dim"));
                }
                dim = Some(dims[0]);
            }
            Some("translate") | Some("scale") => {
                if words.any(|w| w.parse::<f64>().is_err()) {
                    return Err(Error::format(FORMAT, off, "unparsable header value"));
                }
            }
            Some("data") => break,
            Some(other) => {
                return Err(Error::format(FORMAT, off, format!("unknown header key {other:?}")));
            }
            None => return Err(Error::format(FORMAT, off, "empty header line")),
        }
    }
    let d = dim.ok_or_else(|| Error::format(FORMAT, pos, "missing dim before data"))?;

    let total = d * d * d;
    let mut data = Vec::with_capacity(total);
    while data.len() < total {
        if pos + 1 >= bytes.len() {
            return Err(Error::format(
                FORMAT,
                pos,
                format!("run-length underrun: {} of {total} voxels decoded", data.len()),
            ));
        }
        let (value, count) = (bytes[pos], bytes[pos + 1] as usize);
        if value > 1 {
            return Err(Error::format(FORMAT, pos, format!("voxel value {value}")));
        }
        if count == 0 {
            return Err(Error::format(FORMAT, pos + 1, "zero-length run"));
        }
        if data.len() + count > total {
            return Err(Error::format(
                FORMAT,
                pos,
                format!("run-length overrun: run of {count} exceeds {total} voxels"),
            ));
        }
        data.extend(std::iter::repeat_n(value, count));
        pos += 2;
    }
    if pos != bytes.len() {
        return Err(Error::format(FORMAT, pos, "trailing bytes after voxel data"));
    }
    OccupancyGrid::from_data(d, data)
}

pub fn write_binvox(grid: &OccupancyGrid) -> Vec<u8> {
    let d = grid.resolution();
    let mut out = format!("#binvox 1\ndim {d} {d} {d}\ndata\n").into_bytes();
    encode_runs(grid.data(), &mut out);
    out
}

/// Maximal `(value, count)` runs with `count <= 255`.
pub(crate) fn encode_runs(values: &[u8], out: &mut Vec<u8>) {
    let mut iter = values.iter().copied().peekable();
    while let Some(v) = iter.next() {
        let mut count = 1u8;
        while count < u8::MAX && iter.peek() == Some(&v) {
            iter.next();
            count += 1;
        }
        out.push(v);
        out.push(count);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(dim: usize, pairs: &[(u8, u8)]) -> Vec<u8> {
        let mut b = format!("#binvox 1\ndim {dim} {dim} {dim}\ndata\n").into_bytes();
        for &(v, c) in pairs {
            b.push(v);
            b.push(c);
        }
        b
    }

    #[test]
    fn uniform_streams() {
        let full = read_binvox(&stream(2, &[(1, 8)])).unwrap();
        assert_eq!(full, OccupancyGrid::full(2));
        let empty = read_binvox(&stream(2, &[(0, 8)])).unwrap();
        assert_eq!(empty, OccupancyGrid::empty(2));
    }

    #[test]
    fn canonical_encoding() {
        let w = write_binvox(&OccupancyGrid::empty(2));
        assert_eq!(&w[w.len() - 2..], &[0, 8]);
        let w = write_binvox(&OccupancyGrid::full(4));
        assert_eq!(&w[w.len() - 2..], &[1, 64]);
        // 8³ = 512 = 255 + 255 + 2
        let w = write_binvox(&OccupancyGrid::full(8));
        assert_eq!(&w[w.len() - 6..], &[1, 255, 1, 255, 1, 2]);
    }

    #[test]
    fn optional_header_lines_accepted() {
        let mut b = b"#binvox 1\ndim 2 2 2\ntranslate 0.1 -0.2 0\nscale 1.5\ndata\n".to_vec();
        b.extend([1, 3, 0, 5]);
        let g = read_binvox(&b).unwrap();
        assert_eq!(g.occupied_count(), 3);
    }

    #[test]
    fn errors_carry_offsets() {
        match read_binvox(b"#binvox 2\n") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match read_binvox(b"#binvox 1\ndim 2 3 2\ndata\n") {
            Err(Error::Format { offset: 10, msg, .. }) => assert!(msg.contains("non-cubic")),
            other => panic!("{other:?}"),
        }
        let header = "#binvox 1\ndim 2 2 2\ndata\n".len();
        match read_binvox(&stream(2, &[(1, 4)])) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, header + 2);
                assert!(msg.contains("underrun"));
            }
            other => panic!("{other:?}"),
        }
        match read_binvox(&stream(2, &[(1, 4), (0, 5)])) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, header + 2);
                assert!(msg.contains("overrun"));
            }
            other => panic!("{other:?}"),
        }
        assert!(read_binvox(&stream(2, &[(1, 8), (0, 1)])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_random_grids(r in 1usize..9, seed in any::<u64>(), density in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = OccupancyGrid::from_fn(r, |_, _, _| rng.gen_bool(density));
            let bytes = write_binvox(&g);
            let back = read_binvox(&bytes).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(write_binvox(&back), bytes);
        }
    }
}
