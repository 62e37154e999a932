//! Selection masks: strictly increasing lists of example ids that always
//! index the ORIGINAL dataset, so stage outputs compose without remapping.
//!
//! Mask files are plain text: one decimal index per line, ascending,
//! newline-terminated, no blank lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{format_err, io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    ids: Vec<usize>,
}

impl SelectionMask {
    /// Builds a mask, rejecting ids that are not strictly increasing.
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        for w in ids.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Invalid(format!(
                    "mask ids must be strictly increasing, got {} after {}",
                    w[1], w[0]
                )));
            }
        }
        Ok(Self { ids })
    }

    /// Mask selecting every id in `0..rows`.
    pub fn all(rows: usize) -> Self {
        Self {
            ids: (0..rows).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Maps `local` (indices into this mask's selection) back to original
    /// ids: `compose(a, b)[i] = a[b[i]]`.
    pub fn compose(&self, local: &SelectionMask) -> Result<SelectionMask> {
        let mut ids = Vec::with_capacity(local.len());
        for &l in local.ids() {
            let &id = self.ids.get(l).ok_or_else(|| {
                Error::Invalid(format!(
                    "local id {l} out of range for mask of {}",
                    self.len()
                ))
            })?;
            ids.push(id);
        }
        // ascending in, ascending out
        SelectionMask::new(ids)
    }

    pub fn is_subset_of(&self, other: &SelectionMask) -> bool {
        let mut it = other.ids.iter();
        'outer: for id in &self.ids {
            for o in it.by_ref() {
                if o == id {
                    continue 'outer;
                }
                if o > id {
                    return false;
                }
            }
            return false;
        }
        true
    }
}

pub fn write_mask(path: &Path, mask: &SelectionMask) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for id in mask.ids() {
        writeln!(w, "{id}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_mask(path: &Path) -> Result<SelectionMask> {
    let text = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if text.is_empty() {
        return SelectionMask::new(vec![]);
    }
    if *text.last().unwrap() != b'\n' {
        return Err(format_err(
            path,
            text.len() as u64,
            "missing trailing newline",
        ));
    }
    let mut ids = Vec::new();
    let mut offset = 0u64;
    for line in text[..text.len() - 1].split(|&b| b == b'\n') {
        if line.is_empty() {
            return Err(format_err(path, offset, "blank line"));
        }
        let s =
            std::str::from_utf8(line).map_err(|_| format_err(path, offset, "non-UTF-8 line"))?;
        let id: usize = s
            .parse()
            .map_err(|_| format_err(path, offset, format!("not a decimal index: {s:?}")))?;
        if let Some(&last) = ids.last() {
            if id <= last {
                return Err(format_err(
                    path,
                    offset,
                    format!("ids must be strictly increasing, got {id} after {last}"),
                ));
            }
        }
        ids.push(id);
        offset += line.len() as u64 + 1;
    }
    SelectionMask::new(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn rejects_non_increasing() {
        assert!(SelectionMask::new(vec![0, 2, 2]).is_err());
        assert!(SelectionMask::new(vec![3, 1]).is_err());
        assert!(SelectionMask::new(vec![]).is_ok());
    }

    #[test]
    fn compose_indexes_through() {
        let a = SelectionMask::new(vec![2, 5, 7, 11]).unwrap();
        let b = SelectionMask::new(vec![0, 2, 3]).unwrap();
        let c = a.compose(&b).unwrap();
        assert_eq!(c.ids(), &[2, 7, 11]);
        assert!(c.is_subset_of(&a));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("mask.txt");
        let mask = SelectionMask::new(vec![0, 3, 4, 99]).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    #[test]
    fn file_rejects_blank_lines_and_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "1\n\n2\n").unwrap();
        assert!(matches!(load_mask(&path), Err(Error::Format { .. })));
        std::fs::write(&path, "2\n1\n").unwrap();
        assert!(matches!(load_mask(&path), Err(Error::Format { .. })));
        std::fs::write(&path, "1\n2").unwrap();
        assert!(matches!(load_mask(&path), Err(Error::Format { .. })));
    }
}
