//! Byte splices with a declarable, checkable diff.
//!
//! File modifications are expressed as a list of non-overlapping [`Edit`]s
//! against the pre-image. [`verify_edits`] confirms that an output differs
//! from its input only inside the declared spans, which is what lets tests
//! prove a modification touched nothing it did not announce.

use alloc::vec::Vec;

/// One contiguous splice: `pre_len` bytes at pre-image offset `at` are
/// replaced by `post_len` bytes in the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Edit {
    pub at: usize,
    pub pre_len: usize,
    pub post_len: usize,
}

/// Error from assembling or checking a splice list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpliceError {
    /// An edit extends past the end of the input.
    OutOfBounds { at: usize, pre_len: usize },
    /// Two edits touch the same pre-image bytes or share an anchor offset.
    Overlap { at: usize },
}

impl core::fmt::Display for SpliceError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SpliceError::OutOfBounds { at, pre_len } => {
                write!(f, "edit at {at} (+{pre_len}) extends past end of input")
            }
            SpliceError::Overlap { at } => write!(f, "overlapping edits at offset {at}"),
        }
    }
}

/// Builds an output buffer from an input plus an ordered set of splices.
pub struct Splicer<'a> {
    input: &'a [u8],
    splices: Vec<(usize, usize, Vec<u8>)>,
}

impl<'a> Splicer<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Splicer { input, splices: Vec::new() }
    }

    /// Replace `pre_len` bytes at `at` with `bytes`.
    pub fn replace(&mut self, at: usize, pre_len: usize, bytes: Vec<u8>) {
        self.splices.push((at, pre_len, bytes));
    }

    /// Insert `bytes` before pre-image offset `at`.
    pub fn insert(&mut self, at: usize, bytes: Vec<u8>) {
        self.replace(at, 0, bytes);
    }

    /// Remove `pre_len` bytes at `at`.
    pub fn delete(&mut self, at: usize, pre_len: usize) {
        self.replace(at, pre_len, Vec::new());
    }

    pub fn is_empty(&self) -> bool {
        self.splices.is_empty()
    }

    /// Assemble the output and the edit list describing it.
    pub fn apply(mut self) -> Result<(Vec<u8>, Vec<Edit>), SpliceError> {
        self.splices.sort_by_key(|&(at, _, _)| at);
        let mut out = Vec::with_capacity(self.input.len());
        let mut edits = Vec::with_capacity(self.splices.len());
        let mut cursor = 0usize;
        for (at, pre_len, bytes) in &self.splices {
            let end = at.checked_add(*pre_len).ok_or(SpliceError::OutOfBounds {
                at: *at,
                pre_len: *pre_len,
            })?;
            if end > self.input.len() {
                return Err(SpliceError::OutOfBounds { at: *at, pre_len: *pre_len });
            }
            if *at < cursor {
                return Err(SpliceError::Overlap { at: *at });
            }
            if let Some(prev) = edits.last() {
                let prev: &Edit = prev;
                if *at == prev.at {
                    return Err(SpliceError::Overlap { at: *at });
                }
            }
            out.extend_from_slice(&self.input[cursor..*at]);
            out.extend_from_slice(bytes);
            edits.push(Edit { at: *at, pre_len: *pre_len, post_len: bytes.len() });
            cursor = end;
        }
        out.extend_from_slice(&self.input[cursor..]);
        Ok((out, edits))
    }
}

/// Check that `output` differs from `input` only inside the declared edits.
///
/// Edits must be sorted by `at` and non-overlapping; every byte outside the
/// edit spans must match between input and output, and the length arithmetic
/// must agree. This is an independent check: it never reuses [`Splicer`].
pub fn verify_edits(input: &[u8], output: &[u8], edits: &[Edit]) -> bool {
    let mut in_pos = 0usize;
    let mut out_pos = 0usize;
    for e in edits {
        if e.at < in_pos {
            return false;
        }
        let Some(pre_end) = e.at.checked_add(e.pre_len) else { return false };
        if pre_end > input.len() {
            return false;
        }
        let gap = e.at - in_pos;
        let Some(out_gap_end) = out_pos.checked_add(gap) else { return false };
        if out_gap_end > output.len() || input[in_pos..e.at] != output[out_pos..out_gap_end] {
            return false;
        }
        out_pos = out_gap_end;
        let Some(out_end) = out_pos.checked_add(e.post_len) else { return false };
        if out_end > output.len() {
            return false;
        }
        in_pos = pre_end;
        out_pos = out_end;
    }
    let tail = input.len() - in_pos;
    output.len() == out_pos + tail && input[in_pos..] == output[out_pos..]
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn replace_insert_delete_compose() {
        let input = b"0123456789";
        let mut s = Splicer::new(input);
        s.replace(2, 3, vec![b'X', b'Y']);
        s.insert(7, vec![b'!']);
        s.delete(9, 1);
        let (out, edits) = s.apply().unwrap();
        assert_eq!(out, b"01XY56!78");
        assert!(verify_edits(input, &out, &edits));
    }

    #[test]
    fn unsorted_splices_are_ordered_before_application() {
        let input = b"abcdef";
        let mut s = Splicer::new(input);
        s.replace(4, 1, vec![b'Z']);
        s.replace(0, 1, vec![b'A']);
        let (out, edits) = s.apply().unwrap();
        assert_eq!(out, b"AbcdZf");
        assert_eq!(edits[0].at, 0);
        assert!(verify_edits(input, &out, &edits));
    }

    #[test]
    fn overlap_and_bounds_are_rejected() {
        let input = b"abcdef";
        let mut s = Splicer::new(input);
        s.replace(0, 3, vec![]);
        s.replace(2, 2, vec![]);
        assert_eq!(s.apply().unwrap_err(), SpliceError::Overlap { at: 2 });

        let mut s = Splicer::new(input);
        s.replace(5, 2, vec![]);
        assert!(matches!(s.apply().unwrap_err(), SpliceError::OutOfBounds { .. }));
    }

    #[test]
    fn verify_rejects_undeclared_changes() {
        let input = b"0123456789";
        let mut s = Splicer::new(input);
        s.replace(3, 2, vec![b'x', b'y', b'z']);
        let (mut out, edits) = s.apply().unwrap();
        assert!(verify_edits(input, &out, &edits));
        out[0] ^= 1;
        assert!(!verify_edits(input, &out, &edits));
    }

    #[test]
    fn verify_checks_length_arithmetic() {
        let input = b"abc";
        let edits = [Edit { at: 1, pre_len: 1, post_len: 2 }];
        assert!(verify_edits(input, b"aXYc", &edits));
        assert!(!verify_edits(input, b"aXc", &edits));
        assert!(!verify_edits(input, b"aXYZc", &edits));
    }

    #[test]
    fn empty_edit_list_means_identical() {
        assert!(verify_edits(b"same", b"same", &[]));
        assert!(!verify_edits(b"same", b"diff", &[]));
    }
}
