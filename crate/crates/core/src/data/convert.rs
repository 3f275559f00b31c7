//! Import of benchmark exports that follow the common proposed-split layout.
//!
//! The export directory holds matrix files:
//!
//! - `features.z2fd`: f64 `[n, d]` (or `[d, n]` with `transpose_features`)
//! - `labels.z2fd`: u32 class ids, `n` entries
//! - `attributes.z2fd`: f64 `[C, d_a]` per-class attributes
//! - `trainval_loc.z2fd`, `test_seen_loc.z2fd`, `test_unseen_loc.z2fd`:
//!   u32 sample index vectors
//!
//! Sample indices and labels may be one-based, as in the original split files.

use std::collections::HashSet;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

use super::z2fd::{read_f64, Matrix};
use super::{Dataset, Mode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvertOptions {
    pub name: String,
    pub mode: Mode,
    /// Subtracted from every sample index.
    pub index_base: u32,
    /// Subtracted from every label.
    pub label_base: u32,
    pub transpose_features: bool,
}

fn read_indices(path: &Path, base: u32) -> Result<Vec<u32>> {
    let data = match Matrix::read(path)? {
        Matrix::U32 { data, .. } => data,
        Matrix::F64(_) => {
            return Err(Error::Format {
                path: path.into(),
                message: "expected u32 values".into(),
            })
        }
    };
    data.into_iter()
        .map(|v| {
            v.checked_sub(base).ok_or_else(|| Error::Format {
                path: path.into(),
                message: format!("value {v} is below the base {base}"),
            })
        })
        .collect()
}

/// Reads an export, selects the samples of the requested setting and
/// applies the standard preprocessing.
pub fn convert_export(dir: &Path, opts: &ConvertOptions) -> Result<Dataset> {
    let mut features = read_f64(&dir.join("features.z2fd"), 2)?;
    if opts.transpose_features {
        features = features.transpose()?;
    }
    let labels = read_indices(&dir.join("labels.z2fd"), opts.label_base)?;
    let attributes = read_f64(&dir.join("attributes.z2fd"), 2)?;
    let trainval = read_indices(&dir.join("trainval_loc.z2fd"), opts.index_base)?;
    let test_seen = read_indices(&dir.join("test_seen_loc.z2fd"), opts.index_base)?;
    let test_unseen = read_indices(&dir.join("test_unseen_loc.z2fd"), opts.index_base)?;
    if labels.len() != features.rows() {
        return Err(Error::Format {
            path: dir.join("labels.z2fd"),
            message: format!("{} labels for {} feature rows", labels.len(), features.rows()),
        });
    }
    let n = labels.len();
    let classes = attributes.rows();

    let mut rows = Vec::new();
    let mut train = Vec::new();
    let mut push = |set: &[u32], is_train: bool| -> Result<()> {
        for &i in set {
            if i as usize >= n {
                return Err(Error::UnknownSplitReference {
                    what: "sample",
                    index: i as usize,
                });
            }
            rows.push(i as usize);
            train.push(is_train);
        }
        Ok(())
    };
    push(&trainval, true)?;
    if opts.mode == Mode::Gzsl {
        push(&test_seen, false)?;
    }
    push(&test_unseen, false)?;
    if rows.iter().collect::<HashSet<_>>().len() != rows.len() {
        return Err(Error::InvalidSplit("a sample appears in more than one split".into()));
    }

    let mut unseen = vec![false; classes];
    for &i in &test_unseen {
        let y = labels[i as usize] as usize;
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                sample: i as usize,
                label: y,
                classes,
            });
        }
        unseen[y] = true;
    }
    let sel_labels = rows.iter().map(|&i| labels[i]).collect();
    let sel_features: Array = features.select_rows(&rows);
    let mut ds = Dataset::new(opts.name.clone(), sel_features, sel_labels, attributes, train, unseen, opts.mode)?;
    ds.preprocess()?;
    Ok(ds)
}
