//! Datasets: container format, preprocessing, and the synthetic toy task.

mod convert;
mod toy;
pub mod z2fd;

pub use convert::{convert_export, ConvertOptions};
pub use toy::{make_toy_dataset, oracle_accuracy, ToySpec};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::fsl::ClassPool;
use crate::kv;
use z2fd::Matrix;

/// Split kinds in `splits.z2fd`.
const SPLIT_TRAIN: u32 = 0;
const SPLIT_TEST: u32 = 1;
const SPLIT_UNSEEN_CLASS: u32 = 2;

/// Tolerance on attribute row norms of a preprocessed dataset.
const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Zsl,
    Gzsl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Zsl => "zsl",
            Mode::Gzsl => "gzsl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(Mode::Zsl),
            "gzsl" => Ok(Mode::Gzsl),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected zsl or gzsl)"))),
        }
    }
}

/// Features, labels, class attributes and the train/test and seen/unseen
/// splits of one benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Array,
    pub labels: Vec<u32>,
    pub attributes: Array,
    /// Per sample: whether it belongs to the training split.
    pub train: Vec<bool>,
    /// Per class: whether it is unseen.
    pub unseen: Vec<bool>,
    pub mode: Mode,
    /// Additional manifest entries, kept in order.
    pub metadata: Vec<(String, String)>,
}

impl Dataset {
    /// Validates the structural invariants and builds the dataset.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        features: Array,
        labels: Vec<u32>,
        attributes: Array,
        train: Vec<bool>,
        unseen: Vec<bool>,
        mode: Mode,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            features,
            labels,
            attributes,
            train,
            unseen,
            mode,
            metadata: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.unseen.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.cols()
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| !self.unseen[c]).collect()
    }

    pub fn unseen_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| self.unseen[c]).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| self.train[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.num_samples()).filter(|&i| !self.train[i]).collect()
    }

    /// Seen classes grouped over the training split.
    pub fn train_pool(&self) -> Result<ClassPool> {
        let seen: Vec<usize> = self
            .seen_classes()
            .into_iter()
            .filter(|&c| (0..self.num_samples()).any(|i| self.train[i] && self.labels[i] as usize == c))
            .collect();
        ClassPool::new(&self.labels, |i| self.train[i], &seen)
    }

    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_metadata(&mut self, key: &str, value: String) {
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let c = self.unseen.len();
        if self.features.rank() != 2 || self.features.rows() != n {
            return Err(Error::invalid(format!(
                "features {:?} do not match {n} labels",
                self.features.shape()
            )));
        }
        if self.attributes.rank() != 2 || self.attributes.rows() != c {
            return Err(Error::invalid(format!(
                "attributes {:?} do not match {c} classes",
                self.attributes.shape()
            )));
        }
        if self.train.len() != n {
            return Err(Error::InvalidSplit(format!("train mask has {} entries for {n} samples", self.train.len())));
        }
        if !self.features.is_finite() || !self.attributes.is_finite() {
            return Err(Error::invalid("features and attributes must be finite"));
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if y as usize >= c {
                return Err(Error::LabelOutOfRange {
                    sample: i,
                    label: y as usize,
                    classes: c,
                });
            }
        }
        if !self.unseen.iter().any(|&u| u) {
            return Err(Error::InvalidSplit("no unseen classes".into()));
        }
        let mut test_hits = vec![0usize; c];
        for i in 0..n {
            let y = self.labels[i] as usize;
            if self.train[i] {
                if self.unseen[y] {
                    return Err(Error::InvalidSplit(format!(
                        "sample {i} of unseen class {y} is in the training split"
                    )));
                }
            } else {
                if self.mode == Mode::Zsl && !self.unseen[y] {
                    return Err(Error::InvalidSplit(format!(
                        "zsl test sample {i} belongs to seen class {y}"
                    )));
                }
                test_hits[y] += 1;
            }
        }
        for (y, &hits) in test_hits.iter().enumerate() {
            let required = self.unseen[y] || self.mode == Mode::Gzsl;
            if required && hits == 0 {
                return Err(Error::InvalidSplit(format!("class {y} has no test samples")));
            }
        }
        Ok(())
    }

    /// Checks that features lie in `[0, 1]` and attribute rows have unit norm.
    pub fn check_preprocessed(&self) -> Result<()> {
        if let Some(v) = self.features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "dataset `{}` is not min-max normalized (feature value {v})",
                self.name
            )));
        }
        for r in 0..self.num_classes() {
            let norm = self.attributes.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "dataset `{}`: attribute row {r} has norm {norm}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// L2-normalizes the attributes and min-max normalizes the features with
    /// statistics from the training split.
    pub fn preprocess(&mut self) -> Result<MinMax> {
        self.attributes = normalize_attributes(&self.attributes)?;
        let stats = MinMax::fit(&self.features, &self.train_indices());
        self.features = stats.apply(&self.features);
        Ok(stats)
    }

    fn manifest(&self) -> String {
        let mut pairs = vec![
            ("name", self.name.clone()),
            ("n", self.num_samples().to_string()),
            ("d", self.feat_dim().to_string()),
            ("C", self.num_classes().to_string()),
            ("d_a", self.attr_dim().to_string()),
            ("mode", self.mode.to_string()),
        ];
        pairs.extend(self.metadata.iter().map(|(k, v)| (k.as_str(), v.clone())));
        kv::render(pairs)
    }

    fn splits(&self) -> Matrix {
        let mut data = Vec::new();
        for (i, &t) in self.train.iter().enumerate() {
            data.push(if t { SPLIT_TRAIN } else { SPLIT_TEST });
            data.push(i as u32);
        }
        for c in self.unseen_classes() {
            data.push(SPLIT_UNSEEN_CLASS);
            data.push(c as u32);
        }
        Matrix::U32 {
            shape: vec![data.len() / 2, 2],
            data,
        }
    }

    /// Writes the dataset directory, creating it when needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest.txt");
        fs::write(&manifest, self.manifest()).map_err(|e| Error::io(&manifest, e))?;
        Matrix::F64(self.features.clone()).write(&dir.join("features.z2fd"))?;
        Matrix::F64(self.attributes.clone()).write(&dir.join("attributes.z2fd"))?;
        Matrix::U32 {
            shape: vec![self.labels.len()],
            data: self.labels.clone(),
        }
        .write(&dir.join("labels.z2fd"))?;
        self.splits().write(&dir.join("splits.z2fd"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let entries = kv::parse(&text, &manifest_path.display().to_string())?;
        let bad = |message: String| Error::Format {
            path: manifest_path.clone(),
            message,
        };
        let get = |key: &str| -> Result<&str> {
            entries
                .iter()
                .find(|e| e.key == key)
                .map(|e| e.value.as_str())
                .ok_or_else(|| bad(format!("missing key `{key}`")))
        };
        let count = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| bad(format!("`{key}` is not a non-negative integer")))
        };
        let name = get("name")?.to_string();
        let (n, d, c, d_a) = (count("n")?, count("d")?, count("C")?, count("d_a")?);
        let mode: Mode = get("mode")?.parse().map_err(|_| bad("mode must be zsl or gzsl".into()))?;
        let metadata = entries
            .iter()
            .filter(|e| !["name", "n", "d", "C", "d_a", "mode"].contains(&e.key.as_str()))
            .map(|e| (e.key.clone(), e.value.clone()))
            .collect();

        let fpath = dir.join("features.z2fd");
        let features = z2fd::read_f64(&fpath, 2)?;
        expect_shape(&fpath, features.shape(), &[n, d])?;
        let apath = dir.join("attributes.z2fd");
        let attributes = z2fd::read_f64(&apath, 2)?;
        expect_shape(&apath, attributes.shape(), &[c, d_a])?;
        let lpath = dir.join("labels.z2fd");
        let (lshape, labels) = z2fd::read_u32(&lpath, 1)?;
        expect_shape(&lpath, &lshape, &[n])?;
        for (i, &y) in labels.iter().enumerate() {
            if y as usize >= c {
                return Err(Error::LabelOutOfRange {
                    sample: i,
                    label: y as usize,
                    classes: c,
                });
            }
        }
        let spath = dir.join("splits.z2fd");
        let (sshape, sdata) = z2fd::read_u32(&spath, 2)?;
        if sshape[1] != 2 {
            return Err(Error::Format {
                path: spath,
                message: format!("expected [rows, 2] split records, found {sshape:?}"),
            });
        }
        let mut assigned: Vec<Option<bool>> = vec![None; n];
        let mut unseen = vec![false; c];
        for rec in sdata.chunks_exact(2) {
            let (kind, value) = (rec[0], rec[1] as usize);
            match kind {
                SPLIT_TRAIN | SPLIT_TEST => {
                    if value >= n {
                        return Err(Error::UnknownSplitReference {
                            what: "sample",
                            index: value,
                        });
                    }
                    if assigned[value].is_some() {
                        return Err(Error::InvalidSplit(format!("sample {value} is listed twice")));
                    }
                    assigned[value] = Some(kind == SPLIT_TRAIN);
                }
                SPLIT_UNSEEN_CLASS => {
                    if value >= c {
                        return Err(Error::UnknownSplitReference {
                            what: "class",
                            index: value,
                        });
                    }
                    unseen[value] = true;
                }
                other => {
                    return Err(Error::Format {
                        path: spath,
                        message: format!("unknown split record kind {other}"),
                    })
                }
            }
        }
        let train = assigned
            .iter()
            .enumerate()
            .map(|(i, a)| a.ok_or_else(|| Error::InvalidSplit(format!("sample {i} is in neither split"))))
            .collect::<Result<Vec<bool>>>()?;
        let mut ds = Dataset::new(name, features, labels, attributes, train, unseen, mode)?;
        ds.metadata = metadata;
        Ok(ds)
    }
}

fn expect_shape(path: &Path, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Format {
            path: path.into(),
            message: format!("shape {got:?} disagrees with the manifest ({want:?})"),
        });
    }
    Ok(())
}

/// Divides every row by its Euclidean norm.
pub fn normalize_attributes(a: &Array) -> Result<Array> {
    let (rows, cols) = a.require_matrix("normalize_attributes")?;
    let mut out = a.clone();
    for r in 0..rows {
        let norm = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!("attribute row {r} is all zeros")));
        }
        for c in 0..cols {
            out.set(r, c, a.get(r, c) / norm);
        }
    }
    Ok(out)
}

/// Per-dimension min-max statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    /// Statistics over the rows `fit_rows` of `x`.
    pub fn fit(x: &Array, fit_rows: &[usize]) -> Self {
        let d = x.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for &r in fit_rows {
            for (j, &v) in x.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        MinMax { min, max }
    }

    /// `(x - min) / (max - min)` clamped into `[0, 1]`; dimensions that are
    /// constant on the fitted rows map to 0.
    pub fn apply(&self, x: &Array) -> Array {
        let d = x.cols();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            let span = self.max[j] - self.min[j];
            *v = if span > 0.0 {
                ((*v - self.min[j]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        out
    }
}

/// Min-max normalizes `x` with statistics from `train_rows`.
pub fn minmax_normalize(x: &Array, train_rows: &[usize]) -> (Array, MinMax) {
    let stats = MinMax::fit(x, train_rows);
    (stats.apply(x), stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny(mode: Mode) -> Dataset {
        // classes 0, 1 seen; 2 unseen
        let features = Array::from_rows(&[
            [0.1, 0.2],
            [0.3, 0.4],
            [0.5, 0.6],
            [0.7, 0.8],
            [0.9, 1.0],
            [0.0, 0.5],
        ])
        .unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let attributes = Array::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let train = match mode {
            Mode::Zsl => vec![true, true, true, true, false, false],
            Mode::Gzsl => vec![true, false, true, false, false, false],
        };
        Dataset::new("tiny", features, labels, attributes, train, vec![false, false, true], mode).unwrap()
    }

    #[test]
    fn three_four_five() {
        let a = normalize_attributes(&Array::from_rows(&[[3.0, 4.0], [0.6, 0.8]]).unwrap()).unwrap();
        assert_eq!(a.row(0), &[0.6, 0.8]);
        assert_eq!(a.row(1), &[0.6, 0.8]);
    }

    #[test]
    fn zero_attribute_row_rejected() {
        assert!(normalize_attributes(&Array::from_rows(&[[0.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn minmax_examples() {
        let x = Array::from_rows(&[[2.0, 7.0], [4.0, 7.0], [3.0, 1.0], [5.0, 9.0]]).unwrap();
        let (y, _) = minmax_normalize(&x, &[0, 1]);
        assert_eq!(y.row(0), &[0.0, 0.0]);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(y.get(2, 0), 0.5);
        assert_eq!(y.get(3, 0), 1.0);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [Mode::Zsl, Mode::Gzsl] {
            let mut ds = tiny(mode);
            ds.set_metadata("oracle_accuracy", "0.75".into());
            let p = dir.path().join(mode.to_string());
            ds.save(&p).unwrap();
            let back = Dataset::load(&p).unwrap();
            assert_eq!(back, ds);
            let q = dir.path().join(format!("{mode}-again"));
            back.save(&q).unwrap();
            for f in ["manifest.txt", "features.z2fd", "attributes.z2fd", "labels.z2fd", "splits.z2fd"] {
                assert_eq!(fs::read(p.join(f)).unwrap(), fs::read(q.join(f)).unwrap(), "{f}");
            }
        }
    }

    #[test]
    fn corrupt_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        tiny(Mode::Zsl).save(dir.path()).unwrap();
        let f = dir.path().join("labels.z2fd");
        let mut b = fs::read(&f).unwrap();
        b[0] = b'Q';
        fs::write(&f, b).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("labels.z2fd"));
    }

    #[test]
    fn unseen_class_in_training_split_rejected() {
        let ds = tiny(Mode::Zsl);
        let mut train = ds.train.clone();
        train[4] = true;
        let err = Dataset::new("x", ds.features, ds.labels, ds.attributes, train, ds.unseen, Mode::Zsl).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit(_)));
    }

    #[test]
    fn label_out_of_range_and_unknown_class_reference() {
        let dir = tempfile::tempdir().unwrap();
        tiny(Mode::Zsl).save(dir.path()).unwrap();
        let lp = dir.path().join("labels.z2fd");
        Matrix::U32 {
            shape: vec![6],
            data: vec![0, 0, 1, 1, 2, 3],
        }
        .write(&lp)
        .unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::LabelOutOfRange { sample: 5, .. })));

        tiny(Mode::Zsl).save(dir.path()).unwrap();
        let sp = dir.path().join("splits.z2fd");
        let mut recs = vec![0, 0, 0, 1, 0, 2, 0, 3, 1, 4, 1, 5, 2, 2];
        recs.extend([2, 9]);
        Matrix::U32 {
            shape: vec![8, 2],
            data: recs,
        }
        .write(&sp)
        .unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(Error::UnknownSplitReference { what: "class", index: 9 })
        ));
    }

    #[test]
    fn splits_must_partition_samples() {
        let dir = tempfile::tempdir().unwrap();
        tiny(Mode::Zsl).save(dir.path()).unwrap();
        let sp = dir.path().join("splits.z2fd");
        Matrix::U32 {
            shape: vec![6, 2],
            data: vec![0, 0, 0, 1, 0, 2, 0, 3, 1, 4, 2, 2],
        }
        .write(&sp)
        .unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn zsl_test_split_holds_only_unseen_classes() {
        let ds = tiny(Mode::Gzsl);
        let err = Dataset::new("x", ds.features, ds.labels, ds.attributes, ds.train, ds.unseen, Mode::Zsl).unwrap_err();
        assert!(matches!(err, Error::InvalidSplit(_)));
    }

    #[test]
    fn partition_and_pools() {
        let ds = tiny(Mode::Gzsl);
        let mut all: Vec<usize> = ds.train_indices().into_iter().chain(ds.test_indices()).collect();
        all.sort();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        let pool = ds.train_pool().unwrap();
        assert_eq!(pool.classes(), &[0, 1]);
        assert_eq!(pool.members(1), &[2]);
    }

    proptest! {
        #[test]
        fn unit_rows(rows in prop::collection::vec(prop::collection::vec(0.01..10.0f64, 4), 1..6)) {
            let a = normalize_attributes(&Array::from_rows(&rows).unwrap()).unwrap();
            for r in 0..a.rows() {
                let n: f64 = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
            let again = normalize_attributes(&a).unwrap();
            for (x, y) in a.data().iter().zip(again.data()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }

        #[test]
        fn minmax_is_idempotent(vals in prop::collection::vec(-5.0..5.0f64, 12), split in 1usize..6) {
            let x = Array::from_vec(vec![6, 2], vals).unwrap();
            let train: Vec<usize> = (0..split).collect();
            let (once, _) = minmax_normalize(&x, &train);
            prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let (twice, _) = minmax_normalize(&once, &train);
            prop_assert_eq!(once, twice);
        }
    }
}
