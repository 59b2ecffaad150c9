//! Datasets, synthetic generation, seeded splitting and label corruption.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Class centers of the two-dimensional mixture. Class 1 corresponds to
/// `y = +1`, class 0 to `y = -1`.
pub const MIXTURE_CENTERS: [[f64; 2]; 2] = [[0.0, 1.5], [1.5, 0.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

/// An immutable collection of labelled feature vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "a dataset needs at least 2 classes, got {num_classes}"
            )));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: ex.features.len(),
                });
            }
            if ex.label >= num_classes {
                return Err(Error::invalid(format!(
                    "example {i} has label {} but there are {num_classes} classes",
                    ex.label
                )));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("example {i} has non-finite features")));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            dim,
        })
    }

    pub fn empty(num_classes: usize, dim: usize) -> Result<Self> {
        Self::new(Vec::new(), num_classes, dim)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    /// Writes the dataset in the feature CSV format read by [`load_features`].
    pub fn save_features(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for ex in &self.examples {
            for v in &ex.features {
                write!(out, "{v},")?;
            }
            writeln!(out, "{}", ex.label)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Disjoint train / recalibration partition of one source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub recal: Dataset,
}

/// Samples `n` points of the two-class Gaussian mixture: Rademacher labels,
/// standard normal noise around the class center.
pub fn make_gaussian_mixture(n: usize, seed: u64) -> Dataset {
    mixture_from_stream(n, seed, Stream::Data)
}

/// Same distribution as [`make_gaussian_mixture`] drawn from a stream that is
/// independent of it, for held-out evaluation data.
pub fn make_gaussian_mixture_test(n: usize, seed: u64) -> Dataset {
    mixture_from_stream(n, seed, Stream::TestData)
}

fn mixture_from_stream(n: usize, seed: u64, which: Stream) -> Dataset {
    let mut rng = rng::stream(seed, which);
    let examples = (0..n)
        .map(|_| {
            // y = +1 -> class 1, y = -1 -> class 0
            let label = usize::from(rng.random::<bool>());
            let center = MIXTURE_CENTERS[label];
            let features = center
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            Example { features, label }
        })
        .collect();
    Dataset {
        examples,
        num_classes: 2,
        dim: 2,
    }
}

/// Uniformly random partition into `(n - round(alpha n), round(alpha n))`
/// examples. Both parts keep the source order.
pub fn random_split(dataset: &Dataset, alpha: f64, seed: u64) -> Result<SplitPair> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("split ratio {alpha} outside [0, 1]")));
    }
    let n = dataset.len();
    let n_recal = (alpha * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Split));

    let mut recal_idx = order[..n_recal].to_vec();
    let mut train_idx = order[n_recal..].to_vec();
    recal_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(SplitPair {
        train: dataset.subset(&train_idx),
        recal: dataset.subset(&recal_idx),
    })
}

/// With probability `p` per example, replaces the label by a uniform draw over
/// all classes (the original class included).
pub fn corrupt_labels(dataset: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("corruption probability {p} outside [0, 1]")));
    }
    let mut rng = rng::stream(seed, Stream::Corrupt);
    let k = dataset.num_classes;
    let examples = dataset
        .examples
        .iter()
        .map(|ex| {
            let mut ex = ex.clone();
            if rng.random::<f64>() < p {
                ex.label = rng.random_range(0..k);
            }
            ex
        })
        .collect();
    Ok(Dataset {
        examples,
        num_classes: k,
        dim: dataset.dim,
    })
}

/// Reads `f_1,...,f_d,label` rows. `d` comes from the first row and the class
/// count is `1 + max label` (at least 2).
pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_features(&text, path)
}

fn parse_features(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut examples = Vec::new();
    let mut dim = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(err(line_no, "expected at least one feature and a label".into()));
        }
        let (label_field, feature_fields) = fields.split_last().expect("non-empty row");
        let d = *dim.get_or_insert(feature_fields.len());
        if feature_fields.len() != d {
            return Err(err(
                line_no,
                format!("expected {d} features, found {}", feature_fields.len()),
            ));
        }
        let label: usize = label_field
            .parse()
            .map_err(|_| err(line_no, format!("label `{label_field}` is not a non-negative integer")))?;
        let features = feature_fields
            .iter()
            .map(|f| {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(line_no, format!("feature `{f}` is not a number")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(line_no, format!("feature `{f}` is not finite")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        examples.push(Example { features, label });
    }

    let Some(dim) = dim else {
        return Err(Error::EmptyDataset);
    };
    let num_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0).max(2);
    Dataset::new(examples, num_classes, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| Example::new(vec![i as f64, -(i as f64)], i % 3))
            .collect();
        Dataset::new(examples, 3, 2).unwrap()
    }

    #[test]
    fn mixture_empty() {
        let ds = make_gaussian_mixture(0, 1);
        assert!(ds.is_empty());
        assert_eq!((ds.dim(), ds.num_classes()), (2, 2));
    }

    #[test]
    fn mixture_is_seeded() {
        assert_eq!(make_gaussian_mixture(50, 3), make_gaussian_mixture(50, 3));
        assert_ne!(make_gaussian_mixture(50, 3), make_gaussian_mixture(50, 4));
        assert_ne!(make_gaussian_mixture(50, 3), make_gaussian_mixture_test(50, 3));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn mixture_class_means_concentrate() {
        let n = 100_000;
        let ds = make_gaussian_mixture(n, 7);
        let tol = 3.0 / ((n / 2) as f64).sqrt();
        for class in 0..2 {
            let pts: Vec<&Example> = ds.examples().iter().filter(|e| e.label == class).collect();
            for coord in 0..2 {
                let mean = pts.iter().map(|e| e.features[coord]).sum::<f64>() / pts.len() as f64;
                let center = MIXTURE_CENTERS[class][coord];
                assert!((mean - center).abs() < tol, "class {class} coord {coord}: {mean}");
            }
        }
        assert_eq!(MIXTURE_CENTERS[1], [1.5, 0.0]);
    }

    #[test]
    fn mixture_labels_are_balanced() {
        let n = 100_000;
        let ds = make_gaussian_mixture(n, 11);
        let ones = ds.labels().filter(|&l| l == 1).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 / 2.0).abs() < 4.0 * sd);
    }

    #[test]
    fn split_sizes_and_union() {
        let ds = toy(10);
        let split = random_split(&ds, 0.1, 5).unwrap();
        assert_eq!((split.train.len(), split.recal.len()), (9, 1));
        let mut all: Vec<_> = split
            .train
            .examples()
            .iter()
            .chain(split.recal.examples())
            .map(|e| e.features[0] as i64)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_alpha_zero_and_one() {
        let ds = toy(17);
        let split = random_split(&ds, 0.0, 1).unwrap();
        assert_eq!(split.train, ds);
        assert!(split.recal.is_empty());
        let split = random_split(&ds, 1.0, 1).unwrap();
        assert_eq!(split.recal, ds);
    }

    #[test]
    fn split_rejects_bad_alpha() {
        assert!(matches!(random_split(&toy(3), 1.5, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(random_split(&toy(3), -0.1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_deterministic() {
        let ds = toy(100);
        assert_eq!(random_split(&ds, 0.3, 9).unwrap(), random_split(&ds, 0.3, 9).unwrap());
    }

    #[test]
    fn corrupt_zero_is_identity() {
        let ds = toy(30);
        assert_eq!(corrupt_labels(&ds, 0.0, 1).unwrap(), ds);
    }

    fn agreement(a: &Dataset, b: &Dataset) -> f64 {
        let same = a.labels().zip(b.labels()).filter(|(x, y)| x == y).count();
        same as f64 / a.len() as f64
    }

    #[test]
    fn corrupt_full_binary_flips_half() {
        let ds = make_gaussian_mixture(100_000, 2);
        let noisy = corrupt_labels(&ds, 1.0, 3).unwrap();
        let flipped = 1.0 - agreement(&ds, &noisy);
        assert!((flipped - 0.5).abs() < 0.01, "{flipped}");
        for (a, b) in ds.examples().iter().zip(noisy.examples()) {
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn corrupt_three_class_agreement() {
        let examples = (0..100_000).map(|i| Example::new(vec![0.0], i % 3)).collect();
        let ds = Dataset::new(examples, 3, 1).unwrap();
        let noisy = corrupt_labels(&ds, 0.6, 4).unwrap();
        let expected = 1.0 - 0.6 * (2.0 / 3.0);
        let sd = (expected * (1.0 - expected) / ds.len() as f64).sqrt();
        assert!((agreement(&ds, &noisy) - expected).abs() < 4.0 * sd);
    }

    #[test]
    fn parse_small_file() {
        let ds = parse_features("0.5,1.0,0\n-2,3e-1,1\n1,1,1\n", Path::new("x.csv")).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes()), (3, 2, 2));
        assert_eq!(ds.examples()[1].features, vec![-2.0, 0.3]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let line_of = |text: &str| match parse_features(text, Path::new("x.csv")) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("1,2,0\n1,0\n"), 2);
        assert_eq!(line_of("1,2,0\n1,2,x\n"), 2);
        assert_eq!(line_of("1,2,0\n1,2,-1\n"), 2);
        assert_eq!(line_of("1,2,0\n1,2,0.5\n"), 2);
        assert_eq!(line_of("1,2,0\n1,2,0\nNaN,2,1\n"), 3);
        assert_eq!(line_of("inf,2,0\n"), 1);
    }

    #[test]
    fn parse_empty_is_empty_dataset_error() {
        assert!(matches!(parse_features("", Path::new("x")), Err(Error::EmptyDataset)));
        assert!(matches!(
            parse_features("\n\n", Path::new("x")),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn missing_file_is_parse_error() {
        assert!(matches!(
            load_features("/nonexistent/definitely/missing.csv"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn dataset_rejects_bad_examples() {
        assert!(Dataset::new(vec![Example::new(vec![1.0], 2)], 2, 1).is_err());
        assert!(Dataset::new(vec![Example::new(vec![1.0, 2.0], 0)], 2, 1).is_err());
        assert!(Dataset::new(vec![Example::new(vec![f64::NAN], 0)], 2, 1).is_err());
        assert!(Dataset::new(vec![], 1, 1).is_err());
    }
}
