//! Dataset ingestion, train/test split, normalization and batching.

pub mod cache;
pub mod csv;
pub mod toy;

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{shuffle, tag, SeedTree};

pub use self::csv::{binarize_labels, parse_csv, CsvOptions, RawRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SplitTag {
    Unassigned = 0,
    Train = 1,
    Test = 2,
}

impl SplitTag {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(SplitTag::Unassigned),
            1 => Some(SplitTag::Train),
            2 => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// Per-class row counts requested from [`Dataset::split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_pos: usize,
    pub train_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
}

impl SplitPlan {
    /// 7360 train / 1840 test segments with 1461 non-epileptic test rows.
    /// Train rows keep the source file's 1:4 class ratio.
    pub const PUBLISHED: SplitPlan = SplitPlan {
        train_pos: 1472,
        train_neg: 5888,
        test_pos: 379,
        test_neg: 1461,
    };

    /// Uses every row: a `test_fraction` share of each class goes to test.
    pub fn proportional(positives: usize, negatives: usize, test_fraction: f64) -> Self {
        let test_pos = (positives as f64 * test_fraction).round() as usize;
        let test_neg = (negatives as f64 * test_fraction).round() as usize;
        SplitPlan {
            train_pos: positives - test_pos,
            train_neg: negatives - test_neg,
            test_pos,
            test_neg,
        }
    }

    pub fn train_total(&self) -> usize {
        self.train_pos + self.train_neg
    }

    pub fn test_total(&self) -> usize {
        self.test_pos + self.test_neg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// `N × T_in` segments with binary labels and a split tag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    t_in: usize,
    x: Vec<f64>,
    y: Vec<u8>,
    split: Vec<SplitTag>,
    norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(t_in: usize, x: Vec<f64>, y: Vec<u8>) -> Result<Self> {
        if t_in == 0 || y.is_empty() || x.len() != t_in * y.len() {
            return Err(Error::Data(format!(
                "{} values do not form {} rows of length {t_in}",
                x.len(),
                y.len()
            )));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        let n = y.len();
        Ok(Dataset {
            t_in,
            x,
            y,
            split: vec![SplitTag::Unassigned; n],
            norm: None,
        })
    }

    pub fn from_records(records: &[RawRecord]) -> Result<Self> {
        let t_in = records
            .first()
            .map(|r| r.features.len())
            .ok_or_else(|| Error::Data("no records".into()))?;
        if records.iter().any(|r| r.features.len() != t_in) {
            return Err(Error::Data("records differ in feature count".into()));
        }
        let x = records.iter().flat_map(|r| r.features.iter().copied()).collect();
        Dataset::new(t_in, x, binarize_labels(records))
    }

    /// Reads either a CSV file or a binary dataset cache (detected by magic).
    pub fn load(path: &Path, opts: CsvOptions) -> Result<Self> {
        if cache::is_cache_file(path)? {
            cache::load_cache(path)
        } else {
            Dataset::from_records(&parse_csv(path, opts)?)
        }
    }

    pub(crate) fn with_split(mut self, split: Vec<SplitTag>) -> Result<Self> {
        if split.len() != self.y.len() {
            return Err(Error::Data("split tag count mismatch".into()));
        }
        self.split = split;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn t_in(&self) -> usize {
        self.t_in
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.t_in..(i + 1) * self.t_in]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.y[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    pub fn features(&self) -> &[f64] {
        &self.x
    }

    pub fn tags(&self) -> &[SplitTag] {
        &self.split
    }

    pub fn norm_stats(&self) -> Option<NormStats> {
        self.norm
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1).count()
    }

    /// Row indices carrying `tag`, ascending.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == tag).collect()
    }

    /// `(positives, negatives)` among rows tagged `tag`.
    pub fn class_counts(&self, tag: SplitTag) -> (usize, usize) {
        self.indices(tag).iter().fold((0, 0), |(p, n), &i| {
            if self.y[i] == 1 {
                (p + 1, n)
            } else {
                (p, n + 1)
            }
        })
    }

    /// Seeded stratified sampling of exactly the counts in `plan`.
    /// Rows not drawn stay [`SplitTag::Unassigned`].
    pub fn split(&mut self, plan: SplitPlan, seed: u64) -> Result<()> {
        let root = SeedTree::new(seed).child(tag::SPLIT);
        let mut tags = vec![SplitTag::Unassigned; self.len()];
        for (class, n_train, n_test) in [(1u8, plan.train_pos, plan.test_pos), (0u8, plan.train_neg, plan.test_neg)] {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.y[i] == class).collect();
            if members.len() < n_train + n_test {
                return Err(Error::Data(format!(
                    "class {class} has {} rows; split needs {} train + {} test",
                    members.len(),
                    n_train,
                    n_test
                )));
            }
            shuffle(&mut members, &mut root.child(class as u64).rng());
            for &i in &members[..n_test] {
                tags[i] = SplitTag::Test;
            }
            for &i in &members[n_test..n_test + n_train] {
                tags[i] = SplitTag::Train;
            }
        }
        self.split = tags;
        Ok(())
    }

    /// Global z-score using statistics of the train rows only; every row
    /// (train, test, unassigned) is transformed with them.
    pub fn normalize(&mut self) -> Result<NormStats> {
        let train = self.indices(SplitTag::Train);
        if train.is_empty() {
            return Err(Error::Data("normalize needs an assigned train split".into()));
        }
        let count = (train.len() * self.t_in) as f64;
        let mean = train.iter().map(|&i| self.row(i).iter().sum::<f64>()).sum::<f64>() / count;
        let var = train
            .iter()
            .map(|&i| self.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / count;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Data("train features have zero variance".into()));
        }
        let stats = NormStats { mean, std };
        self.apply_norm(stats);
        Ok(stats)
    }

    /// Applies externally supplied statistics (e.g. stored with a model).
    pub fn apply_norm(&mut self, stats: NormStats) {
        for v in &mut self.x {
            *v = (*v - stats.mean) / stats.std;
        }
        self.norm = Some(stats);
    }

    /// New dataset of the given rows, keeping their tags.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let x = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let y = rows.iter().map(|&i| self.y[i]).collect();
        let mut out = Dataset::new(self.t_in, x, y)?;
        out.split = rows.iter().map(|&i| self.split[i]).collect();
        out.norm = self.norm;
        Ok(out)
    }

    /// One epoch over the rows tagged `tag`, in `batch_size` chunks.
    /// `shuffle_seed = None` keeps ascending row order.
    pub fn batches(&self, tag: SplitTag, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut order = self.indices(tag);
        if order.is_empty() {
            return Err(Error::Data(format!("split {tag:?} is empty")));
        }
        if let Some(seed) = shuffle_seed {
            shuffle(&mut order, &mut SeedTree::new(seed).child(tag::SHUFFLE).rng());
        }
        Ok(Batches {
            data: self,
            order,
            batch_size,
            pos: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `B × T_in`, row-major.
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let x = indices.iter().flat_map(|&i| self.data.row(i).iter().copied()).collect();
        let y = indices.iter().map(|&i| self.data.label(i)).collect();
        Some(Batch { indices, x, y })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny(n: usize, positives: usize) -> Dataset {
        let x = (0..n * 3).map(|v| v as f64).collect();
        let y = (0..n).map(|i| u8::from(i < positives)).collect();
        Dataset::new(3, x, y).unwrap()
    }

    #[test]
    fn published_plan_totals() {
        let p = SplitPlan::PUBLISHED;
        assert_eq!(p.train_total(), 7360);
        assert_eq!(p.test_total(), 1840);
        assert_eq!(p.test_neg, 1461);
        assert_eq!(p.train_pos + p.test_pos, 1851);
    }

    #[test]
    fn split_counts_and_determinism() {
        let mut a = tiny(100, 30);
        let plan = SplitPlan {
            train_pos: 20,
            train_neg: 50,
            test_pos: 5,
            test_neg: 15,
        };
        a.split(plan, 3).unwrap();
        assert_eq!(a.class_counts(SplitTag::Train), (20, 50));
        assert_eq!(a.class_counts(SplitTag::Test), (5, 15));
        assert_eq!(a.indices(SplitTag::Unassigned).len(), 10);
        let mut b = tiny(100, 30);
        b.split(plan, 3).unwrap();
        assert_eq!(a.tags(), b.tags());
        let mut c = tiny(100, 30);
        c.split(plan, 4).unwrap();
        assert_ne!(a.tags(), c.tags());
        assert_eq!(c.class_counts(SplitTag::Test), (5, 15));
    }

    #[test]
    fn split_too_small() {
        let mut d = tiny(10, 2);
        let err = d.split(SplitPlan::PUBLISHED, 0).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn normalize_uses_train_stats_only() {
        let mut d = tiny(40, 10);
        d.split(SplitPlan::proportional(10, 30, 0.25), 1).unwrap();
        let stats = d.normalize().unwrap();
        let train = d.indices(SplitTag::Train);
        let vals: Vec<f64> = train.iter().flat_map(|&i| d.row(i).to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
        assert!(stats.std > 0.0);

        let test = d.indices(SplitTag::Test);
        let tvals: Vec<f64> = test.iter().flat_map(|&i| d.row(i).to_vec()).collect();
        let tmean = tvals.iter().sum::<f64>() / tvals.len() as f64;
        assert!(tmean.abs() > 1e-3, "test split should not be re-centered");
    }

    #[test]
    fn normalize_zero_variance() {
        let mut d = Dataset::new(2, vec![5.0; 8], vec![1, 0, 1, 0]).unwrap();
        d.split(SplitPlan::proportional(2, 2, 0.5), 0).unwrap();
        assert!(matches!(d.normalize(), Err(Error::Data(_))));
    }

    #[test]
    fn batch_sizes_and_coverage() {
        let mut d = tiny(10, 4);
        d.split(SplitPlan::proportional(4, 6, 0.0), 0).unwrap();
        let sizes: Vec<usize> = d.batches(SplitTag::Train, 3, Some(9)).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);

        let seen: Vec<usize> = d.batches(SplitTag::Train, 3, Some(9)).unwrap().flat_map(|b| b.indices).collect();
        let again: Vec<usize> = d.batches(SplitTag::Train, 3, Some(9)).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(seen, again);
        let set: BTreeSet<usize> = seen.iter().copied().collect();
        assert_eq!(set.len(), seen.len());
        assert_eq!(set, d.indices(SplitTag::Train).into_iter().collect());
        assert!(d.batches(SplitTag::Test, 3, None).is_err());
        assert!(d.batches(SplitTag::Train, 0, None).is_err());
    }

    #[test]
    fn batch_rows_match_dataset() {
        let mut d = tiny(6, 2);
        d.split(SplitPlan::proportional(2, 4, 0.0), 0).unwrap();
        for b in d.batches(SplitTag::Train, 4, Some(1)).unwrap() {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(&b.x[k * 3..(k + 1) * 3], d.row(i));
                assert_eq!(b.y[k], d.label(i));
            }
        }
    }
}
