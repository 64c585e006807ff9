//! Synthetic generators, CSV ingestion, standardization and fold splits.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Matrix, Rng, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Vector),
    Classification { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.len(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_regression(&self) -> Option<&Vector> {
        match self {
            Targets::Regression(y) => Some(y),
            _ => None,
        }
    }

    pub fn as_labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classification { labels, .. } => Some(labels),
            _ => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => {
                Targets::Regression(Vector::from_iterator(idx.len(), idx.iter().map(|&i| y[i])))
            }
            Targets::Classification { labels, classes } => Targets::Classification {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Targets,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// One flag per feature column; one-hot columns are left unstandardized.
    pub one_hot: Vec<bool>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if let Targets::Classification { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: *classes,
                });
            }
        }
        let d = features.ncols();
        Ok(Self {
            features,
            targets,
            feature_names: (1..=d).map(|i| format!("x{i}")).collect(),
            target_name: "y".into(),
            one_hot: vec![false; d],
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of network outputs the targets call for.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(_) => 1,
            Targets::Classification { classes, .. } => *classes,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let features = Matrix::from_fn(idx.len(), d, |r, c| self.features[(idx[r], c)]);
        Dataset {
            features,
            targets: self.targets.select(idx),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            one_hot: self.one_hot.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Per-column `(min, max)` of the features.
    pub fn feature_range(&self) -> Vec<(f64, f64)> {
        self.features
            .column_iter()
            .map(|c| (c.min(), c.max()))
            .collect()
    }
}

fn uniform_band_point(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random_range(0.5..1.0);
    if rng.random_bool(0.5) {
        -u
    } else {
        u
    }
}

/// `y = sin(2πx) + ε` with `x` uniform on `[−1, −0.5] ∪ [0.5, 1]`.
pub fn gen_sin(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyInput("gen_sin needs n >= 1"));
    }
    if noise < 0.0 {
        return Err(Error::NegativeScale(noise));
    }
    let xs: Vec<f64> = (0..n).map(|_| uniform_band_point(rng)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| (2.0 * PI * x).sin() + noise * standard_normal(rng))
        .collect();
    Dataset::new(
        Matrix::from_vec(n, 1, xs),
        Targets::Regression(Vector::from_vec(ys)),
    )
}

/// Two interleaved half circles. Class 0 is the upper unit half circle with
/// `⌈n/2⌉` points; class 1 is the lower one shifted by `(1, −0.5)`.
pub fn gen_two_moons(n: usize, noise: f64, rng: &mut Rng) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    if noise < 0.0 {
        return Err(Error::NegativeScale(noise));
    }
    let n0 = n.div_ceil(2);
    let n1 = n - n0;
    let angle = |i: usize, count: usize| {
        if count > 1 {
            PI * i as f64 / (count - 1) as f64
        } else {
            0.0
        }
    };
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = angle(i, n0);
        rows.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n1 {
        let t = angle(i, n1);
        rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    for (p, _) in rows.iter_mut() {
        p[0] += noise * standard_normal(rng);
        p[1] += noise * standard_normal(rng);
    }
    rows.shuffle(rng);
    let features = Matrix::from_fn(n, 2, |r, c| rows[r].0[c]);
    let labels = rows.iter().map(|r| r.1).collect();
    Dataset::new(features, Targets::Classification { labels, classes: 2 })
}

/// In-distribution copy plus an equally sized out-of-distribution set drawn
/// uniformly from the feature box shifted by `3Δ` per dimension, i.e.
/// `[max + 2Δ, max + 3Δ]`.
pub fn gen_ood_pair(id: &Dataset, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if id.is_empty() {
        return Err(Error::EmptyInput("in-distribution set"));
    }
    let ranges = id.feature_range();
    let n = id.len();
    let mut ood = Matrix::zeros(n, id.dim());
    for (c, (lo, hi)) in ranges.iter().enumerate() {
        let width = if hi > lo { hi - lo } else { 1.0 };
        let lower = hi + 2.0 * width;
        for r in 0..n {
            ood[(r, c)] = lower + width * rng.random::<f64>();
        }
    }
    let targets = match &id.targets {
        Targets::Regression(_) => Targets::Regression(Vector::zeros(n)),
        Targets::Classification { classes, .. } => Targets::Classification {
            labels: vec![0; n],
            classes: *classes,
        },
    };
    let mut out = Dataset::new(ood, targets)?;
    out.feature_names = id.feature_names.clone();
    out.target_name = id.target_name.clone();
    out.one_hot = id.one_hot.clone();
    out.standardization = id.standardization.clone();
    Ok((id.clone(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvOptions {
    /// Columns to one-hot encode as `name=level`, levels sorted.
    pub categorical: Vec<String>,
    pub task: Task,
}

/// Reads a header-first CSV. Data rows are numbered from 1 in errors.
pub fn load_csv(path: &Path, target_column: &str, options: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            Error::InvalidParameter(format!("target column \"{target_column}\" not in header"))
        })?;
    for c in &options.categorical {
        if !headers.contains(c) {
            return Err(Error::InvalidParameter(format!(
                "categorical column \"{c}\" not in header"
            )));
        }
    }
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = records.len() + 1;
        let cells: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        if cells.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: headers.get(cells.len()).cloned().unwrap_or_default(),
                message: format!("expected {} fields, found {}", headers.len(), cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    row,
                    column: headers[c].clone(),
                });
            }
        }
        records.push(cells);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("csv has no data rows"));
    }

    let parse = |row: usize, col: usize, cell: &str| -> Result<f64> {
        let v: f64 = cell
            .parse()
            .map_err(|e: std::num::ParseFloatError| Error::Parse {
                row,
                column: headers[col].clone(),
                message: format!("{e}: \"{cell}\""),
            })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row,
                column: headers[col].clone(),
                message: "non-finite value".into(),
            });
        }
        Ok(v)
    };

    // Column plan: numeric copy or one-hot over sorted levels.
    let mut names = Vec::new();
    let mut one_hot = Vec::new();
    let mut plan: Vec<(usize, Option<BTreeMap<String, usize>>)> = Vec::new();
    for (c, h) in headers.iter().enumerate() {
        if c == target_idx {
            continue;
        }
        if options.categorical.contains(h) {
            let levels: BTreeSet<&str> = records.iter().map(|r| r[c].as_str()).collect();
            let map: BTreeMap<String, usize> = levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.to_string(), i))
                .collect();
            for l in &levels {
                names.push(format!("{h}={l}"));
                one_hot.push(true);
            }
            plan.push((c, Some(map)));
        } else {
            names.push(h.clone());
            one_hot.push(false);
            plan.push((c, None));
        }
    }

    let n = records.len();
    let d = names.len();
    let mut features = Matrix::zeros(n, d);
    for (r, rec) in records.iter().enumerate() {
        let mut out = 0;
        for (c, levels) in &plan {
            match levels {
                None => {
                    features[(r, out)] = parse(r + 1, *c, &rec[*c])?;
                    out += 1;
                }
                Some(map) => {
                    features[(r, out + map[&rec[*c]])] = 1.0;
                    out += map.len();
                }
            }
        }
    }

    let targets = match options.task {
        Task::Regression => {
            let ys = records
                .iter()
                .enumerate()
                .map(|(r, rec)| parse(r + 1, target_idx, &rec[target_idx]))
                .collect::<Result<Vec<_>>>()?;
            Targets::Regression(Vector::from_vec(ys))
        }
        Task::Classification => {
            let labels = records
                .iter()
                .enumerate()
                .map(|(r, rec)| {
                    rec[target_idx].parse::<usize>().map_err(|e| Error::Parse {
                        row: r + 1,
                        column: headers[target_idx].clone(),
                        message: format!("{e}: \"{}\"", rec[target_idx]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            Targets::Classification { labels, classes }
        }
    };
    let mut ds = Dataset::new(features, targets)?;
    ds.feature_names = names;
    ds.one_hot = one_hot;
    ds.target_name = headers[target_idx].clone();
    Ok(ds)
}

/// Writes features then the target column, shortest round-trip float format.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push(ds.target_name.clone());
    w.write_record(&header)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(match &ds.targets {
            Targets::Regression(y) => y[r].to_string(),
            Targets::Classification { labels, .. } => labels[r].to_string(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Column statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Columns passed through unchanged (one-hot encodings).
    pub unstandardized: Vec<usize>,
    /// `(mean, std)` of regression targets.
    pub target: Option<(f64, f64)>,
}

fn column_stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn scale_value(v: f64, mean: f64, std: f64) -> f64 {
    if std > 0.0 {
        (v - mean) / std
    } else {
        0.0
    }
}

impl Standardization {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        let mut feature_mean = Vec::with_capacity(train.dim());
        let mut feature_std = Vec::with_capacity(train.dim());
        let mut unstandardized = Vec::new();
        for c in 0..train.dim() {
            if train.one_hot[c] {
                unstandardized.push(c);
                feature_mean.push(0.0);
                feature_std.push(1.0);
            } else {
                let (m, s) = column_stats(train.features.column(c).iter().copied());
                feature_mean.push(m);
                feature_std.push(s);
            }
        }
        let target = train
            .targets
            .as_regression()
            .map(|y| column_stats(y.iter().copied()));
        Ok(Self {
            feature_mean,
            feature_std,
            unstandardized,
            target,
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dim() != self.feature_mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_mean.len(),
                got: ds.dim(),
            });
        }
        let mut out = ds.clone();
        for c in 0..ds.dim() {
            if self.unstandardized.contains(&c) {
                continue;
            }
            let (m, s) = (self.feature_mean[c], self.feature_std[c]);
            out.features
                .column_mut(c)
                .apply(|v| *v = scale_value(*v, m, s));
        }
        if let (Targets::Regression(y), Some((m, s))) = (&mut out.targets, self.target) {
            y.apply(|v| *v = scale_value(*v, m, s));
        }
        out.standardization = Some(self.clone());
        Ok(out)
    }

    /// Maps standardized features back to original units.
    pub fn inverse_features(&self, xs: &Matrix) -> Matrix {
        let mut out = xs.clone();
        for c in 0..xs.ncols() {
            if self.unstandardized.contains(&c) {
                continue;
            }
            let (m, s) = (self.feature_mean[c], self.feature_std[c]);
            out.column_mut(c).apply(|v| *v = *v * s + m);
        }
        out
    }

    pub fn inverse_targets(&self, ys: &Vector) -> Vector {
        match self.target {
            Some((m, s)) => ys.map(|v| v * s + m),
            None => ys.clone(),
        }
    }
}

/// Fits statistics on `train` only and applies them to every split.
pub fn standardize_fit_apply(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, Standardization)> {
    let stats = Standardization::fit(train)?;
    let t = stats.apply(train)?;
    let rest = others
        .iter()
        .map(|d| stats.apply(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((t, rest, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub n_folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            n_folds: 5,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` and cuts it into `n_folds` contiguous test chunks; the
/// last `round(val_fraction · rest)` of each remainder is validation.
pub fn kfold(n: usize, plan: &SplitPlan) -> Result<Vec<Fold>> {
    if plan.n_folds < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 folds, got {}",
            plan.n_folds
        )));
    }
    if n < plan.n_folds {
        return Err(Error::TooFewRows {
            needed: plan.n_folds,
            got: n,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut crate::numerics::seeded_rng(plan.seed));
    let k = plan.n_folds;
    let bounds: Vec<usize> = (0..=k).map(|i| i * n / k).collect();
    Ok((0..k)
        .map(|f| {
            let test = perm[bounds[f]..bounds[f + 1]].to_vec();
            let rest: Vec<usize> = perm[..bounds[f]]
                .iter()
                .chain(&perm[bounds[f + 1]..])
                .copied()
                .collect();
            let n_val = (plan.val_fraction * rest.len() as f64).round() as usize;
            let (train, val) = rest.split_at(rest.len() - n_val.min(rest.len()));
            Fold {
                train: train.to_vec(),
                val: val.to_vec(),
                test,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn sin_without_noise_is_exact() {
        let ds = gen_sin(200, 0.0, &mut seeded_rng(0)).unwrap();
        let y = ds.targets.as_regression().unwrap();
        for i in 0..ds.len() {
            let x = ds.features[(i, 0)];
            assert!(x.abs() >= 0.5 && x.abs() <= 1.0);
            assert_eq!(y[i], (2.0 * PI * x).sin());
        }
    }

    #[test]
    fn sin_target_variance() {
        // E[sin²(2πU)] = ½ on each band and the two band means cancel.
        let noise = 0.3;
        let ds = gen_sin(100_000, noise, &mut seeded_rng(1)).unwrap();
        let y = ds.targets.as_regression().unwrap();
        let mean = y.mean();
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        let expected = 0.5 + noise * noise;
        assert!((var / expected - 1.0).abs() < 0.1);
    }

    #[test]
    fn moons_geometry() {
        let ds = gen_two_moons(101, 0.0, &mut seeded_rng(2)).unwrap();
        let labels = ds.targets.as_labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 51);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 50);
        for (i, &l) in labels.iter().enumerate() {
            let (x, y) = (ds.features[(i, 0)], ds.features[(i, 1)]);
            if l == 0 {
                assert!(((x * x + y * y).sqrt() - 1.0).abs() < 1e-12);
                assert!(y >= -1e-12);
            }
        }
        // Leave-one-out nearest neighbour is perfect on noiseless moons.
        let n = ds.len();
        for i in 0..n {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let d = |j: usize| (ds.features.row(i) - ds.features.row(j)).norm();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(labels[nearest], labels[i]);
        }
    }

    #[test]
    fn ood_pair_is_displaced() {
        let id = gen_sin(50, 0.1, &mut seeded_rng(3)).unwrap();
        let (id_test, ood) = gen_ood_pair(&id, &mut seeded_rng(4)).unwrap();
        assert_eq!(id_test, id);
        assert_eq!(ood.len(), id.len());
        assert_eq!(ood.dim(), id.dim());
        let (lo, hi) = id.feature_range()[0];
        let width = hi - lo;
        for v in ood.features.iter() {
            assert!(v - hi >= 2.0 * width - 1e-12);
        }
        let (_, again) = gen_ood_pair(&id, &mut seeded_rng(4)).unwrap();
        assert_eq!(again, ood);
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "x1,x2,y\n0.1,2.5e-3,1.0\n-3.25,0.3333333333333333,2\n7,8,9.125\n",
        );
        let ds = load_csv(&p, "y", &CsvOptions::default()).unwrap();
        assert_eq!(ds.feature_names, vec!["x1", "x2"]);
        let q = dir.path().join("b.csv");
        save_csv(&ds, &q).unwrap();
        let back = load_csv(&q, "y", &CsvOptions::default()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn categorical_columns_expand() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.csv",
            "x1,color,y\n1,red,0\n2,blue,1\n3,green,1\n4,red,0\n",
        );
        let opts = CsvOptions {
            categorical: vec!["color".into()],
            task: Task::Classification,
        };
        let ds = load_csv(&p, "y", &opts).unwrap();
        assert_eq!(
            ds.feature_names,
            vec!["x1", "color=blue", "color=green", "color=red"]
        );
        for r in 0..ds.len() {
            assert_eq!(ds.features.row(r).columns(1, 3).sum(), 1.0);
        }
        assert_eq!(ds.features[(0, 3)], 1.0);
        assert_eq!(
            ds.targets,
            Targets::Classification {
                labels: vec![0, 1, 1, 0],
                classes: 2
            }
        );
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.csv", "x1,y\n1.0,2\nabc,3\n");
        match load_csv(&p, "y", &CsvOptions::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x1");
            }
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "m.csv", "x1,y\n1.0,\n");
        assert!(matches!(
            load_csv(&p, "y", &CsvOptions::default()),
            Err(Error::MissingValue { row: 1, .. })
        ));
    }

    fn tabular(n: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed);
        let f = Matrix::from_fn(n, 3, |_, c| {
            3.0 * c as f64 + (c + 1) as f64 * standard_normal(&mut rng)
        });
        let y = Vector::from_fn(n, |_, _| 5.0 + 2.0 * standard_normal(&mut rng));
        Dataset::new(f, Targets::Regression(y)).unwrap()
    }

    #[test]
    fn standardization_contract() {
        let train = tabular(200, 5);
        let test = tabular(50, 6);
        let (st, rest, stats) = standardize_fit_apply(&train, &[&test]).unwrap();
        for c in 0..3 {
            let (m, s) = column_stats(st.features.column(c).iter().copied());
            assert!(m.abs() <= 1e-8);
            assert!((s - 1.0).abs() <= 1e-6);
        }
        let (ym, ys) = column_stats(st.targets.as_regression().unwrap().iter().copied());
        assert!(ym.abs() <= 1e-8 && (ys - 1.0).abs() <= 1e-6);
        let back = stats.inverse_features(&st.features);
        assert!((back - &train.features).abs().max() <= 1e-12);
        let yback = stats.inverse_targets(st.targets.as_regression().unwrap());
        assert!((yback - train.targets.as_regression().unwrap()).abs().max() <= 1e-12);
        let test_mean = column_stats(rest[0].features.column(0).iter().copied()).0;
        assert!(test_mean != 0.0);
    }

    #[test]
    fn zero_std_and_one_hot_columns() {
        let mut ds = Dataset::new(
            Matrix::from_row_slice(3, 2, &[4.0, 1.0, 4.0, 0.0, 4.0, 1.0]),
            Targets::Regression(Vector::from_vec(vec![1.0, 2.0, 3.0])),
        )
        .unwrap();
        ds.one_hot = vec![false, true];
        let (st, _, stats) = standardize_fit_apply(&ds, &[]).unwrap();
        assert_eq!(
            st.features.column(0).iter().copied().collect::<Vec<_>>(),
            vec![0.0; 3]
        );
        assert_eq!(st.features.column(1), ds.features.column(1));
        assert_eq!(stats.unstandardized, vec![1]);
    }

    #[test]
    fn kfold_examples() {
        let plan = SplitPlan {
            n_folds: 5,
            val_fraction: 0.1,
            seed: 9,
        };
        let folds = kfold(10, &plan).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert!(f.val.iter().all(|v| !f.test.contains(v)));
            assert_eq!(f.val.len(), 1);
        }
        assert_eq!(kfold(10, &plan).unwrap(), folds);
        assert!(matches!(kfold(3, &plan), Err(Error::TooFewRows { .. })));
    }

    proptest! {
        #[test]
        fn kfold_partitions(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
            prop_assume!(n >= k);
            let folds = kfold(n, &SplitPlan { n_folds: k, val_fraction: 0.1, seed }).unwrap();
            let mut seen = vec![0; n];
            for f in &folds {
                for &i in &f.test {
                    seen[i] += 1;
                }
                let mut parts: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
                parts.sort();
                prop_assert_eq!(parts, (0..n).collect::<Vec<_>>());
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
