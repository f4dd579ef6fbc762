//! Synthetic datasets: Gaussian blobs and small grid images.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Matrix;
use crate::error::{PawsError, Result};
use crate::support::LabeledPool;

/// Cluster mean directions are at least this far apart in angle (cosine ≤ 0.5).
pub const MIN_DIRECTION_COS: f64 = 0.5;
const DIRECTION_ATTEMPTS: usize = 10_000;

/// A labeled train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train_inputs: Matrix,
    pub train_labels: Vec<usize>,
    pub test_inputs: Matrix,
    pub test_labels: Vec<usize>,
    pub num_classes: usize,
    /// `(height, width)` when each row is a single-channel image.
    pub grid: Option<(usize, usize)>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train_inputs.cols()
    }

    /// Writes `split,label,x0,x1,...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(w, "split,label")?;
        for j in 0..self.dim() {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for (name, x, y) in
            [("train", &self.train_inputs, &self.train_labels), ("test", &self.test_inputs, &self.test_labels)]
        {
            for (r, &label) in y.iter().enumerate() {
                write!(w, "{name},{label}")?;
                for v in x.row(r) {
                    write!(w, ",{v:?}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `k` random unit vectors whose pairwise cosines are at most [`MIN_DIRECTION_COS`].
pub fn separated_directions(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    // ± coordinate axes already give 2·dim directions with cosine ≤ 0; beyond
    // that random search is unlikely to succeed in low dimension.
    if k > 2 * dim {
        return Err(PawsError::Config(format!(
            "cannot place {k} well-separated cluster directions in {dim} dimensions"
        )));
    }
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while dirs.len() < k {
        attempts += 1;
        if attempts > DIRECTION_ATTEMPTS {
            return Err(PawsError::Config(format!(
                "failed to place {k} separated cluster directions in {dim} dimensions"
            )));
        }
        let v = unit_vector(rng, dim);
        if dirs.iter().all(|d| d.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= MIN_DIRECTION_COS) {
            dirs.push(v);
        }
    }
    Ok(dirs)
}

/// Stratified 80/20 split of `(inputs, labels)` after a seeded shuffle within each class.
fn split(
    inputs: Matrix,
    labels: Vec<usize>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<usize>, Matrix, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n_test = idx.len() / 5;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.shuffle(rng);
    test.shuffle(rng);
    let pick = |ix: &[usize]| (inputs.select_rows(ix), ix.iter().map(|&i| labels[i]).collect());
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    (xtr, ytr, xte, yte)
}

/// `k` unit-covariance Gaussian clusters with means `separation·u_k` for
/// well-separated random unit directions `u_k`.
pub fn make_blobs(k: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(PawsError::Config(format!("need at least 2 classes, got {k}")));
    }
    if per_class < 5 || dim == 0 {
        return Err(PawsError::Config("need at least 5 samples per class and a positive dimension".into()));
    }
    if !(separation >= 0.0) {
        return Err(PawsError::Domain(format!("separation must be >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = separated_directions(k, dim, &mut rng)?;
    let labels: Vec<usize> = (0..k * per_class).map(|i| i / per_class).collect();
    let inputs = Matrix::from_fn(labels.len(), dim, |i, j| {
        separation * dirs[labels[i]][j] + rng.sample::<f64, _>(StandardNormal)
    });
    let (train_inputs, train_labels, test_inputs, test_labels) = split(inputs, labels, k, &mut rng);
    Ok(Dataset { train_inputs, train_labels, test_inputs, test_labels, num_classes: k, grid: None })
}

/// Single-channel `height×width` images: each class brightens a fixed random
/// 2×2 patch (amplitude `contrast`) over unit Gaussian pixel noise.
pub fn make_grid(k: usize, per_class: usize, height: usize, width: usize, contrast: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || per_class < 5 {
        return Err(PawsError::Config("need at least 2 classes and 5 samples per class".into()));
    }
    if height < 2 || width < 2 {
        return Err(PawsError::Config(format!("grid {height}x{width} is smaller than a 2x2 patch")));
    }
    let slots = (height - 1) * (width - 1);
    if k > slots {
        return Err(PawsError::Config(format!(
            "{k} classes need distinct patches but a {height}x{width} grid has {slots}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corners = rand::seq::index::sample(&mut rng, slots, k).into_vec();
    let dim = height * width;
    let mut masks = vec![vec![0.0; dim]; k];
    for (c, &slot) in corners.iter().enumerate() {
        let (y, x) = (slot / (width - 1), slot % (width - 1));
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            masks[c][(y + dy) * width + x + dx] = 1.0;
        }
    }
    let labels: Vec<usize> = (0..k * per_class).map(|i| i / per_class).collect();
    let inputs = Matrix::from_fn(labels.len(), dim, |i, j| {
        contrast * masks[labels[i]][j] + rng.sample::<f64, _>(StandardNormal)
    });
    let (train_inputs, train_labels, test_inputs, test_labels) = split(inputs, labels, k, &mut rng);
    Ok(Dataset { train_inputs, train_labels, test_inputs, test_labels, num_classes: k, grid: Some((height, width)) })
}

/// Training-set indices of the first `budget / K` samples of every class, sorted.
pub fn labeled_indices(data: &Dataset, budget: usize) -> Result<Vec<usize>> {
    let k = data.num_classes;
    if budget == 0 || !budget.is_multiple_of(k) {
        return Err(PawsError::Config(format!("label budget {budget} must be a positive multiple of the {k} classes")));
    }
    let per = budget / k;
    let mut idx = Vec::with_capacity(budget);
    for c in 0..k {
        let members: Vec<usize> =
            (0..data.train_labels.len()).filter(|&i| data.train_labels[i] == c).take(per).collect();
        if members.len() < per {
            return Err(PawsError::Config(format!(
                "class {c} has {} training samples, label budget needs {per}",
                members.len()
            )));
        }
        idx.extend(members);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// The labeled pool selected by [`labeled_indices`].
pub fn labeled_subset(data: &Dataset, budget: usize) -> Result<LabeledPool> {
    let idx = labeled_indices(data, budget)?;
    let labels = idx.iter().map(|&i| data.train_labels[i]).collect();
    LabeledPool::new(data.train_inputs.select_rows(&idx), labels, data.num_classes)
}

/// Index of the nearest support row in Euclidean distance; ties go to the lowest index.
pub fn nearest_row(support: &Matrix, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for r in 0..support.rows() {
        let d: f64 = support.row(r).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, r);
        }
    }
    best.1
}

/// Accuracy of 1-nearest-neighbour classification on raw features.
pub fn raw_nn_accuracy(pool: &LabeledPool, test_inputs: &Matrix, test_labels: &[usize]) -> f64 {
    let hits = (0..test_inputs.rows())
        .filter(|&r| pool.labels[nearest_row(&pool.inputs, test_inputs.row(r))] == test_labels[r])
        .count();
    hits as f64 / test_labels.len().max(1) as f64
}
