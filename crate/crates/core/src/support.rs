//! Class-balanced support sampling and label encoding.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::Matrix;
use crate::error::{PawsError, Result};
use crate::views::{augment_global, AugmentConfig};

/// Labeled samples grouped by class.
#[derive(Clone, Debug)]
pub struct LabeledPool {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl LabeledPool {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(PawsError::Shape(format!("{} labels for {} inputs", labels.len(), inputs.rows())));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(PawsError::Validation(format!("label {y} at row {i} is >= {num_classes}")));
            }
            by_class[y].push(i);
        }
        Ok(Self { inputs, labels, num_classes, by_class })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportDraw {
    /// Sample indices grouped by class, `images_per_class` per class.
    pub indices: Vec<usize>,
    /// Classes in the order their samples appear in `indices`.
    pub classes: Vec<usize>,
    pub images_per_class: usize,
}

/// Picks `classes_per_batch` classes uniformly without replacement, then
/// `images_per_class` distinct samples of each.
pub fn sample_support<R: Rng + ?Sized>(
    pool: &LabeledPool,
    classes_per_batch: usize,
    images_per_class: usize,
    rng: &mut R,
) -> Result<SupportDraw> {
    if images_per_class == 0 || classes_per_batch == 0 {
        return Err(PawsError::Config("support needs at least one class and one image per class".into()));
    }
    if classes_per_batch > pool.num_classes {
        return Err(PawsError::Config(format!("cannot sample {classes_per_batch} classes from {}", pool.num_classes)));
    }
    if let Some(c) = (0..pool.num_classes).find(|&c| pool.by_class[c].len() < images_per_class) {
        return Err(PawsError::Config(format!(
            "class {c} has {} labeled samples, fewer than {images_per_class} per support class",
            pool.by_class[c].len()
        )));
    }
    let mut classes = sample(rng, pool.num_classes, classes_per_batch).into_vec();
    if classes_per_batch == pool.num_classes {
        classes.sort_unstable();
    }
    let mut indices = Vec::with_capacity(classes_per_batch * images_per_class);
    for &c in &classes {
        let members = &pool.by_class[c];
        indices.extend(sample(rng, members.len(), images_per_class).into_iter().map(|i| members[i]));
    }
    Ok(SupportDraw { indices, classes, images_per_class })
}

/// Smoothed one-hot rows: `1 − ε + ε/K` on the true class, `ε/K` elsewhere.
pub fn smoothed_labels(labels: &[usize], num_classes: usize, smoothing: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(PawsError::Domain(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    let off = smoothing / num_classes as f64;
    let on = 1.0 - smoothing + off;
    Ok(Matrix::from_fn(labels.len(), num_classes, |i, k| if labels[i] == k { on } else { off }))
}

pub fn encode_labels(draw: &SupportDraw, pool: &LabeledPool, smoothing: f64) -> Result<Matrix> {
    let labels: Vec<usize> = draw.indices.iter().map(|&i| pool.labels[i]).collect();
    smoothed_labels(&labels, pool.num_classes, smoothing)
}

/// `views_per_support` augmented copies of the drawn inputs, stacked copy by
/// copy, with the label matrix repeated in the same order.
pub fn support_views<R: Rng + ?Sized>(
    pool: &LabeledPool,
    draw: &SupportDraw,
    labels: &Matrix,
    augment: &AugmentConfig,
    views_per_support: usize,
    rng: &mut R,
) -> Result<(Matrix, Matrix)> {
    if views_per_support == 0 {
        return Err(PawsError::Config("views_per_support must be >= 1".into()));
    }
    let base = pool.inputs.select_rows(&draw.indices);
    let copies: Vec<Matrix> = (0..views_per_support).map(|_| augment_global(&base, augment, rng)).collect();
    let refs: Vec<&Matrix> = copies.iter().collect();
    let label_refs: Vec<&Matrix> = (0..views_per_support).map(|_| labels).collect();
    Ok((Matrix::vstack(&refs)?, Matrix::vstack(&label_refs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(per_class: usize, k: usize) -> LabeledPool {
        let labels: Vec<usize> = (0..per_class * k).map(|i| i % k).collect();
        let inputs = Matrix::from_fn(labels.len(), 3, |i, j| (i * 3 + j) as f64);
        LabeledPool::new(inputs, labels, k).unwrap()
    }

    #[test]
    fn exhaustive_draw_is_a_permutation() {
        let p = pool(5, 4);
        let d = sample_support(&p, 4, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut idx = d.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert_eq!(d.classes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn per_class_counts_and_uniqueness() {
        let p = pool(10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = sample_support(&p, 3, 4, &mut rng).unwrap();
            assert_eq!(d.indices.len(), 12);
            for &c in &d.classes {
                assert_eq!(d.indices.iter().filter(|&&i| p.labels[i] == c).count(), 4);
            }
            let mut u = d.indices.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 12);
        }
    }

    #[test]
    fn small_class_is_named() {
        let labels = vec![0, 0, 0, 1, 2, 2, 2];
        let p = LabeledPool::new(Matrix::zeros(7, 2), labels, 3).unwrap();
        let err = sample_support(&p, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(&err, PawsError::Config(m) if m.contains("class 1")), "{err}");
    }

    #[test]
    fn label_encoding() {
        let hard = smoothed_labels(&[2, 0], 3, 0.0).unwrap();
        assert_eq!(hard, Matrix::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]));
        let soft = smoothed_labels(&[1], 4, 0.1).unwrap();
        assert!((soft.get(0, 1) - 0.925).abs() < 1e-15);
        assert!((soft.get(0, 0) - 0.025).abs() < 1e-15);
        for eps in [0.0, 0.05, 0.1, 0.3, 0.9] {
            for s in smoothed_labels(&[0, 1, 2], 3, eps).unwrap().row_sums() {
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        assert!(matches!(smoothed_labels(&[0], 2, 1.0), Err(PawsError::Domain(_))));
        assert!(matches!(smoothed_labels(&[0], 2, -0.1), Err(PawsError::Domain(_))));
    }

    #[test]
    fn support_view_replication() {
        let p = pool(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = sample_support(&p, 3, 2, &mut rng).unwrap();
        let labels = encode_labels(&d, &p, 0.1).unwrap();
        let (x, y) = support_views(&p, &d, &labels, &AugmentConfig::identity(), 1, &mut rng).unwrap();
        assert_eq!(x, p.inputs.select_rows(&d.indices));
        assert_eq!(y, labels);
        let (x2, y2) = support_views(&p, &d, &labels, &AugmentConfig::default(), 2, &mut rng).unwrap();
        assert_eq!(x2.rows(), 12);
        assert_eq!(y2.slice_rows(0, 6), labels);
        assert_eq!(y2.slice_rows(6, 12), labels);
        for c in 0..3 {
            assert_eq!((0..12).filter(|&r| y2.argmax_row(r) == c).count(), 4);
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let p = pool(10, 4);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_support(&p, 2, 3, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
