use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// N×D feature matrix with dense class labels in `[0, num_classes)`.
///
/// Immutable after construction; every constructor validates the
/// invariants (non-empty, finite, labels in range).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    features: Matrix,
    labels: Vec<u32>,
    num_classes: u32,
}

impl FeatureSet {
    pub fn new(features: Matrix, labels: Vec<u32>, num_classes: u32) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::invalid("feature set needs N >= 1 and D >= 1"));
        }
        if labels.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                context: "FeatureSet labels",
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be >= 1"));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} at row {i} outside [0, {num_classes})"
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureSet {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx`, in the given order. Class count is preserved.
    pub fn subset(&self, idx: &[usize]) -> Result<FeatureSet> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        FeatureSet::new(self.features.select_rows(idx), labels, self.num_classes)
    }

    /// Number of rows carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_label() {
        let m = Matrix::zeros(2, 3);
        assert!(FeatureSet::new(m, vec![0, 2], 2).is_err());
    }

    #[test]
    fn rejects_non_finite_feature() {
        let m = Matrix::from_rows(&[vec![1.0, f64::INFINITY]]).unwrap();
        assert!(matches!(
            FeatureSet::new(m, vec![0], 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rejects_empty() {
        assert!(FeatureSet::new(Matrix::zeros(0, 3), vec![], 1).is_err());
    }
}
