use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Tolerance on `||x_i||_2 = 1`.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Binary-labelled samples on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    /// Rows of `inputs` must be unit vectors and labels must be `±1`.
    pub fn new(inputs: Array2<f64>, labels: Vec<f64>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if inputs.ncols() == 0 {
            return Err(Error::Input("inputs have zero dimension".into()));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::Input(format!("label {i} is {}, expected ±1", labels[i])));
        }
        for (i, row) in inputs.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("input {i} has non-finite entries")));
            }
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Input(format!("input {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Input("rows have differing lengths".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let inputs = Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| Error::Input(e.to_string()))?;
        Self::new(inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Same inputs with every label negated.
    pub fn flipped(&self) -> Self {
        Self {
            inputs: self.inputs.clone(),
            labels: self.labels.iter().map(|y| -y).collect(),
        }
    }

    /// Concatenation of two datasets of equal dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Input("cannot concatenate datasets of different dimension".into()));
        }
        let inputs = ndarray::concatenate(Axis(0), &[self.inputs.view(), other.inputs.view()])
            .map_err(|e| Error::Input(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self { inputs, labels })
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Input("dataset is empty".into()))
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_unit_rows_and_bad_labels() {
        assert!(Dataset::from_rows(&[vec![1.0, 1.0]], vec![1.0]).is_err());
        assert!(Dataset::from_rows(&[vec![1.0, 0.0]], vec![0.5]).is_err());
        assert!(Dataset::from_rows(&[vec![1.0, 0.0]], vec![1.0, -1.0]).is_err());
        assert!(Dataset::from_rows(&[vec![0.6, 0.8]], vec![-1.0]).is_ok());
    }

    #[test]
    fn subset_and_concat() {
        let s = Dataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]], vec![1.0, -1.0, 1.0]).unwrap();
        let sub = s.subset(&[2, 0]);
        assert_eq!(sub.labels(), &[1.0, 1.0]);
        assert_eq!(sub.input(0).to_vec(), vec![0.6, 0.8]);
        let both = s.concat(&sub).unwrap();
        assert_eq!(both.len(), 5);
        assert_eq!(s.flipped().labels(), &[-1.0, 1.0, -1.0]);
    }
}
