use super::ConnectorError;
use crate::tensor::{self, Real, Tensor};

/// Text-token embedding matrix `V × D` with per-dimension bounds cached for
/// hull checks.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    table: Tensor<T>,
    min: Vec<T>,
    max: Vec<T>,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(table: Tensor<T>) -> Result<Self, ConnectorError> {
        if table.shape().len() != 2 || table.rows() < 2 {
            return Err(ConnectorError::Config(format!(
                "embedding table needs at least two rows, got shape {:?}",
                table.shape()
            )));
        }
        table.check_finite("embedding table")?;
        let d = table.cols();
        let mut min = vec![T::infinity(); d];
        let mut max = vec![T::neg_infinity(); d];
        for r in 0..table.rows() {
            for (j, &v) in table.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Ok(EmbeddingTable { table, min, max })
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn min(&self) -> &[T] {
        &self.min
    }

    pub fn max(&self) -> &[T] {
        &self.max
    }

    /// Largest amount by which any coordinate of `points` leaves the
    /// per-dimension `[min, max]` box; zero when every row is inside.
    pub fn bound_violation(&self, points: &Tensor<T>) -> f64 {
        let d = self.width();
        points
            .data()
            .chunks(d)
            .flat_map(|row| {
                row.iter().enumerate().map(|(j, &v)| {
                    let below = (self.min[j] - v).as_f64();
                    let above = (v - self.max[j]).as_f64();
                    below.max(above).max(0.0)
                })
            })
            .fold(0.0, f64::max)
    }

    /// Largest row norm `max_v ‖E[v]‖₂`.
    pub fn max_row_norm(&self) -> f64 {
        (0..self.vocab())
            .map(|r| self.table.row(r).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Row-wise convex combination `P·E`: one `D`-vector per row of `probs`.
pub fn weighted_sum<T: Real>(probs: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>, ConnectorError> {
    if probs.cols() != table.rows() {
        return Err(ConnectorError::Config(format!(
            "distribution over {} tokens cannot weight a table of {} rows",
            probs.cols(),
            table.rows()
        )));
    }
    Ok(tensor::matmul(probs, table)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_hand_case() {
        let p = Tensor::<f64>::from_rows(&[&[0.5, 0.25, 0.25]]);
        let e = Tensor::<f64>::from_rows(&[&[2.0, 0.0], &[0.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(weighted_sum(&p, &e).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn bounds_are_cached() {
        let e = EmbeddingTable::new(Tensor::<f64>::from_rows(&[&[2.0, -1.0], &[0.0, 4.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(e.min(), &[0.0, -1.0]);
        assert_eq!(e.max(), &[2.0, 4.0]);
        let inside = Tensor::<f64>::from_rows(&[&[1.0, 1.0]]);
        assert_eq!(e.bound_violation(&inside), 0.0);
        let outside = Tensor::<f64>::from_rows(&[&[2.5, 1.0]]);
        assert!((e.bound_violation(&outside) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_row_table_is_rejected() {
        assert!(EmbeddingTable::new(Tensor::<f64>::from_rows(&[&[1.0, 2.0]])).is_err());
    }
}
