//! Piecewise-linear càdlàg paths on a finite node set.
//!
//! Between consecutive nodes `t_k < t_{k+1}` the path moves linearly from the
//! value at `t_k` to the left limit at `t_{k+1}`; jumps happen only at nodes.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::levy::{LevyCharacteristics, LevyPath};

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    times: Vec<f64>,
    values: Vec<DVector<f64>>,
    left_limits: Vec<DVector<f64>>,
}

impl PiecewisePath {
    /// `left_limits[0]` is ignored and replaced by `values[0]`.
    pub fn new(times: Vec<f64>, values: Vec<DVector<f64>>, mut left_limits: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || values.len() != times.len() || left_limits.len() != times.len() {
            return Err(Error::Contract("path needs equally many times, values and left limits".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("path times must be strictly increasing".into()));
        }
        let dim = values[0].len();
        for v in values.iter().chain(&left_limits) {
            check_dim(dim, v.len())?;
        }
        left_limits[0] = values[0].clone();
        Ok(Self { times, values, left_limits })
    }

    /// A continuous path through the given node values.
    pub fn continuous(times: Vec<f64>, values: Vec<DVector<f64>>) -> Result<Self> {
        let left = values.clone();
        Self::new(times, values, left)
    }

    /// `t ↦ B·L_t` on the effective grid of `path`.
    pub fn from_levy(path: &LevyPath, chars: &LevyCharacteristics, b: &DMatrix<f64>) -> Result<Self> {
        check_dim(chars.dim(), b.ncols())?;
        let times = path.effective_times();
        let mut values = Vec::with_capacity(times.len());
        let mut left = Vec::with_capacity(times.len());
        for &t in &times {
            values.push(b * path.evaluate(chars, t)?.as_vector());
            left.push(b * path.evaluate_left_limit(chars, t)?.as_vector());
        }
        Self::new(times, values, left)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn left_limits(&self) -> &[DVector<f64>] {
        &self.left_limits
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Nodes where the path jumps.
    pub fn jump_nodes(&self) -> Vec<usize> {
        (1..self.times.len()).filter(|&k| self.values[k] != self.left_limits[k]).collect()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(self.start()..=self.horizon()).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon() });
        }
        Ok(())
    }

    /// Right-continuous value at `t`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check_time(t)?;
        let k = self.times.partition_point(|&s| s <= t) - 1;
        Ok(self.interpolate(k, t))
    }

    /// Left limit at `t` (the value itself at the first node).
    pub fn eval_left(&self, t: f64) -> Result<DVector<f64>> {
        self.check_time(t)?;
        let k = self.times.partition_point(|&s| s < t);
        if k < self.times.len() && self.times[k] == t {
            return Ok(self.left_limits[k].clone());
        }
        Ok(self.interpolate(k - 1, t))
    }

    /// Value on the closed cell `[t_k, t_{k+1}]` of the linear piece
    /// starting at node `k`.
    pub fn interpolate(&self, k: usize, t: f64) -> DVector<f64> {
        if k + 1 >= self.times.len() || t == self.times[k] {
            return self.values[k].clone();
        }
        let (a, b) = (self.times[k], self.times[k + 1]);
        let w = (t - a) / (b - a);
        &self.values[k] * (1.0 - w) + &self.left_limits[k + 1] * w
    }

    /// `t ↦ M·x_t`.
    pub fn map(&self, m: &DMatrix<f64>) -> Result<Self> {
        check_dim(self.dim(), m.ncols())?;
        Ok(Self {
            times: self.times.clone(),
            values: self.values.iter().map(|v| m * v).collect(),
            left_limits: self.left_limits.iter().map(|v| m * v).collect(),
        })
    }

    /// `a·x + b·y` for paths on the same nodes.
    pub fn combine(&self, a: f64, other: &PiecewisePath, b: f64) -> Result<Self> {
        if self.times != other.times {
            return Err(Error::Contract("paths must share their nodes".into()));
        }
        check_dim(self.dim(), other.dim())?;
        let lin = |x: &[DVector<f64>], y: &[DVector<f64>]| -> Vec<DVector<f64>> {
            x.iter().zip(y).map(|(u, v)| u * a + v * b).collect()
        };
        Ok(Self {
            times: self.times.clone(),
            values: lin(&self.values, &other.values),
            left_limits: lin(&self.left_limits, &other.left_limits),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn cadlag_evaluation() {
        let p = PiecewisePath::new(vec![0.0, 1.0, 2.0], vec![v(0.0), v(5.0), v(5.0)], vec![v(9.0), v(1.0), v(5.0)])
            .unwrap();
        assert_eq!(p.eval(0.5).unwrap()[0], 0.5);
        assert_eq!(p.eval(1.0).unwrap()[0], 5.0);
        assert_eq!(p.eval_left(1.0).unwrap()[0], 1.0);
        assert_eq!(p.eval_left(0.0).unwrap()[0], 0.0);
        assert_eq!(p.jump_nodes(), vec![1]);
        assert!(p.eval(2.5).is_err());
    }

    #[test]
    fn rejects_bad_nodes() {
        assert!(PiecewisePath::continuous(vec![0.0, 0.0], vec![v(0.0), v(1.0)]).is_err());
        assert!(PiecewisePath::continuous(vec![0.0], vec![]).is_err());
    }
}
