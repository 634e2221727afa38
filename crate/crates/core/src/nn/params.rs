use crate::error::{Error, Result};
use crate::nn::Matrix;

/// A container of named learnable matrices.
///
/// Gradients and optimizer moments reuse the parameter type itself, so a
/// gradient always mirrors the structure it differentiates. Names are stable
/// and appear verbatim in checkpoint files.
pub trait Parameters: Clone {
    fn named(&self) -> Vec<(String, &Matrix)>;

    /// Same order as [`Parameters::named`].
    fn matrices_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for m in out.matrices_mut() {
            m.as_mut_slice().fill(0.0);
        }
        out
    }

    fn num_values(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, m) in self.named() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Overwrites every value from a flat slice laid out as [`Parameters::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_values();
        if flat.len() != expected {
            return Err(Error::Shape {
                op: "assign_flat",
                left: (expected, 1),
                right: (flat.len(), 1),
            });
        }
        let mut start = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[start..start + n]);
            start += n;
        }
        Ok(())
    }

    /// Checks that names and shapes agree entry by entry.
    fn check_congruent(&self, other: &Self) -> Result<()> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            return Err(Error::config(format!(
                "parameter sets differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
            if na != nb || ma.shape() != mb.shape() {
                return Err(Error::config(format!(
                    "parameter mismatch: {na} {:?} vs {nb} {:?}",
                    ma.shape(),
                    mb.shape()
                )));
            }
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    /// Elementwise `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        let src: Vec<Matrix> = other.named().into_iter().map(|(_, m)| m.clone()).collect();
        let dst = self.matrices_mut();
        if dst.len() != src.len() {
            return Err(Error::config("parameter sets differ in length"));
        }
        for (d, s) in dst.into_iter().zip(&src) {
            d.add_scaled(s, scale)?;
        }
        Ok(())
    }
}

/// Prefixes every name of `inner` with `prefix.`.
pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Matrix)>) -> Vec<(String, &'a Matrix)> {
    inner.into_iter().map(|(n, m)| (format!("{prefix}.{n}"), m)).collect()
}
