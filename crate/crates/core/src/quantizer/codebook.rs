use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Element, Tensor};
use crate::error::{Error, Result};

/// `K×D` table of code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<F = f32> {
    codes: Tensor<F>,
}

impl<F: Element> Codebook<F> {
    pub fn new(codes: Tensor<F>) -> Result<Self> {
        if codes.rank() != 2 {
            return Err(Error::invalid("codebook", format!("expected K×D, got {:?}", codes.shape())));
        }
        if codes.rows() == 0 {
            return Err(Error::EmptyCodebook);
        }
        if !codes.is_finite() {
            return Err(Error::invalid("codebook", "non-finite entry"));
        }
        Ok(Self { codes })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        Self::new(Tensor::<f64>::from_rows(rows)?.cast())
    }

    /// i.i.d. `N(0, 1/√D)` entries.
    pub fn random<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyCodebook);
        }
        let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let data = (0..size * dim).map(|_| F::of(dist.sample(rng))).collect();
        Self::new(Tensor::new(vec![size, dim], data)?)
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn code(&self, k: usize) -> &[F] {
        self.codes.row(k)
    }

    pub fn codes(&self) -> &Tensor<F> {
        &self.codes
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.codes
    }

    pub fn has_duplicate_rows(&self) -> bool {
        (0..self.size()).any(|i| (i + 1..self.size()).any(|j| self.code(i) == self.code(j)))
    }

    /// Index and row of the code closest to `e`; ties go to the lowest index.
    pub fn nearest(&self, e: &[F]) -> Result<(usize, &[F])> {
        let k = nearest_index(self.codes.data(), self.size(), self.dim(), e)?;
        Ok((k, self.code(k)))
    }
}

/// Free-function form of [`Codebook::nearest`].
pub fn nearest_code<'a, F: Element>(cb: &'a Codebook<F>, e: &[F]) -> Result<(usize, &'a [F])> {
    cb.nearest(e)
}

/// Brute-force argmin of squared distance over the rows of a flat `k×d`
/// table, accumulated in `f64`.
pub(crate) fn nearest_index<F: Element>(codes: &[F], k: usize, d: usize, e: &[F]) -> Result<usize> {
    if k == 0 {
        return Err(Error::EmptyCodebook);
    }
    if e.len() != d {
        return Err(Error::shape("nearest_code", &[k, d], &[e.len()]));
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in codes.chunks_exact(d).enumerate() {
        let dist: f64 = row
            .iter()
            .zip(e)
            .map(|(c, x)| {
                let diff = c.as_f64() - x.as_f64();
                diff * diff
            })
            .sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_match_and_simple_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb: Codebook = Codebook::random(8, 6, &mut rng).unwrap();
        let row3 = cb.code(3).to_vec();
        assert_eq!(cb.nearest(&row3).unwrap().0, 3);

        let cb = Codebook::<f32>::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(nearest_code(&cb, &[0.9, 0.9]).unwrap(), (1, &[1.0f32, 1.0][..]));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = Codebook::<f64>::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(cb.nearest(&[0.0, 0.0]).unwrap().0, 0);
        assert_eq!(cb.nearest(&[1.0, 0.0]).unwrap().0, 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(Codebook::<f32>::from_rows(&[]), Err(Error::EmptyCodebook)));
        let cb = Codebook::<f32>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(cb.nearest(&[0.0]).is_err());
        let bad = Tensor::<f32>::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap();
        assert!(Codebook::new(bad).is_err());
    }

    #[test]
    fn agrees_with_f64_oracle_on_1000_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cb: Codebook = Codebook::random(128, 32, &mut rng).unwrap();
        assert!(!cb.has_duplicate_rows());
        let wide: Vec<Vec<f64>> = (0..cb.size())
            .map(|k| cb.code(k).iter().map(|&v| v as f64).collect())
            .collect();
        let q: Codebook = Codebook::random(1000, 32, &mut rng).unwrap();
        for i in 0..1000 {
            let e = q.code(i);
            let mut oracle = 0;
            let mut best = f64::INFINITY;
            for (k, row) in wide.iter().enumerate() {
                let d: f64 = row.iter().zip(e).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                if d < best {
                    best = d;
                    oracle = k;
                }
            }
            assert_eq!(cb.nearest(e).unwrap().0, oracle);
        }
    }
}
