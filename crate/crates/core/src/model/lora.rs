use std::borrow::Cow;

use ndarray::Array2;

use super::{Mat, ModelConfig, Params, Real};
use crate::error::{Error, Result};
use crate::rng;

/// Low-rank delta for one `out × in` matrix: `W + (alpha / rank) · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
}

/// Adapters for every attention and MLP matrix of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters<T> {
    pub rank: usize,
    pub alpha: f64,
    /// `pairs[block][Mat index]`, in `Mat::ALL` order.
    pub pairs: Vec<Vec<LoraPair<T>>>,
}

/// Returns `w + (alpha / rank) · b · a`.
pub fn apply_lora<T: Real>(w: &Array2<T>, a: &Array2<T>, b: &Array2<T>, rank: usize, alpha: f64) -> Result<Array2<T>> {
    let (out, inp) = w.dim();
    if rank == 0 || a.dim() != (rank, inp) || b.dim() != (out, rank) {
        return Err(Error::Shape(format!(
            "lora: W {:?}, A {:?}, B {:?}, rank {rank}",
            w.dim(),
            a.dim(),
            b.dim()
        )));
    }
    let mut merged = w.clone();
    ndarray::linalg::general_mat_mul(T::lit(alpha / rank as f64), b, a, T::one(), &mut merged);
    Ok(merged)
}

impl<T: Real> LoraAdapters<T> {
    /// `A ~ N(0, 0.02²)`, `B = 0`, so the adapted network starts equal to the base.
    pub fn init(params: &Params<T>, rank: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0x10ba]);
        let pairs = params
            .blocks
            .iter()
            .map(|blk| {
                Mat::ALL
                    .iter()
                    .map(|&m| {
                        let (out, inp) = blk.mat(m).dim();
                        let mut a = Array2::zeros((rank, inp));
                        fill_normal(&mut a, &mut rng);
                        LoraPair { a, b: Array2::zeros((out, rank)) }
                    })
                    .collect()
            })
            .collect();
        Self { rank, alpha, pairs }
    }

    pub fn scale(&self) -> T {
        T::lit(self.alpha / self.rank as f64)
    }

    pub fn pair(&self, block: usize, m: Mat) -> &LoraPair<T> {
        &self.pairs[block][Mat::ALL.iter().position(|&x| x == m).expect("known matrix")]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<T>)> {
        let mut v = Vec::new();
        for (i, blk) in self.pairs.iter().enumerate() {
            for (m, p) in Mat::ALL.iter().zip(blk) {
                v.push((format!("lora.{i}.{}.a", m.name()), &p.a));
                v.push((format!("lora.{i}.{}.b", m.name()), &p.b));
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<T>)> {
        let mut v = Vec::new();
        for (i, blk) in self.pairs.iter_mut().enumerate() {
            for (m, p) in Mat::ALL.iter().zip(blk.iter_mut()) {
                v.push((format!("lora.{i}.{}.a", m.name()), &mut p.a));
                v.push((format!("lora.{i}.{}.b", m.name()), &mut p.b));
            }
        }
        v
    }

    pub fn cast<U: Real>(&self) -> LoraAdapters<U> {
        let conv = |a: &Array2<T>| a.mapv(|x| U::lit(x.as_f64()));
        LoraAdapters {
            rank: self.rank,
            alpha: self.alpha,
            pairs: self
                .pairs
                .iter()
                .map(|blk| blk.iter().map(|p| LoraPair { a: conv(&p.a), b: conv(&p.b) }).collect())
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Params::<T>::zeros(cfg);
        if self.pairs.len() != cfg.blocks {
            return Err(Error::format("lora.blocks", format!("{} != {}", self.pairs.len(), cfg.blocks)));
        }
        for (i, blk) in self.pairs.iter().enumerate() {
            for (m, p) in Mat::ALL.iter().zip(blk) {
                let (out, inp) = reference.blocks[i].mat(*m).dim();
                if p.a.dim() != (self.rank, inp) || p.b.dim() != (out, self.rank) {
                    return Err(Error::format(format!("lora.{i}.{}", m.name()), "shape mismatch"));
                }
            }
        }
        Ok(())
    }

    /// Merged weight for `(block, m)`, borrowing the base matrix untouched.
    pub(crate) fn merged<'a>(&self, base: &'a Params<T>, block: usize, m: Mat) -> Cow<'a, Array2<T>> {
        let p = self.pair(block, m);
        let w = base.blocks[block].mat(m);
        Cow::Owned(apply_lora(w, &p.a, &p.b, self.rank, self.alpha).expect("adapter shapes checked"))
    }

    /// Chain rule from a merged-weight gradient to the adapter factors.
    pub(crate) fn grads_from_merged(&self, block: usize, m: Mat, d_w: &Array2<T>, out: &mut Self) {
        let p = self.pair(block, m);
        let s = self.scale();
        let idx = Mat::ALL.iter().position(|&x| x == m).expect("known matrix");
        let g = &mut out.pairs[block][idx];
        // dB = s · dW · Aᵀ,  dA = s · Bᵀ · dW
        ndarray::linalg::general_mat_mul(s, d_w, &p.a.t(), T::one(), &mut g.b);
        ndarray::linalg::general_mat_mul(s, &p.b.t(), d_w, T::one(), &mut g.a);
    }
}

fn fill_normal<T: Real>(t: &mut Array2<T>, rng: &mut rng::Rng) {
    for x in t.iter_mut() {
        *x = T::lit(0.02 * rng::normal(rng));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_b_leaves_weight_unchanged() {
        let w = array![[1.0, 2.0], [3.0, 4.0]];
        let a = array![[0.5, -1.0]];
        let b = Array2::<f64>::zeros((2, 1));
        assert_eq!(apply_lora(&w, &a, &b, 1, 1.0).unwrap(), w);
    }

    #[test]
    fn rank_one_update_by_hand() {
        let w = array![[1.0, 2.0, 0.0], [3.0, 4.0, 1.0]];
        let e = array![[1.0, 0.0, 2.0]];
        let f = array![[3.0], [-1.0]];
        let m = apply_lora(&w, &e, &f, 1, 1.0).unwrap();
        // W[0][2] + f0 * e2 = 0 + 3 * 2
        assert_eq!(m[[0, 2]], 6.0);
        // W[1][0] + f1 * e0 = 3 - 1
        assert_eq!(m[[1, 0]], 2.0);
        let mut expected = w.clone();
        for i in 0..2 {
            for j in 0..3 {
                expected[[i, j]] += f[[i, 0]] * e[[0, j]];
            }
        }
        assert_eq!(m, expected);
    }

    #[test]
    fn doubling_alpha_doubles_delta_only() {
        let w = array![[1.0, -2.0], [0.5, 4.0]];
        let a = array![[0.25, -1.0], [1.0, 2.0]];
        let b = array![[1.0, 0.5], [-2.0, 3.0]];
        let d1 = apply_lora(&w, &a, &b, 2, 1.0).unwrap() - &w;
        let d2 = apply_lora(&w, &a, &b, 2, 2.0).unwrap() - &w;
        assert_eq!(d2, d1 * 2.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = Array2::<f64>::zeros((2, 3));
        let a = Array2::<f64>::zeros((1, 2));
        let b = Array2::<f64>::zeros((2, 1));
        assert!(matches!(apply_lora(&w, &a, &b, 1, 1.0), Err(Error::Shape(_))));
    }
}
