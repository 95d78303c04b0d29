//! Column-row selection for approximating a matrix product `A B`.
//!
//! Keeping the pairs `(A[:, i], B[i, :])` with the largest norm products is the
//! deterministic analogue of norm-proportional column-row sampling; these
//! helpers measure how close such a subset gets to the exact product.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::linalg::{col_l2_norms, row_l2_norms, Matrix, SeededRng};

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "crs",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// `‖A B - Σ_{i ∈ subset} A[:, i] B[i, :]‖_F`, evaluated as the norm of the
/// dropped terms' sum so that the full subset gives exactly zero.
pub fn crs_error(a: &Matrix, b: &Matrix, subset: &[usize]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.cols();
    let mut kept = vec![false; n];
    for &i in subset {
        if i >= n {
            return Err(Error::Index(format!("subset index {i} out of range for {n} pairs")));
        }
        kept[i] = true;
    }
    let mut rest = Matrix::zeros(a.rows(), b.cols());
    for i in (0..n).filter(|&i| !kept[i]) {
        let bi = b.row(i);
        for r in 0..a.rows() {
            let air = a.get(r, i);
            for (o, &bv) in rest.row_mut(r).iter_mut().zip(bi) {
                *o += air * bv;
            }
        }
    }
    Ok(rest.frobenius_norm())
}

/// Pairs ordered by descending `‖A[:, i]‖₂ ‖B[i, :]‖₂`, ties to the lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct CrsRanking {
    pub order: Vec<usize>,
    pub products: Vec<f64>,
    /// `Σ_i products[i]`.
    pub normalizer: f64,
}

impl CrsRanking {
    /// Sampling probabilities `products / normalizer`; uniform when every
    /// product is zero.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.products.len() as f64;
        if self.normalizer > 0.0 {
            self.products.iter().map(|p| p / self.normalizer).collect()
        } else {
            vec![1.0 / n; self.products.len()]
        }
    }

    pub fn top(&self, k: usize) -> Vec<usize> {
        let mut s = self.order[..k.min(self.order.len())].to_vec();
        s.sort_unstable();
        s
    }
}

pub fn crs_rank_indices(a: &Matrix, b: &Matrix) -> Result<CrsRanking> {
    check_pair(a, b)?;
    let products: Vec<f64> = col_l2_norms(a)
        .into_iter()
        .zip(row_l2_norms(b))
        .map(|(c, r)| c * r)
        .collect();
    let mut order: Vec<usize> = (0..products.len()).collect();
    order.sort_by(|&i, &j| products[j].total_cmp(&products[i]).then(i.cmp(&j)));
    let normalizer = products.iter().sum();
    Ok(CrsRanking {
        order,
        products,
        normalizer,
    })
}

/// Errors of every `k`-subset of `n` pairs, in lexicographic subset order.
pub fn exhaustive_errors(a: &Matrix, b: &Matrix, k: usize) -> Result<Vec<f64>> {
    (0..a.cols()).combinations(k).map(|s| crs_error(a, b, &s)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// A random product instance: `A` is `m x n`, `B` is `n x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrsInstance {
    pub a: Matrix,
    pub b: Matrix,
    pub k: usize,
}

impl CrsInstance {
    /// `n` in `6..=10`, `k` in `1..=3`, outer dimensions in `4..=12`, all
    /// entries standard normal.
    pub fn generate(rng: &mut SeededRng) -> Self {
        Self::generate_with_spread(rng, 0.0)
    }

    /// As [`CrsInstance::generate`], then every column of `A` is scaled by
    /// `exp(spread * z)`, `z` standard normal. `spread = 0` draws no scales.
    pub fn generate_with_spread(rng: &mut SeededRng, spread: f64) -> Self {
        let n = rng.index(6, 11);
        let k = rng.index(1, 4);
        let m = rng.index(4, 13);
        let p = rng.index(4, 13);
        let mut a = rng.normal_matrix(m, n, 1.0);
        let b = rng.normal_matrix(n, p, 1.0);
        if spread != 0.0 {
            for c in 0..n {
                let s = (spread * rng.normal()).exp();
                for r in 0..m {
                    a.set(r, c, a.get(r, c) * s);
                }
            }
        }
        CrsInstance { a, b, k }
    }
}

/// Errors of the competing selections on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CrsTrial {
    pub trial: usize,
    pub k: usize,
    pub norm_product: f64,
    pub uniform_random: f64,
    pub exhaustive_median: f64,
    pub exhaustive_best: f64,
}

impl CrsTrial {
    /// Scores `inst`; the random baseline draws one uniform `k`-subset from `rng`.
    pub fn run(trial: usize, inst: &CrsInstance, rng: &mut SeededRng) -> Result<Self> {
        let n = inst.a.cols();
        if inst.k > n {
            return Err(Error::param(format!("subset size {} exceeds {n} pairs", inst.k)));
        }
        let ranking = crs_rank_indices(&inst.a, &inst.b)?;
        let all = exhaustive_errors(&inst.a, &inst.b, inst.k)?;
        Ok(CrsTrial {
            trial,
            k: inst.k,
            norm_product: crs_error(&inst.a, &inst.b, &ranking.top(inst.k))?,
            uniform_random: crs_error(&inst.a, &inst.b, &rng.subset(n, inst.k))?,
            exhaustive_median: median(&all),
            exhaustive_best: all.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }

    /// `(method, error)` rows in a fixed order.
    pub fn methods(&self) -> [(&'static str, f64); 4] {
        [
            ("norm_product", self.norm_product),
            ("uniform_random", self.uniform_random),
            ("exhaustive_median", self.exhaustive_median),
            ("exhaustive_best", self.exhaustive_best),
        ]
    }
}

/// `count` trials from one seed.
pub fn run_crs_trials(seed: u64, count: usize, spread: f64) -> Result<Vec<CrsTrial>> {
    let mut rng = SeededRng::new(seed);
    (0..count)
        .map(|t| {
            let inst = CrsInstance::generate_with_spread(&mut rng, spread);
            CrsTrial::run(t, &inst, &mut rng)
        })
        .collect()
}

/// Writes `trial,k,method,error`.
pub fn write_crs_csv<W: std::io::Write>(out: W, trials: &[CrsTrial]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "k", "method", "error"])?;
    for t in trials {
        for (method, err) in t.methods() {
            w.write_record([
                t.trial.to_string(),
                t.k.to_string(),
                method.to_string(),
                crate::report::fmt_f64(err),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
