use nalgebra::DMatrix;

use super::SparseMatrix;

/// Above this many columns the dense rank check is skipped.
pub const RANK_CHECK_MAX_COLS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dependency {
    /// Column that is (numerically) a combination of others.
    pub column: String,
    /// Columns it depends on, with coefficients.
    pub on: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RankReport {
    FullRank,
    Deficient { rank: usize, dependencies: Vec<Dependency> },
    Skipped { n_cols: usize },
}

/// Column-pivoted QR of `X`; each dropped column is expressed in terms of the kept ones.
pub fn check_rank(x: &SparseMatrix, names: &[String]) -> RankReport {
    let p = x.n_cols();
    if p == 0 {
        return RankReport::FullRank;
    }
    if p > RANK_CHECK_MAX_COLS {
        return RankReport::Skipped { n_cols: p };
    }
    let dense = x.to_dense();
    let scale = dense.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let qr = dense.clone().col_piv_qr();
    let r = qr.r();
    let tol = 1e-9 * scale * (dense.nrows().max(p) as f64);
    let rank = (0..r.nrows().min(p)).filter(|&i| r[(i, i)].abs() > tol).count();
    if rank == p {
        return RankReport::FullRank;
    }

    // Recover the pivot order by permuting column indices as the decomposition did.
    let mut order = DMatrix::from_fn(1, p, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let perm: Vec<usize> = order.iter().map(|v| *v as usize).collect();
    let kept = &perm[..rank];
    let basis = DMatrix::from_fn(dense.nrows(), rank, |i, k| dense[(i, kept[k])]);
    let dependencies = perm[rank..]
        .iter()
        .map(|&c| {
            let target = dense.column(c).into_owned();
            let coef = basis
                .clone()
                .svd(true, true)
                .solve(&target, 1e-12)
                .unwrap_or_else(|_| nalgebra::DVector::zeros(rank));
            let mut on: Vec<(String, f64)> = kept
                .iter()
                .zip(coef.iter())
                .filter(|(_, v)| v.abs() > 1e-8)
                .map(|(&k, &v)| (names[k].clone(), v))
                .collect();
            on.sort_by(|a, b| a.0.cmp(&b.0));
            Dependency { column: names[c].clone(), on }
        })
        .collect();
    RankReport::Deficient { rank, dependencies }
}
