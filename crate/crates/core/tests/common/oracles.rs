//! Straightforward reference implementations used as test oracles.

use pruneprobe::tensor::Tensor;

use super::fixtures::random_matrix;

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, j)).collect()
}

/// Full correlation table `r[i][j] = corr(A[:, i], B[:, j])`.
pub fn corr_table(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.cols())
        .map(|i| (0..b.cols()).map(|j| pearson(&column(a, i), &column(b, j))).collect())
        .collect()
}

/// Centered Gram matrix `H X Xᵀ H`.
fn centered_gram(x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
        }
    }
    let row_mean: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let all = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[i][j] = k[i][j] - row_mean[i] - row_mean[j] + all;
        }
    }
    k
}

fn trace_product(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut t = 0.0;
    for i in 0..n {
        for j in 0..n {
            t += a[i][j] * b[j][i];
        }
    }
    t
}

/// HSIC form of linear CKA: `tr(KcLc) / sqrt(tr(KcKc) tr(LcLc))`.
pub fn cka_gram(x: &Tensor, y: &Tensor) -> f64 {
    let k = centered_gram(x);
    let l = centered_gram(y);
    trace_product(&k, &l) / (trace_product(&k, &k) * trace_product(&l, &l)).sqrt()
}

/// Random `n × n` orthogonal matrix by Gram-Schmidt.
pub fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    let m = random_matrix(n, n, seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..n {
        let mut v = column(&m, j);
        for u in &cols {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        cols.push(v);
    }
    let mut data = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            data[i * n + j] = c[i];
        }
    }
    Tensor::matrix(n, n, data).unwrap()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.get(i, t) * b.get(t, j)).sum();
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

pub fn permute_columns(a: &Tensor, perm: &[usize]) -> Tensor {
    let (n, p) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for (j, &src) in perm.iter().enumerate() {
            out[i * p + j] = a.get(i, src);
        }
    }
    Tensor::matrix(n, p, out).unwrap()
}
