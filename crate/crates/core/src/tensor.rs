//! Dense row-major `f64` tensors and the deterministic kernels every
//! attention variant is built from.
//!
//! These kernels are plain functions over immutable values. The
//! differentiable versions live on [`crate::tape::Tape`] and call into here
//! for their forward passes.

use serde::{Deserialize, Serialize};

use crate::error::{MgkError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MgkError::Contract(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::SplitMix64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(MgkError::Contract(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(MgkError::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Largest elementwise absolute difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
    }

    /// Rows rescaled to unit Euclidean norm (zero rows are left alone).
    pub fn normalize_rows(&self) -> Self {
        let mut out = self.clone();
        let c = self.cols();
        for row in out.data.chunks_mut(c.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }
}

/// Boolean keep-mask over an `m×n` score matrix. `true` means attendable.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(MgkError::Contract(format!(
                "mask of {rows}x{cols} needs {} flags, got {}",
                rows * cols,
                keep.len()
            )));
        }
        Ok(Self { rows, cols, keep })
    }

    /// Lower-triangular-plus-diagonal mask: position `i` sees `j <= i`.
    pub fn causal(n: usize) -> Self {
        let keep = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Self {
            rows: n,
            cols: n,
            keep,
        }
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(MgkError::Dimension {
            op,
            left: t.shape.clone(),
            right: vec![],
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix("matmul", a)?;
    let (k2, n) = expect_matrix("matmul", b)?;
    if k != k2 {
        return Err(MgkError::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix("matmul_nt", a)?;
    let (n, k2) = expect_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(MgkError::Dimension {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = expect_matrix("matmul_tn", a)?;
    let (k2, n) = expect_matrix("matmul_tn", b)?;
    if k != k2 {
        return Err(MgkError::Dimension {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = expect_matrix("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Row-wise softmax, stabilized by subtracting each row's (unmasked) max.
/// Masked entries come out exactly zero and take no part in the normalizer.
pub fn softmax_rows(s: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let (m, n) = expect_matrix("softmax_rows", s)?;
    if let Some(mask) = mask {
        if mask.shape() != [m, n] {
            return Err(MgkError::Dimension {
                op: "softmax_rows",
                left: s.shape.clone(),
                right: mask.shape().to_vec(),
            });
        }
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &s.data[i * n..(i + 1) * n];
        let keep = |j: usize| mask.map_or(true, |mk| mk.keeps(i, j));
        let max = (0..n)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(MgkError::DegenerateRow { row: i });
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if keep(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        orow.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Squared Euclidean distances between every row of `q` and every row of `k`.
pub fn pairwise_sqdist(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, d) = expect_matrix("pairwise_sqdist", q)?;
    let (n2, d2) = expect_matrix("pairwise_sqdist", k)?;
    if d != d2 {
        return Err(MgkError::Dimension {
            op: "pairwise_sqdist",
            left: q.shape.clone(),
            right: k.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * n2];
    for i in 0..n {
        let qi = &q.data[i * d..(i + 1) * d];
        for j in 0..n2 {
            let kj = &k.data[j * d..(j + 1) * d];
            out[i * n2 + j] = qi
                .iter()
                .zip(kj)
                .map(|(a, b)| {
                    let diff = a - b;
                    diff * diff
                })
                .sum();
        }
    }
    Ok(Tensor {
        shape: vec![n, n2],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let p = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap();
        let expected = Tensor::from_rows(&[[5.0, 6.0], [0.0, 0.0]]).unwrap();
        assert_eq!(matmul(&p, &y).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SplitMix64::new(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)).unwrap() < 1e-14);
        let nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        assert!(nt.max_abs_diff(&got).unwrap() < 1e-14);
        let tn = matmul_tn(&transpose(&a).unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&got).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, MgkError::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor::from_rows(&[
            [0.0, 0.0],
            [std::f64::consts::LN_2, 0.0],
            [1000.0, 1000.0],
        ])
        .unwrap();
        let a = softmax_rows(&s, None).unwrap();
        assert_eq!(a.row(0), &[0.5, 0.5]);
        assert!((a.at(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.at(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.row(2), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_masking() {
        let s = Tensor::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let a = softmax_rows(&s, Some(&Mask::causal(3))).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(a.at(1, 2), 0.0);
        let dead = Mask::new(1, 2, vec![false, false]).unwrap();
        let err = softmax_rows(&Tensor::zeros(&[1, 2]), Some(&dead)).unwrap_err();
        assert!(matches!(err, MgkError::DegenerateRow { row: 0 }));
    }

    #[test]
    fn sqdist_examples() {
        let q = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_sqdist(&q, &k).unwrap().data(), &[25.0]);

        let mut rng = SplitMix64::new(11);
        let q = random(&mut rng, 4, 3);
        let k = random(&mut rng, 5, 3);
        let d = pairwise_sqdist(&q, &k).unwrap();
        // expansion oracle: |q|^2 + |k|^2 - 2 q.k
        for i in 0..4 {
            for j in 0..5 {
                let qq: f64 = q.row(i).iter().map(|v| v * v).sum();
                let kk: f64 = k.row(j).iter().map(|v| v * v).sum();
                let qk: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                assert!((d.at(i, j) - (qq + kk - 2.0 * qk)).abs() < 1e-10);
            }
        }
        let self_d = pairwise_sqdist(&q, &q).unwrap();
        assert!((0..4).all(|i| self_d.at(i, i) == 0.0));
        assert!(pairwise_sqdist(&q, &Tensor::zeros(&[2, 2])).is_err());
    }

    fn int_matrix(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
        (1..=max, 1..=max, 1..=max).prop_flat_map(|(m, k, n)| {
            (
                proptest::collection::vec(-9i32..=9, m * k),
                proptest::collection::vec(-9i32..=9, k * n),
            )
                .prop_map(move |(a, b)| {
                    (
                        Tensor::new(vec![m, k], a.into_iter().map(f64::from).collect()).unwrap(),
                        Tensor::new(vec![k, n], b.into_iter().map(f64::from).collect()).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn matmul_exact_on_integers((a, b) in int_matrix(8)) {
            prop_assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1000.0f64..1000.0, 12)) {
            let s = Tensor::new(vec![3, 4], vals).unwrap();
            let a = softmax_rows(&s, None).unwrap();
            for i in 0..3 {
                let total: f64 = a.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn sqdist_swap_symmetry(
            qv in proptest::collection::vec(-10.0f64..10.0, 6),
            kv in proptest::collection::vec(-10.0f64..10.0, 9),
        ) {
            let q = Tensor::new(vec![2, 3], qv).unwrap();
            let k = Tensor::new(vec![3, 3], kv).unwrap();
            let a = pairwise_sqdist(&q, &k).unwrap();
            let b = transpose(&pairwise_sqdist(&k, &q).unwrap()).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        }
    }
}
