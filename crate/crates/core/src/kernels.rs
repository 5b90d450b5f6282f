//! Reference kernels shared by the model, the quantizer and the shadow path.
//!
//! All kernels are pure and single-threaded. Accumulation order is fixed
//! (row-major, ascending inner index) so identical inputs give bit-identical
//! outputs.

use crate::error::{Error, Result};
use crate::tensor::{check_scale, QTensor, Tensor, QMAX};

/// Epsilon inside the RMSNorm square root.
pub const RMS_EPS: f32 = 1e-6;

/// Rotary frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

/// Upper bound on the int8 matmul inner dimension; keeps the i32 accumulator
/// clear of overflow (127 * 127 * 2^15 < 2^31).
pub const MAX_I8_INNER: usize = 1 << 15;

pub fn matmul_f32(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_f32")?;
    let (k2, n) = b.dims2("matmul_f32")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_f32",
            format!("{m}x{k} times {k2}x{n}"),
        ));
    }
    let mut out = Tensor::zeros(m, n);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    // i-k-j order: every output still sums its k terms in ascending order.
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Int8 x int8 matmul with i32 accumulation, dequantized by `a.scale * b.scale`.
pub fn matmul_i8(a: &QTensor, b: &QTensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_i8")?;
    let (k2, n) = b.dims2("matmul_i8")?;
    if k != k2 {
        return Err(Error::shape("matmul_i8", format!("{m}x{k} times {k2}x{n}")));
    }
    assert!(k <= MAX_I8_INNER, "int8 inner dimension {k} exceeds {MAX_I8_INNER}");
    let (ad, bd) = (a.data(), b.data());
    let scale = a.scale() * b.scale();
    let mut acc = vec![0i32; n];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0);
        for p in 0..k {
            let av = i32::from(ad[i * k + p]);
            if av == 0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * i32::from(bv);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32 * scale));
    }
    Tensor::new(vec![m, n], out)
}

/// Round-half-to-even of `x / s`, clamped to `[-127, 127]`.
pub fn quantize_clamp(x: &Tensor, s: f32) -> Result<QTensor> {
    check_scale(s)?;
    let data = x.data().iter().map(|&v| quantize_value(v, s)).collect();
    QTensor::new(x.shape().to_vec(), data, s)
}

#[inline]
pub fn quantize_value(v: f32, s: f32) -> i8 {
    let q = (v / s).round_ties_even();
    q.clamp(-(QMAX as f32), QMAX as f32) as i8
}

/// Max-min symmetric scale: the largest magnitude maps to 127.
///
/// An all-zero tensor gets scale 1/127 so the result is still a valid `QTensor`.
pub fn symmetric_scale(x: &Tensor) -> f32 {
    let m = x.max_abs();
    if m > 0.0 {
        m / QMAX as f32
    } else {
        1.0 / QMAX as f32
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.dims2("softmax_rows")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Single-head causal attention of `q` against a KV that already holds
/// `mask_offset` earlier positions.
///
/// Query row `r` sits at absolute position `mask_offset + r` and attends to
/// key rows `0..=mask_offset + r`. Rows of `k`/`v` past that are ignored.
pub fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask_offset: usize) -> Result<Tensor> {
    let (sq, d) = q.dims2("causal_attention")?;
    let (kv, dk) = k.dims2("causal_attention")?;
    let (kv2, dv) = v.dims2("causal_attention")?;
    if dk != d || kv2 != kv {
        return Err(Error::shape(
            "causal_attention",
            format!("q {sq}x{d}, k {kv}x{dk}, v {kv2}x{dv}"),
        ));
    }
    if kv < mask_offset + sq {
        return Err(Error::KvTooShort {
            kv_rows: kv,
            needed: mask_offset + sq,
            offset: mask_offset,
            queries: sq,
        });
    }
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let mut out = Tensor::zeros(sq, dv);
    let mut scores = vec![0.0f32; mask_offset + sq];
    for r in 0..sq {
        let visible = mask_offset + r + 1;
        let qrow = q.row(r);
        let s = &mut scores[..visible];
        for (t, sv) in s.iter_mut().enumerate() {
            *sv = dot(qrow, k.row(t)) * inv_sqrt_d;
        }
        softmax_in_place(s);
        let orow = out.row_mut(r);
        for (t, &p) in s.iter().enumerate() {
            for (o, vv) in orow.iter_mut().zip(v.row(t)) {
                *o += p * vv;
            }
        }
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Row-wise RMSNorm with a per-column gain.
pub fn rmsnorm(x: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let (_, cols) = x.dims2("rmsnorm")?;
    if gamma.numel() != cols {
        return Err(Error::shape(
            "rmsnorm",
            format!("gamma has {} entries for {cols} columns", gamma.numel()),
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().fold(0.0f32, |a, v| a + v * v) / cols as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gamma.data()) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

pub fn silu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Rotary embedding over interleaved pairs `(2i, 2i+1)` within each head.
///
/// Row `r` is rotated for absolute position `position_offset + r`, so a chunk
/// rotated at its offset matches the same rows of a full-sequence rotation.
pub fn rope(x: &Tensor, position_offset: usize, head_dim: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2("rope")?;
    if head_dim == 0 || head_dim % 2 != 0 || cols % head_dim != 0 {
        return Err(Error::shape(
            "rope",
            format!("head_dim {head_dim} must be even and divide {cols}"),
        ));
    }
    let half = head_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-((2 * i) as f64) / head_dim as f64))
        .collect();
    let mut out = x.clone();
    for r in 0..rows {
        let pos = (position_offset + r) as f64;
        let trig: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let a = pos * f;
                (a.cos() as f32, a.sin() as f32)
            })
            .collect();
        let row = out.row_mut(r);
        for head in row.chunks_exact_mut(head_dim) {
            for (i, &(c, s)) in trig.iter().enumerate() {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "kernels-test");
        Tensor::from_fn(rows, cols, |_, _| g.sample::<f32, _>(StandardNormal))
    }

    /// Naive triple loop, f64 accumulation; independent of `matmul_f32`.
    fn oracle_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.rows(), a.cols());
        let n = b.cols();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += f64::from(a.get(i, p)) * f64::from(b.get(p, j));
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_cases() {
        let b = randn(2, 5, 1);
        assert_eq!(matmul_f32(&Tensor::identity(2), &b).unwrap(), b);
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul_f32(&a, &Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_oracle() {
        let a = randn(8, 8, 2);
        let b = randn(8, 8, 3);
        let got = matmul_f32(&a, &b).unwrap();
        for (g, o) in got.data().iter().zip(oracle_matmul(&a, &b)) {
            assert!((f64::from(*g) - o).abs() < 1e-5, "{g} vs {o}");
        }
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul_f32(&Tensor::zeros(2, 3), &Tensor::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let qa = quantize_clamp(&Tensor::zeros(2, 3), 1.0).unwrap();
        assert!(matmul_i8(&qa, &qa).is_err());
    }

    #[test]
    fn matmul_i8_zero_and_identity() {
        let b = randn(2, 3, 4);
        let qb = quantize_clamp(&b, symmetric_scale(&b)).unwrap();
        let zero = quantize_clamp(&Tensor::zeros(4, 2), 1.0).unwrap();
        assert!(matmul_i8(&zero, &qb).unwrap().data().iter().all(|&v| v == 0.0));

        let ident = quantize_clamp(&Tensor::identity(2), 1.0).unwrap();
        let y = matmul_i8(&ident, &qb).unwrap();
        let step = qb.scale();
        assert!(y.max_abs_diff(&b).unwrap() <= step);
    }

    #[test]
    fn matmul_i8_matches_dequantized_float() {
        let a = randn(8, 8, 5);
        let b = randn(8, 8, 6);
        let qa = quantize_clamp(&a, symmetric_scale(&a)).unwrap();
        let qb = quantize_clamp(&b, symmetric_scale(&b)).unwrap();
        let got = matmul_i8(&qa, &qb).unwrap();
        let oracle = oracle_matmul(&qa.dequantize(), &qb.dequantize());
        let bound = 8.0 * f64::from(qa.scale() * qb.scale());
        for (g, o) in got.data().iter().zip(oracle) {
            assert!((f64::from(*g) - o).abs() <= bound);
        }
    }

    #[test]
    fn quantize_boundaries() {
        let s = 0.05f32;
        let x = Tensor::new(vec![1, 4], vec![0.0, 127.0 * s, 1000.0 * s, -1000.0 * s]).unwrap();
        let q = quantize_clamp(&x, s).unwrap();
        assert_eq!(q.data(), &[0, 127, 127, -127]);
        assert!(matches!(quantize_clamp(&x, 0.0), Err(Error::InvalidScale(_))));
        assert!(quantize_clamp(&x, -1.0).is_err());
        // ties go to even
        let t = Tensor::new(vec![1, 4], vec![0.5, 1.5, 2.5, -0.5]).unwrap();
        assert_eq!(quantize_clamp(&t, 1.0).unwrap().data(), &[0, 2, 2, 0]);
    }

    /// Full-matrix masked softmax in f64, computed independently.
    fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (n, d) = (q.rows(), q.cols());
        let mut out = vec![0.0f64; n * v.cols()];
        for i in 0..n {
            let mut w = vec![f64::NEG_INFINITY; n];
            for (j, wj) in w.iter_mut().enumerate().take(i + 1) {
                let mut s = 0.0;
                for c in 0..d {
                    s += f64::from(q.get(i, c)) * f64::from(k.get(j, c));
                }
                *wj = s / (d as f64).sqrt();
            }
            let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..v.cols() {
                out[i * v.cols() + c] = (0..n).map(|j| e[j] / z * f64::from(v.get(j, c))).sum();
            }
        }
        out
    }

    #[test]
    fn attention_single_token_returns_value_row() {
        let q = randn(1, 4, 7);
        let k = randn(1, 4, 8);
        let v = randn(1, 4, 9);
        let out = causal_attention(&q, &k, &v, 0).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-6);
    }

    #[test]
    fn attention_matches_masked_softmax_oracle() {
        let (q, k, v) = (randn(4, 8, 10), randn(4, 8, 11), randn(4, 8, 12));
        let got = causal_attention(&q, &k, &v, 0).unwrap();
        for (g, o) in got.data().iter().zip(oracle_attention(&q, &k, &v)) {
            assert!((f64::from(*g) - o).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_token_by_token_matches_full() {
        let (q, k, v) = (randn(2, 8, 13), randn(2, 8, 14), randn(2, 8, 15));
        let full = causal_attention(&q, &k, &v, 0).unwrap();
        for t in 0..2 {
            let kv_k = k.slice_rows(0, t + 1).unwrap();
            let kv_v = v.slice_rows(0, t + 1).unwrap();
            let step = causal_attention(&q.slice_rows(t, 1).unwrap(), &kv_k, &kv_v, t).unwrap();
            let want = full.slice_rows(t, 1).unwrap();
            assert!(step.max_abs_diff(&want).unwrap() < 1e-5);
        }
    }

    #[test]
    fn attention_rejects_short_kv() {
        let q = randn(2, 4, 1);
        let k = randn(3, 4, 2);
        let err = causal_attention(&q, &k, &k, 2).unwrap_err();
        assert!(matches!(err, Error::KvTooShort { needed: 4, .. }));
    }

    #[test]
    fn rmsnorm_constant_vector() {
        for c in [3.0f32, -0.25] {
            let x = Tensor::new(vec![1, 16], vec![c; 16]).unwrap();
            let g = Tensor::new(vec![16], vec![1.0; 16]).unwrap();
            let y = rmsnorm(&x, &g).unwrap();
            assert!(y.data().iter().all(|v| (v - c.signum()).abs() < 1e-5));
        }
        let x = Tensor::zeros(1, 4);
        assert!(rmsnorm(&x, &Tensor::new(vec![3], vec![1.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn silu_values() {
        let x = Tensor::new(vec![1, 3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.731_058_6).abs() < 1e-6);
        assert!((y.data()[2] + 0.268_941_4).abs() < 1e-6);
    }

    #[test]
    fn rope_chunked_matches_full() {
        let x = randn(10, 16, 16);
        let full = rope(&x, 0, 8).unwrap();
        let head = rope(&x.slice_rows(0, 4).unwrap(), 0, 8).unwrap();
        let tail = rope(&x.slice_rows(4, 6).unwrap(), 4, 8).unwrap();
        assert_eq!(full.slice_rows(0, 4).unwrap(), head);
        assert_eq!(full.slice_rows(4, 6).unwrap(), tail);
        // position 0 is the identity rotation
        assert_eq!(full.row(0), x.row(0));
        assert!(rope(&x, 0, 6).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&randn(3, 7, 17)).unwrap();
        for r in 0..3 {
            assert!((y.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
            proptest::collection::vec(-4.0f32..4.0, rows * cols)
                .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
        }

        proptest! {
            #[test]
            fn i8_matmul_within_rounding_bound(
                (a, b) in (1usize..6, 1usize..9, 1usize..6)
                    .prop_flat_map(|(m, k, n)| (tensor(m, k), tensor(k, n)))
            ) {
                let qa = quantize_clamp(&a, symmetric_scale(&a)).unwrap();
                let qb = quantize_clamp(&b, symmetric_scale(&b)).unwrap();
                let got = matmul_i8(&qa, &qb).unwrap();
                let want = matmul_f32(&qa.dequantize(), &qb.dequantize()).unwrap();
                let bound = a.cols() as f32 * qa.scale() * qb.scale();
                prop_assert!(got.max_abs_diff(&want).unwrap() <= bound);
            }

            #[test]
            fn requantize_is_idempotent(x in tensor(3, 5), s in 0.01f32..1.0) {
                let q = quantize_clamp(&x, s).unwrap();
                let again = quantize_clamp(&q.dequantize(), s).unwrap();
                prop_assert_eq!(q, again);
            }

            #[test]
            fn attention_any_split_matches_full(split in 0usize..6) {
                let (q, k, v) = (randn(6, 8, 20), randn(6, 8, 21), randn(6, 8, 22));
                let full = causal_attention(&q, &k, &v, 0).unwrap();
                let head = causal_attention(&q.slice_rows(0, split).unwrap(), &k, &v, 0);
                if split > 0 {
                    prop_assert!(head.unwrap().max_abs_diff(&full.slice_rows(0, split).unwrap()).unwrap() < 1e-5);
                }
                let tail = causal_attention(&q.slice_rows(split, 6 - split).unwrap(), &k, &v, split).unwrap();
                prop_assert!(tail.max_abs_diff(&full.slice_rows(split, 6 - split).unwrap()).unwrap() < 1e-5);
            }

            #[test]
            fn kernels_are_pure(a in tensor(4, 4)) {
                prop_assert_eq!(matmul_f32(&a, &a).unwrap(), matmul_f32(&a, &a).unwrap());
                prop_assert_eq!(rope(&a, 3, 4).unwrap(), rope(&a, 3, 4).unwrap());
            }
        }
    }
}
