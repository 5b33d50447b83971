//! Scaled dot-product attention and cross-frame attention against a cached
//! anchor frame.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Row-major `tokens x dim` matrix. Also used for `dim x dim` projection weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim == 0 || data.len() != tokens * dim {
            return Err(Error::dim(format!(
                "{tokens}x{dim} matrix cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite matrix entry".into()));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Result<Self> {
        Self::new(tokens, dim, vec![0.0; tokens * dim])
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self::new(dim, dim, data)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `self * rhs`, accumulating in `f64`.
    pub fn matmul(&self, rhs: &TokenMatrix) -> Result<TokenMatrix> {
        if self.dim != rhs.tokens {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.tokens, self.dim, rhs.tokens, rhs.dim
            )));
        }
        let mut out = Vec::with_capacity(self.tokens * rhs.dim);
        for i in 0..self.tokens {
            let row = self.row(i);
            for j in 0..rhs.dim {
                let acc: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(k, &a)| a as f64 * rhs.data[k * rhs.dim + j] as f64)
                    .sum();
                out.push(acc as f32);
            }
        }
        TokenMatrix::new(self.tokens, rhs.dim, out)
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<TokenMatrix> {
        if perm.len() != self.tokens {
            return Err(Error::dim("permutation length differs from token count"));
        }
        let data = perm.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        TokenMatrix::new(self.tokens, self.dim, data)
    }
}

/// Query, key and value projection weights, each `dim x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights {
    pub query: TokenMatrix,
    pub key: TokenMatrix,
    pub value: TokenMatrix,
}

pub fn qkv_project(feature: &TokenMatrix, weights: &QkvWeights) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix)> {
    for w in [&weights.query, &weights.key, &weights.value] {
        if w.tokens != feature.dim || w.dim != feature.dim {
            return Err(Error::dim(format!(
                "projection {}x{} does not match feature dim {}",
                w.tokens, w.dim, feature.dim
            )));
        }
    }
    Ok((
        feature.matmul(&weights.query)?,
        feature.matmul(&weights.key)?,
        feature.matmul(&weights.value)?,
    ))
}

/// Row-wise `softmax(Q K^T / sqrt(c))`, shape `q.tokens x k.tokens`.
pub fn attention_weights(q: &TokenMatrix, k: &TokenMatrix) -> Result<Vec<Vec<f64>>> {
    if q.dim != k.dim {
        return Err(Error::dim(format!(
            "query dim {} differs from key dim {}",
            q.dim, k.dim
        )));
    }
    let scale = 1.0 / (q.dim as f64).sqrt();
    Ok((0..q.tokens).map(|i| softmax_row(q.row(i), k, scale)).collect())
}

fn softmax_row(query: &[f32], k: &TokenMatrix, scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = (0..k.tokens)
        .map(|j| {
            query
                .iter()
                .zip(k.row(j))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                * scale
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Attends each query row to `(k, v)`. Output row `i` depends only on
/// query row `i`.
fn attend(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    if k.tokens != v.tokens {
        return Err(Error::dim(format!("{} keys but {} values", k.tokens, v.tokens)));
    }
    if q.dim != k.dim {
        return Err(Error::dim(format!(
            "query dim {} differs from key dim {}",
            q.dim, k.dim
        )));
    }
    let scale = 1.0 / (q.dim as f64).sqrt();
    let mut out = Vec::with_capacity(q.tokens * v.dim);
    for i in 0..q.tokens {
        let weights = softmax_row(q.row(i), k, scale);
        for d in 0..v.dim {
            let acc: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, &w)| w * v.data[j * v.dim + d] as f64)
                .sum();
            out.push(acc as f32);
        }
    }
    TokenMatrix::new(q.tokens, v.dim, out)
}

/// `softmax(Q K^T / sqrt(c)) V` over a single frame's tokens.
pub fn self_attention(q: &TokenMatrix, k: &TokenMatrix, v: &TokenMatrix) -> Result<TokenMatrix> {
    if q.tokens != k.tokens {
        return Err(Error::dim(format!(
            "self-attention needs matching token counts, got {} and {}",
            q.tokens, k.tokens
        )));
    }
    attend(q, k, v)
}

/// Anchor-frame keys and values, keyed by `(timestep, layer)`.
///
/// Entries are written once while the anchor frame is translated and are
/// read-only afterwards.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    entries: BTreeMap<(usize, usize), (TokenMatrix, TokenMatrix)>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, timestep: usize, layer: usize, key: TokenMatrix, value: TokenMatrix) -> Result<()> {
        if key.tokens != value.tokens {
            return Err(Error::dim("cached keys and values differ in token count"));
        }
        if self.entries.contains_key(&(timestep, layer)) {
            return Err(Error::CacheOverwrite { timestep, layer });
        }
        self.entries.insert((timestep, layer), (key, value));
        Ok(())
    }

    pub fn get(&self, timestep: usize, layer: usize) -> Result<(&TokenMatrix, &TokenMatrix)> {
        self.entries
            .get(&(timestep, layer))
            .map(|(k, v)| (k, v))
            .ok_or(Error::CacheMiss { timestep, layer })
    }

    pub fn contains(&self, timestep: usize, layer: usize) -> bool {
        self.entries.contains_key(&(timestep, layer))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &(TokenMatrix, TokenMatrix))> {
        self.entries.iter()
    }
}

/// `softmax(Q_i (K^1)^T / sqrt(c)) V^1` with the anchor's cached keys/values.
pub fn cross_frame_attention(q: &TokenMatrix, cache: &KvCache, timestep: usize, layer: usize) -> Result<TokenMatrix> {
    let (k, v) = cache.get(timestep, layer)?;
    attend(q, k, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(tokens: usize, dim: usize, v: &[f32]) -> TokenMatrix {
        TokenMatrix::new(tokens, dim, v.to_vec()).unwrap()
    }

    #[test]
    fn projection_identity_and_zero() {
        let f = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let eye = TokenMatrix::identity(2).unwrap();
        let w = QkvWeights {
            query: eye.clone(),
            key: eye.clone(),
            value: eye,
        };
        let (q, k, v) = qkv_project(&f, &w).unwrap();
        assert_eq!((&q, &k, &v), (&f, &f, &f));

        let z = TokenMatrix::zeros(2, 2).unwrap();
        let w = QkvWeights {
            query: z.clone(),
            key: z.clone(),
            value: z.clone(),
        };
        let (q, _, _) = qkv_project(&f, &w).unwrap();
        assert_eq!(q, z);
    }

    #[test]
    fn projection_matches_hand_matmul() {
        let f = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let wq = m(2, 2, &[0.5, -1.0, 2.0, 0.0]);
        // [1 2] * [[0.5 -1] [2 0]] = [4.5, -1]; [3 4] -> [9.5, -3]
        let w = QkvWeights {
            query: wq.clone(),
            key: wq.clone(),
            value: wq,
        };
        let (q, _, _) = qkv_project(&f, &w).unwrap();
        assert_eq!(q.data(), &[4.5, -1.0, 9.5, -3.0]);
        let bad = QkvWeights {
            query: TokenMatrix::zeros(3, 3).unwrap(),
            key: TokenMatrix::zeros(3, 3).unwrap(),
            value: TokenMatrix::zeros(3, 3).unwrap(),
        };
        assert!(qkv_project(&f, &bad).is_err());
    }

    #[test]
    fn single_token_returns_value() {
        let q = m(1, 3, &[0.3, -2.0, 7.0]);
        let k = m(1, 3, &[1.0, 1.0, 1.0]);
        let v = m(1, 3, &[0.25, 0.5, -4.0]);
        assert_eq!(self_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = m(2, 2, &[5.0, -1.0, 0.0, 3.0]);
        let k = m(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        let v = m(2, 2, &[1.0, 0.0, 3.0, 4.0]);
        let out = self_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out.row(i)[0] - 2.0).abs() < 1e-6);
            assert!((out.row(i)[1] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_by_two_matches_hand_softmax() {
        let q = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let k = m(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let v = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = self_attention(&q, &k, &v).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // Row 0 logits: [1, 0] * s; row 1 logits: [0, 2] * s.
        let w0 = (s).exp() / ((s).exp() + 1.0);
        let w1 = 1.0 / (1.0 + (2.0 * s).exp());
        let want = [
            w0 * 1.0 + (1.0 - w0) * 3.0,
            w0 * 2.0 + (1.0 - w0) * 4.0,
            w1 * 1.0 + (1.0 - w1) * 3.0,
            w1 * 2.0 + (1.0 - w1) * 4.0,
        ];
        for (got, want) in out.data().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn logit_scale_is_sqrt_dim_and_quadratic_in_s() {
        let q = m(1, 4, &[0.2, -0.1, 0.4, 0.3]);
        let k = m(2, 4, &[0.5, 0.1, -0.2, 0.3, -0.4, 0.2, 0.1, 0.6]);
        let logit = |q: &TokenMatrix, k: &TokenMatrix| {
            let w = attention_weights(q, k).unwrap();
            (w[0][0] / w[0][1]).ln()
        };
        let dots: Vec<f64> = (0..2)
            .map(|j| q.row(0).iter().zip(k.row(j)).map(|(a, b)| *a as f64 * *b as f64).sum())
            .collect();
        let explicit = (dots[0] - dots[1]) / 2.0;
        assert!((logit(&q, &k) - explicit).abs() < 1e-6);

        let s = 3.0f32;
        let qs = m(1, 4, &q.data().iter().map(|v| v * s).collect::<Vec<_>>());
        let ks = m(2, 4, &k.data().iter().map(|v| v * s).collect::<Vec<_>>());
        assert!((logit(&qs, &ks) - 9.0 * explicit).abs() < 1e-5);
    }

    #[test]
    fn cross_frame_cases() {
        let q1 = m(2, 2, &[0.1, 0.7, -0.3, 0.2]);
        let k1 = m(2, 2, &[0.4, -0.2, 0.9, 0.5]);
        let v1 = m(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let mut cache = KvCache::new();
        cache.insert(5, 0, k1.clone(), v1.clone()).unwrap();
        assert_eq!(
            cross_frame_attention(&q1, &cache, 5, 0).unwrap(),
            self_attention(&q1, &k1, &v1).unwrap()
        );
        assert!(matches!(
            cross_frame_attention(&q1, &cache, 4, 0),
            Err(Error::CacheMiss { timestep: 4, layer: 0 })
        ));
        assert!(matches!(
            cache.insert(5, 0, k1.clone(), v1.clone()),
            Err(Error::CacheOverwrite { .. })
        ));

        let mut single = KvCache::new();
        single
            .insert(0, 0, m(1, 2, &[3.0, 1.0]), m(1, 2, &[0.25, -0.75]))
            .unwrap();
        let out = cross_frame_attention(&m(3, 2, &[9.0, 1.0, -4.0, 0.0, 0.0, 2.0]), &single, 0, 0).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[0.25, -0.75]);
        }
    }

    #[test]
    fn cross_frame_outputs_of_two_frames_match_oracle() {
        let k1 = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v1 = m(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let mut cache = KvCache::new();
        cache.insert(1, 0, k1, v1).unwrap();
        let qa = m(1, 2, &[2.0, 0.0]);
        let qb = m(1, 2, &[0.0, -2.0]);
        let s = 2.0 / 2f64.sqrt();
        // Frame a: logits [s, 0]; frame b: logits [0, -s].
        let wa = s.exp() / (s.exp() + 1.0);
        let wb = 1.0 / (1.0 + (-s).exp());
        let a = cross_frame_attention(&qa, &cache, 1, 0).unwrap();
        let b = cross_frame_attention(&qb, &cache, 1, 0).unwrap();
        assert!((a.row(0)[0] as f64 - 2.0 * wa).abs() < 1e-6);
        assert!((a.row(0)[1] as f64 - 4.0 * (1.0 - wa)).abs() < 1e-6);
        assert!((b.row(0)[0] as f64 - 2.0 * wb).abs() < 1e-6);
        assert!((b.row(0)[1] as f64 - 4.0 * (1.0 - wb)).abs() < 1e-6);
    }

    fn matrix(tokens: usize, dim: usize) -> impl Strategy<Value = TokenMatrix> {
        prop::collection::vec(-3.0f32..3.0, tokens * dim).prop_map(move |d| TokenMatrix::new(tokens, dim, d).unwrap())
    }

    proptest! {
        #[test]
        fn attention_rows_sum_to_one((q, k) in (1usize..8, 1usize..8, 1usize..6)
            .prop_flat_map(|(tq, tk, d)| (matrix(tq, d), matrix(tk, d)))) {
            for row in attention_weights(&q, &k).unwrap() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn identical_query_rows_give_bit_identical_outputs(
            (qa, kv) in (2usize..7, 1usize..5).prop_flat_map(|(t, d)| (matrix(t, d), matrix(t, d))),
            src in 0usize..7, dst in 0usize..7,
        ) {
            let t = qa.tokens();
            let (src, dst) = (src % t, dst % t);
            let mut cache = KvCache::new();
            cache.insert(0, 0, kv.clone(), kv.clone()).unwrap();
            // A second frame whose query at `dst` equals frame a's query at `src`.
            let mut data = qa.data().iter().map(|v| v * -0.5).collect::<Vec<_>>();
            let d = qa.dim();
            data[dst * d..(dst + 1) * d].copy_from_slice(qa.row(src));
            let qb = TokenMatrix::new(t, d, data).unwrap();
            let a = cross_frame_attention(&qa, &cache, 0, 0).unwrap();
            let b = cross_frame_attention(&qb, &cache, 0, 0).unwrap();
            prop_assert_eq!(
                a.row(src).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.row(dst).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn cached_token_order_does_not_matter(
            (q, k, v) in (1usize..5, 2usize..7, 1usize..4)
                .prop_flat_map(|(tq, tk, d)| (matrix(tq, d), matrix(tk, d), matrix(tk, d))),
            rot in 0usize..7,
        ) {
            let n = k.tokens();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
            let mut a = KvCache::new();
            a.insert(0, 0, k.clone(), v.clone()).unwrap();
            let mut b = KvCache::new();
            b.insert(0, 0, k.permute_rows(&perm).unwrap(), v.permute_rows(&perm).unwrap()).unwrap();
            let oa = cross_frame_attention(&q, &a, 0, 0).unwrap();
            let ob = cross_frame_attention(&q, &b, 0, 0).unwrap();
            for (x, y) in oa.data().iter().zip(ob.data()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
