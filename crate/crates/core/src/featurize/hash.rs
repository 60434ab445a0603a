//! Hierarchical feature hashing: depth-decayed signed hashing into a
//! fixed-width vector.

use super::FeaturizeError;
use crate::Real;

// FNV-1a, 64-bit. Stable across platforms and releases, unlike the stdlib
// hasher, which is free to change; cached features must not.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// Two independent hash functions come from one FNV by domain separation.
const BUCKET_KEY: &[u8] = b"bucket\x00";
const SIGN_KEY: &[u8] = b"sign\x00";

fn keyed(key: &[u8], token: &str) -> u64 {
    let mut buf = Vec::with_capacity(key.len() + token.len());
    buf.extend_from_slice(key);
    buf.extend_from_slice(token.as_bytes());
    fnv1a(&buf)
}

pub fn token_bucket(token: &str, dim: usize) -> usize {
    (keyed(BUCKET_KEY, token) % dim as u64) as usize
}

pub fn token_sign(token: &str) -> Real {
    if keyed(SIGN_KEY, token) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Hash a token list into a `dim`-wide vector. The token at list position d
/// adds `sign(token) * 2^(-d/4)` to its bucket, so earlier (coarser) tokens
/// dominate and reordering a hierarchy changes the vector. The result is
/// L2-normalized unless it is all zero.
pub fn feature_hash(tokens: &[String], dim: usize) -> Result<Vec<Real>, FeaturizeError> {
    if dim < 8 || dim % 4 != 0 {
        return Err(FeaturizeError::BadDim { dim });
    }
    let mut v = vec![0.0; dim];
    for (d, t) in tokens.iter().enumerate() {
        let weight = (2.0 as Real).powf(-(d as Real) / 4.0);
        v[token_bucket(t, dim)] += token_sign(t) * weight;
    }
    let norm: Real = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let t = toks(&["file", "usr", "bin", "vim"]);
        let a = feature_hash(&t, 16).unwrap();
        let b = feature_hash(&t, 16).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12, "norm {norm}");
    }

    #[test]
    fn order_sensitivity() {
        let a = feature_hash(&toks(&["usr", "bin", "vim"]), 16).unwrap();
        let b = feature_hash(&toks(&["vim", "bin", "usr"]), 16).unwrap();
        assert_ne!(a, b, "depth weighting must distinguish permutations");
    }

    #[test]
    fn empty_tokens_yield_zero_vector() {
        let v = feature_hash(&[], 8).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dim_preconditions() {
        assert!(matches!(feature_hash(&[], 4), Err(FeaturizeError::BadDim { dim: 4 })));
        assert!(matches!(feature_hash(&[], 10), Err(FeaturizeError::BadDim { dim: 10 })));
        assert!(feature_hash(&[], 8).is_ok());
        assert!(feature_hash(&[], 128).is_ok());
    }

    #[test]
    fn depth_weights_decay_geometrically() {
        // A single token at depth 0 vs the same token deeper: before
        // normalization the contribution halves every 4 positions. Use a
        // two-token vector where the tokens land in different buckets to
        // observe the raw ratio through the normalized output.
        let a = "file".to_string();
        let b = "vim".to_string();
        assert_ne!(token_bucket(&a, 16), token_bucket(&b, 16), "test needs distinct buckets");
        let v = feature_hash(&[a.clone(), b.clone()], 16).unwrap();
        let va = v[token_bucket(&a, 16)].abs();
        let vb = v[token_bucket(&b, 16)].abs();
        let expect = (2.0f64).powf(-0.25);
        assert!((vb / va - expect).abs() < 1e-12, "ratio {} vs {}", vb / va, expect);
    }

    proptest! {
        #[test]
        fn norm_is_one_for_any_nonempty_input(
            tokens in prop::collection::vec("[a-z0-9./]{1,8}", 1..20),
            dim_quarter in 2usize..64,
        ) {
            let dim = dim_quarter * 4;
            let v = feature_hash(&tokens, dim).unwrap();
            prop_assert_eq!(v.len(), dim);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            // All-zero can only happen for empty input; tokens is non-empty.
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }

        #[test]
        fn buckets_cover_range(token in "[a-z]{1,10}", dim_quarter in 2usize..32) {
            let dim = dim_quarter * 4;
            prop_assert!(token_bucket(&token, dim) < dim);
            let s = token_sign(&token);
            prop_assert!(s == 1.0 || s == -1.0);
        }
    }
}
