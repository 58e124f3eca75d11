use super::ProtocolError;
use crate::bits::{self, Bits};

/// Seed length for compressing `key_len` bits to `target_len` bits.
pub fn toeplitz_seed_len(key_len: usize, target_len: usize) -> usize {
    (key_len + target_len).saturating_sub(1)
}

/// Multiply `key` by the `target_len x key.len()` Toeplitz matrix whose
/// entry `(i, j)` is `seed[i - j + key.len() - 1]`.
pub fn privacy_amplify(key: &[u8], target_len: usize, seed: &[u8]) -> Result<Bits, ProtocolError> {
    let n = key.len();
    if target_len > n {
        return Err(ProtocolError::InvalidRequest {
            target: target_len,
            len: n,
        });
    }
    if target_len == 0 {
        return Ok(Bits::new());
    }
    if seed.len() != toeplitz_seed_len(n, target_len) {
        return Err(ProtocolError::InvalidArgument(format!(
            "Toeplitz seed has {} bits, expected {}",
            seed.len(),
            toeplitz_seed_len(n, target_len)
        )));
    }
    // output i = sum_t key[n-1-t] * seed[i+t]
    let rev: Bits = key.iter().rev().copied().collect();
    let kw = bits::pack(&rev);
    let mut sw = bits::pack(seed);
    sw.push(0);
    let mut out = Bits::with_capacity(target_len);
    for i in 0..target_len {
        let (base, off) = (i / 64, i % 64);
        let mut acc = 0u64;
        for (w, &k) in kw.iter().enumerate() {
            let lo = sw[base + w] >> off;
            let hi = if off == 0 { 0 } else { sw[base + w + 1] << (64 - off) };
            acc ^= k & (lo | hi);
        }
        out.push((acc.count_ones() & 1) as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn naive(key: &[u8], m: usize, seed: &[u8]) -> Bits {
        let n = key.len();
        (0..m)
            .map(|i| (0..n).fold(0u8, |acc, j| acc ^ (seed[i + n - 1 - j] & key[j])))
            .collect()
    }

    #[test]
    fn matches_direct_matrix_product() {
        let mut r = rng::rng(4);
        for (n, m) in [(1, 1), (7, 3), (64, 64), (65, 1), (200, 130)] {
            let key: Bits = (0..n).map(|_| r.random_range(0..2)).collect();
            let seed: Bits = (0..toeplitz_seed_len(n, m)).map(|_| r.random_range(0..2)).collect();
            assert_eq!(privacy_amplify(&key, m, &seed).unwrap(), naive(&key, m, &seed), "n={n} m={m}");
        }
    }

    #[test]
    fn edge_cases() {
        assert!(privacy_amplify(&[1, 0], 0, &[]).unwrap().is_empty());
        assert_eq!(privacy_amplify(&[0; 16], 4, &[1; 19]).unwrap(), vec![0; 4]);
        assert_eq!(
            privacy_amplify(&[1, 0], 3, &[0; 4]),
            Err(ProtocolError::InvalidRequest { target: 3, len: 2 })
        );
    }
}
