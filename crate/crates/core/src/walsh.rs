//! Sequency-ordered fast Walsh transform.
//!
//! The Walsh functions used here are the rows of the Sylvester-Hadamard
//! matrix permuted into sequency order: row `m` (0-based) changes sign exactly
//! `m` times. The natural-order row serving sequency `m` is the bit-reversed
//! Gray code of `m`, so the fast transform is an in-place butterfly followed
//! by that permutation.
//!
//! With 1-based indices this is the family `wal(1, n) = 1`, `wal(2, n)`
//! positive on the first half and negative on the second, and so on; the
//! classical recurrence `wal(m, n) = wal(m/2, 2n) * wal(m mod 2, n)` generates
//! the same rows when read with index wrap-around. The Hadamard construction is
//! taken as the definition because it is orthogonal by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest order [`walsh_matrix`] will materialize.
pub const MAX_MATRIX_ORDER: usize = 1 << 10;

#[derive(Debug, Error, PartialEq)]
pub enum WalshError {
    #[error("cannot transform an empty sequence")]
    Empty,
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("matrix order {0} exceeds the cap of {MAX_MATRIX_ORDER}")]
    TooLarge(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalshSpectrum {
    /// Coefficient `m` (0-based) belongs to the Walsh function with `m` sign changes.
    pub coefficients: Vec<f64>,
    pub t2: usize,
    pub original_length: usize,
}

/// Padded length: `T` itself when it is a power of two, else `2^(floor(log2 T) + 1)`.
pub fn padded_len(t: usize) -> usize {
    t.next_power_of_two()
}

/// Zero-pad to the next power of two.
pub fn pad(values: &[f64]) -> Result<Vec<f64>, WalshError> {
    if values.is_empty() {
        return Err(WalshError::Empty);
    }
    let mut out = values.to_vec();
    out.resize(padded_len(values.len()), 0.0);
    Ok(out)
}

fn check_len(len: usize) -> Result<u32, WalshError> {
    if len == 0 {
        return Err(WalshError::Empty);
    }
    if !len.is_power_of_two() {
        return Err(WalshError::NotPowerOfTwo(len));
    }
    Ok(len.trailing_zeros())
}

#[inline]
fn gray(m: usize) -> usize {
    m ^ (m >> 1)
}

#[inline]
fn bit_reverse(x: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        x.reverse_bits() >> (usize::BITS - bits)
    }
}

/// Natural (Hadamard) row index holding sequency `m`.
#[inline]
fn natural_index(m: usize, bits: u32) -> usize {
    bit_reverse(gray(m), bits)
}

/// Sequency-ordered Walsh matrix of order `t2`, entries ±1.
pub fn walsh_matrix(t2: usize) -> Result<Vec<Vec<i8>>, WalshError> {
    let bits = check_len(t2)?;
    if t2 > MAX_MATRIX_ORDER {
        return Err(WalshError::TooLarge(t2));
    }
    Ok((0..t2)
        .map(|m| {
            let h = natural_index(m, bits);
            (0..t2).map(|n| if (h & n).count_ones() % 2 == 0 { 1 } else { -1 }).collect()
        })
        .collect())
}

/// Unnormalized in-place Walsh-Hadamard butterfly, natural order.
fn hadamard_in_place(data: &mut [f64]) {
    let n = data.len();
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

/// Forward transform `F(m) = sum_n f(n) wal(m, n)` of an already padded sequence.
pub fn fwft(values: &[f64]) -> Result<WalshSpectrum, WalshError> {
    let bits = check_len(values.len())?;
    let mut work = values.to_vec();
    hadamard_in_place(&mut work);
    let coefficients = (0..work.len()).map(|m| work[natural_index(m, bits)]).collect();
    Ok(WalshSpectrum { coefficients, t2: values.len(), original_length: values.len() })
}

/// Pad then transform, remembering the unpadded length.
pub fn fwft_padded(values: &[f64]) -> Result<WalshSpectrum, WalshError> {
    let mut spectrum = fwft(&pad(values)?)?;
    spectrum.original_length = values.len();
    Ok(spectrum)
}

/// Inverse transform `f(n) = (1/T2) sum_m F(m) wal(n, m)`; returns the padded sequence.
pub fn ifwft(spectrum: &WalshSpectrum) -> Result<Vec<f64>, WalshError> {
    let bits = check_len(spectrum.coefficients.len())?;
    let n = spectrum.coefficients.len();
    let mut work = vec![0.0; n];
    for (m, &c) in spectrum.coefficients.iter().enumerate() {
        work[natural_index(m, bits)] = c;
    }
    hadamard_in_place(&mut work);
    let scale = 1.0 / n as f64;
    work.iter_mut().for_each(|v| *v *= scale);
    Ok(work)
}
