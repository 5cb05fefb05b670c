//! Evaluation metrics: Dice overlap and Pearson correlation.

use crate::error::{Error, Result};
use crate::scalar::{cst, Real};

/// `DSC = 2 |A ∩ B| / (|A| + |B|)`; two empty masks count as identical.
pub fn dice_score<T: Real>(a: &[bool], b: &[bool]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid("dice_score: mask length mismatch"));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(T::one());
    }
    Ok(cst::<T>(2.0 * inter as f64 / total as f64))
}

/// Pearson product-moment correlation over the masked voxels.
pub fn pearson_correlation<T: Real>(a: &[T], b: &[T], mask: Option<&[bool]>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid("pearson: length mismatch"));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::invalid("pearson: mask length mismatch"));
        }
    }
    let included = |i: usize| mask.is_none_or(|m| m[i]);
    let n = (0..a.len()).filter(|&i| included(i)).count();
    if n < 2 {
        return Err(Error::invalid("pearson needs at least 2 masked voxels"));
    }
    let nf = cst::<T>(n as f64);
    let mut ma = T::zero();
    let mut mb = T::zero();
    for i in 0..a.len() {
        if included(i) {
            ma += a[i];
            mb += b[i];
        }
    }
    ma /= nf;
    mb /= nf;
    let mut saa = T::zero();
    let mut sbb = T::zero();
    let mut sab = T::zero();
    for i in 0..a.len() {
        if included(i) {
            let da = a[i] - ma;
            let db = b[i] - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
    }
    if saa <= T::zero() || sbb <= T::zero() {
        return Err(Error::invalid("pearson: zero variance"));
    }
    Ok(sab / (saa * sbb).sqrt())
}
