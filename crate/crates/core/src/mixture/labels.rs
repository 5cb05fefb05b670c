//! Manual-label fusion with a rater sensitivity model.
//!
//! A label `l` maps to one or more mixture classes. Given the true class
//! `k`, the probability that the rater labelled the voxel `l` is
//! `zeta / |S_l|` when `k` is in the mapped set `S_l` and
//! `(1 - zeta) / (K - |S_l|)` otherwise. `zeta = 1/K` makes the factor
//! uniform (labels carry no information); `zeta = 1` makes labels hard.

use crate::error::{Error, Result};
use crate::scalar::{cst, Real};

/// Per-voxel categorical labels (0 = unlabeled) and rater sensitivity.
#[derive(Debug, Clone)]
pub struct LabelData<T> {
    pub labels: Vec<u16>,
    pub zeta: T,
}

impl<T: Real> LabelData<T> {
    pub fn new(labels: Vec<u16>, zeta: T, k: usize) -> Result<Self> {
        let lo = T::one() / cst::<T>(k as f64);
        if zeta < lo || zeta > T::one() {
            return Err(Error::invalid(format!(
                "zeta must lie in [1/K, 1], got {}",
                zeta.to_f64().unwrap_or(f64::NAN)
            )));
        }
        Ok(LabelData { labels, zeta })
    }
}

/// Log-probability table ln p(l | z=k) for one rater.
#[derive(Debug, Clone)]
pub struct LabelModel<T> {
    /// log_p[l-1][k]: None encodes an exact zero (zeta = 1, class outside
    /// the labelled set).
    table: Vec<Vec<Option<T>>>,
}

impl<T: Real> LabelModel<T> {
    /// `label_classes[l-1]` lists the class indices compatible with label
    /// `l` (1-based labels; every class id must be < k).
    pub fn new(label_classes: &[Vec<usize>], zeta: T, k: usize) -> Result<Self> {
        let mut table = Vec::with_capacity(label_classes.len());
        for (li, set) in label_classes.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::invalid(format!(
                    "label {} maps to no mixture class",
                    li + 1
                )));
            }
            if set.iter().any(|&c| c >= k) {
                return Err(Error::invalid(format!(
                    "label {} maps to a class id >= K",
                    li + 1
                )));
            }
            if set.len() >= k {
                return Err(Error::invalid(format!(
                    "label {} maps to every class; nothing to discriminate",
                    li + 1
                )));
            }
            let inside = zeta / cst::<T>(set.len() as f64);
            let outside = (T::one() - zeta) / cst::<T>((k - set.len()) as f64);
            let mut row = Vec::with_capacity(k);
            for c in 0..k {
                let p = if set.contains(&c) { inside } else { outside };
                row.push(if p > T::zero() { Some(p.ln()) } else { None });
            }
            table.push(row);
        }
        Ok(LabelModel { table })
    }

    /// Identity mapping: label `l` means class `l-1`.
    pub fn identity(zeta: T, k: usize) -> Result<Self> {
        let sets: Vec<Vec<usize>> = (0..k).map(|c| vec![c]).collect();
        Self::new(&sets, zeta, k)
    }

    pub fn num_labels(&self) -> usize {
        self.table.len()
    }

    /// ln p(l | z=k); `None` is an exact zero (class excluded).
    #[inline]
    pub fn log_factor(&self, label: u16, class: usize) -> Option<T> {
        self.table[label as usize - 1][class]
    }
}
