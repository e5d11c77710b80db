//! Bounded uniform sample of a stream (algorithm R), with a weighted merge
//! for combining reservoirs built over disjoint shards.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservoir<T> {
    cap: usize,
    seen: u64,
    items: Vec<T>,
}

impl<T: Clone> Reservoir<T> {
    pub fn new(cap: usize) -> Self {
        assert!(cap >= 1, "reservoir capacity must be >= 1");
        Reservoir {
            cap,
            seen: 0,
            items: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Total number of values offered, including those not retained.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn samples(&self) -> &[T] {
        &self.items
    }

    pub fn add(&mut self, value: T, rng: &mut impl Rng) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(value);
        } else {
            let j = rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.items[j as usize] = value;
            }
        }
    }

    /// Uniform draw from the retained sample.
    pub fn pick(&self, rng: &mut impl Rng) -> Option<&T> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.random_range(0..self.items.len())])
        }
    }
}

impl<T: Clone + Ord> Reservoir<T> {
    /// Merge two reservoirs into one of the same capacity.
    ///
    /// Each retained item stands in for `seen / len` originals, so the merge
    /// draws a weighted sample without replacement from the pooled items
    /// (exponential-key selection). Pooled items are sorted by value before
    /// keys are assigned, which makes the result independent of argument
    /// order for a fixed `rng`.
    pub fn merge(&self, other: &Reservoir<T>, rng: &mut impl Rng) -> Reservoir<T> {
        assert_eq!(self.cap, other.cap, "caller must check capacities");
        let mut pooled: Vec<(T, f64)> = Vec::with_capacity(self.items.len() + other.items.len());
        for side in [self, other] {
            if side.items.is_empty() {
                continue;
            }
            let w = side.seen as f64 / side.items.len() as f64;
            pooled.extend(side.items.iter().map(|v| (v.clone(), w)));
        }
        let mut merged = Reservoir {
            cap: self.cap,
            seen: self.seen + other.seen,
            items: Vec::new(),
        };
        if pooled.len() <= self.cap {
            pooled.sort_by(|a, b| a.0.cmp(&b.0));
            merged.items = pooled.into_iter().map(|(v, _)| v).collect();
            return merged;
        }
        pooled.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut keyed: Vec<(f64, T)> = pooled
            .into_iter()
            .map(|(v, w)| {
                let u: f64 = rng.random();
                // u^(1/w) as a sort key; log form avoids underflow for large w.
                (u.max(f64::MIN_POSITIVE).ln() / w, v)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        keyed.truncate(self.cap);
        merged.items = keyed.into_iter().map(|(_, v)| v).collect();
        merged.items.sort();
        merged
    }
}

impl Reservoir<u64> {
    pub fn mean(&self) -> Option<f64> {
        if self.items.is_empty() {
            None
        } else {
            Some(self.items.iter().map(|v| *v as f64).sum::<f64>() / self.items.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn keeps_everything_under_capacity() {
        let mut rng = derive_rng(1, "test", 0);
        let mut r = Reservoir::new(10);
        for v in 0u64..7 {
            r.add(v, &mut rng);
        }
        assert_eq!(r.len(), 7);
        assert_eq!(r.seen(), 7);
    }

    #[test]
    fn bounded_and_roughly_uniform() {
        let mut rng = derive_rng(2, "test", 0);
        let mut r = Reservoir::new(1000);
        for v in 0u64..100_000 {
            r.add(v, &mut rng);
        }
        assert_eq!(r.len(), 1000);
        assert_eq!(r.seen(), 100_000);
        // Uniform over [0, 1e5): retained mean should sit near 5e4.
        let mean = r.mean().unwrap();
        assert!((mean - 50_000.0).abs() < 5_000.0, "mean {mean}");
    }

    #[test]
    fn merge_is_commutative_for_fixed_stream() {
        let mut rng = derive_rng(3, "test", 0);
        let mut a = Reservoir::new(50);
        let mut b = Reservoir::new(50);
        for v in 0u64..500 {
            a.add(v, &mut rng);
        }
        for v in 500u64..2000 {
            b.add(v, &mut rng);
        }
        let ab = a.merge(&b, &mut derive_rng(9, "merge", 0));
        let ba = b.merge(&a, &mut derive_rng(9, "merge", 0));
        assert_eq!(ab, ba);
        assert_eq!(ab.seen(), 2000);
        assert_eq!(ab.len(), 50);
    }

    #[test]
    fn merge_under_capacity_concatenates() {
        let mut rng = derive_rng(4, "test", 0);
        let mut a = Reservoir::new(10);
        let mut b = Reservoir::new(10);
        a.add(3u64, &mut rng);
        b.add(1u64, &mut rng);
        b.add(2u64, &mut rng);
        let m = a.merge(&b, &mut rng);
        assert_eq!(m.samples(), &[1, 2, 3]);
        assert_eq!(m.seen(), 3);
    }
}
