use std::ops::Range;

/// Subset of the flat parameter vector that an optimizer may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    bits: Vec<bool>,
}

impl ParamMask {
    pub fn none(total: usize) -> Self {
        Self { bits: vec![false; total] }
    }

    pub fn all(total: usize) -> Self {
        Self { bits: vec![true; total] }
    }

    pub fn from_ranges<I: IntoIterator<Item = Range<usize>>>(total: usize, ranges: I) -> Self {
        let mut m = Self::none(total);
        for r in ranges {
            m.bits[r].fill(true);
        }
        m
    }

    pub fn total(&self) -> usize {
        self.bits.len()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// `v` with every entry outside the mask set to zero.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.bits).map(|(x, b)| if *b { *x } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_counts() {
        let m = ParamMask::from_ranges(10, [1..3, 2..5, 8..10]);
        assert_eq!(m.count(), 6);
        assert_eq!(m.indices().collect::<Vec<_>>(), vec![1, 2, 3, 4, 8, 9]);
        assert_eq!(m.apply(&[1.0; 10])[0], 0.0);
        assert!(ParamMask::none(3).is_empty());
        assert_eq!(ParamMask::all(3).count(), 3);
    }
}
