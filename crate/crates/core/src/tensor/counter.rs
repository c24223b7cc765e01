use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// Multiply and addition tally for one kernel invocation scope.
///
/// Reported FLOPs are `multiplies + additions`; the cost model reasons in
/// multiplies alone, so both are kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub multiplies: u64,
    pub additions: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn charge(&mut self, multiplies: usize, additions: usize) {
        self.multiplies += multiplies as u64;
        self.additions += additions as u64;
    }

    #[inline]
    pub fn flops(&self) -> u64 {
        self.multiplies + self.additions
    }
}

impl Add for OpCounter {
    type Output = OpCounter;

    fn add(self, rhs: Self) -> Self {
        Self {
            multiplies: self.multiplies + rhs.multiplies,
            additions: self.additions + rhs.additions,
        }
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.multiplies += rhs.multiplies;
        self.additions += rhs.additions;
    }
}

impl Sub for OpCounter {
    type Output = OpCounter;

    fn sub(self, rhs: Self) -> Self {
        Self {
            multiplies: self.multiplies - rhs.multiplies,
            additions: self.additions - rhs.additions,
        }
    }
}
