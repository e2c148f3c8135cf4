use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Predicate that ends a candidate step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundaryCriteria {
    /// Step ends with (and includes) this token.
    Separator(usize),
    /// Step ends with any of these tokens.
    Terminators(BTreeSet<usize>),
    /// Step is exactly this many tokens.
    FixedLength(usize),
}

impl BoundaryCriteria {
    /// Whether a candidate whose tokens so far are `candidate` is complete.
    pub fn triggered(&self, candidate: &[usize]) -> bool {
        match self {
            BoundaryCriteria::Separator(id) => candidate.last() == Some(id),
            BoundaryCriteria::Terminators(set) => candidate.last().is_some_and(|t| set.contains(t)),
            BoundaryCriteria::FixedLength(n) => candidate.len() >= *n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds() {
        assert!(BoundaryCriteria::Separator(4).triggered(&[1, 4]));
        assert!(!BoundaryCriteria::Separator(4).triggered(&[4, 1]));
        let t = BoundaryCriteria::Terminators([7, 8].into_iter().collect());
        assert!(t.triggered(&[8]) && !t.triggered(&[]));
        assert!(BoundaryCriteria::FixedLength(3).triggered(&[0, 0, 0]));
        assert!(!BoundaryCriteria::FixedLength(3).triggered(&[0, 0]));
    }
}
