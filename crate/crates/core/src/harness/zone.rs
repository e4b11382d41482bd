use serde::{Deserialize, Serialize};

/// Operating region of a pruning ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningZone {
    /// `r <= 0.3`
    Safe,
    /// `0.3 < r <= 0.7`
    Moderate,
    /// `r > 0.7`
    High,
}

pub const SAFE_MAX: f64 = 0.3;
pub const MODERATE_MAX: f64 = 0.7;

pub fn classify_zone(ratio: f64) -> PruningZone {
    if ratio <= SAFE_MAX {
        PruningZone::Safe
    } else if ratio <= MODERATE_MAX {
        PruningZone::Moderate
    } else {
        PruningZone::High
    }
}

impl PruningZone {
    pub fn as_str(self) -> &'static str {
        match self {
            PruningZone::Safe => "safe",
            PruningZone::Moderate => "moderate",
            PruningZone::High => "high",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries_belong_to_the_lower_zone() {
        assert_eq!(classify_zone(0.0), PruningZone::Safe);
        assert_eq!(classify_zone(0.3), PruningZone::Safe);
        assert_eq!(classify_zone(0.5), PruningZone::Moderate);
        assert_eq!(classify_zone(0.7), PruningZone::Moderate);
        assert_eq!(classify_zone(0.8), PruningZone::High);
        assert_eq!(classify_zone(0.1 + 0.2), PruningZone::Moderate);
    }

    proptest! {
        #[test]
        fn monotone_in_ratio(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let rank = |z| match z { PruningZone::Safe => 0, PruningZone::Moderate => 1, PruningZone::High => 2 };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(rank(classify_zone(lo)) <= rank(classify_zone(hi)));
        }
    }
}
