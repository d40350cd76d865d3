//! Published results for the propanol/propyl-acetate campaign, per design
//! stage, used by the replay command and the acceptance checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Oed1,
    Fed1,
    Oed2,
    Fed2,
    Oed3,
    Fed3,
    Tot,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Init,
        Stage::Oed1,
        Stage::Fed1,
        Stage::Oed2,
        Stage::Fed2,
        Stage::Oed3,
        Stage::Fed3,
        Stage::Tot,
    ];

    /// Embedded fixture holding the stage's measurements.
    pub fn fixture_id(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Oed1 => "oed1",
            Stage::Fed1 => "fed1",
            Stage::Oed2 => "oed2",
            Stage::Fed2 => "fed2",
            Stage::Oed3 => "oed3",
            Stage::Fed3 => "fed3",
            Stage::Tot => "tot",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.fixture_id() == s)
            .ok_or_else(|| Error::UnknownFixture(s.to_string()))
    }

    pub fn reference(self) -> &'static StageReference {
        &REFERENCE[Stage::ALL.iter().position(|s| *s == self).expect("listed")]
    }
}

/// Published values for one stage; `v` entries are mole fractions and `T`
/// entries Kelvin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageReference {
    pub stage: Stage,
    pub size: usize,
    /// Errors of the stage's fit on all 36 measurements.
    pub rmse: [f64; 2],
    /// Worst-case linearized uncertainty, per-experiment information.
    pub sigma_lin: [f64; 2],
    /// Worst-case sampling-based uncertainty, 1000 samples.
    pub sigma_sam: [f64; 2],
}

const fn r(stage: Stage, size: usize, rmse: [f64; 2], lin: [f64; 2], sam: [f64; 2]) -> StageReference {
    StageReference {
        stage,
        size,
        rmse: [rmse[0] * 1e-4, rmse[1] * 1e-2],
        sigma_lin: [lin[0] * 1e-4, lin[1] * 1e-2],
        sigma_sam: [sam[0] * 1e-4, sam[1] * 1e-2],
    }
}

pub const REFERENCE: [StageReference; 8] = [
    r(Stage::Init, 6, [72.07, 24.80], [67.90, 34.14], [17.3, 7.56]),
    r(Stage::Oed1, 9, [59.96, 15.83], [33.08, 10.79], [10.78, 3.08]),
    r(Stage::Fed1, 9, [65.74, 19.50], [32.08, 10.87], [9.84, 3.75]),
    r(Stage::Oed2, 12, [59.59, 15.10], [28.11, 10.40], [6.48, 2.53]),
    r(Stage::Fed2, 15, [63.21, 18.26], [27.46, 8.96], [6.98, 2.39]),
    r(Stage::Oed3, 15, [59.61, 16.18], [25.47, 8.26], [5.60, 1.94]),
    r(Stage::Fed3, 27, [59.86, 15.75], [24.92, 8.37], [4.49, 1.36]),
    r(Stage::Tot, 36, [58.95, 14.63], [23.07, 7.85], [3.71, 1.13]),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_match_fixture_sizes() {
        for s in Stage::ALL {
            assert_eq!(crate::io::fixture(s.fixture_id()).unwrap().len(), s.reference().size, "{s:?}");
            assert_eq!(Stage::parse(s.fixture_id()).unwrap(), s);
        }
    }
}
