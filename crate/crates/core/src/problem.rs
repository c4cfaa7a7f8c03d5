use serde::{Deserialize, Serialize};

use crate::dynamics::InputBox;
use crate::error::Result;
use crate::reference::ReferenceSegment;
use crate::region::RegionSpec;

/// Path following lets the timing law choose `u0`; trajectory tracking pins
/// `theta' = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pf,
    Tt,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Pf => "PF",
            Mode::Tt => "TT",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pf" => Ok(Mode::Pf),
            "tt" => Ok(Mode::Tt),
            other => Err(format!("unknown mode '{other}' (expected pf or tt)")),
        }
    }
}

/// Everything the certificate conditions quantify over for one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentProblem {
    pub reference: ReferenceSegment,
    pub regions: RegionSpec,
    /// Saturation box over `(u0, w, thrust)`; pinned `u0` in TT mode.
    pub inputs: InputBox,
    pub wheelbase: f64,
    pub mode: Mode,
}

impl SegmentProblem {
    pub fn new(
        reference: ReferenceSegment,
        regions: RegionSpec,
        u0_bounds: (f64, f64),
        wheelbase: f64,
        mode: Mode,
    ) -> Result<Self> {
        regions.validate(&reference)?;
        let mut inputs = InputBox::new(u0_bounds.0, u0_bounds.1, wheelbase)?;
        if mode == Mode::Tt {
            inputs = inputs.with_fixed_timing();
        }
        Ok(Self {
            reference,
            regions,
            inputs,
            wheelbase,
            mode,
        })
    }

    pub fn t_end(&self) -> f64 {
        self.reference.t_end
    }
}
