//! Dual classifier-free guidance over audio and text.

use ndarray::{Array4, NdFloat, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgMode {
    /// `u_null + (1 + wt)(u_t - u_null) + (1 + wa)(u_ta - u_t)`; equals
    /// `u_ta` when both scales are zero.
    #[default]
    Normalized,
    /// `(1 + wa) u_ta - wa u_t + (1 + wt) u_t - wt u_null`, read term by term.
    #[serde(rename = "paper_literal", alias = "literal")]
    Literal,
}

impl std::str::FromStr for CfgMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "paper_literal" | "literal" => Ok(Self::Literal),
            _ => Err(invalid(format!("unknown cfg mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for CfgMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Normalized => "normalized",
            Self::Literal => "paper_literal",
        })
    }
}

/// Time dependence of a guidance scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CfgSchedule {
    #[default]
    Constant,
    /// Scale goes linearly from `start_frac * w` at t = 0 (noise) to
    /// `end_frac * w` at t = 1 (data).
    LinearRamp { start_frac: f64, end_frac: f64 },
}

impl CfgSchedule {
    pub fn eval(&self, t: f64, w: f64) -> f64 {
        match *self {
            Self::Constant => w,
            Self::LinearRamp { start_frac, end_frac } => (start_frac + (end_frac - start_frac) * t) * w,
        }
    }
}

/// `constant` or `ramp:<start_frac>:<end_frac>`.
impl std::str::FromStr for CfgSchedule {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "constant" {
            return Ok(Self::Constant);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["ramp", a, b] => {
                let num = |v: &str| v.parse::<f64>().map_err(|_| invalid(format!("bad ramp fraction {v:?}")));
                Ok(Self::LinearRamp { start_frac: num(a)?, end_frac: num(b)? })
            }
            _ => Err(invalid(format!("unknown cfg schedule {s:?}"))),
        }
    }
}

impl std::fmt::Display for CfgSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant => f.write_str("constant"),
            Self::LinearRamp { start_frac, end_frac } => write!(f, "ramp:{start_frac}:{end_frac}"),
        }
    }
}

/// Combines the three guidance branches: text+audio, text only, and fully null.
pub fn cfg_combine<S: NdFloat>(
    mode: CfgMode,
    u_text_audio: &Array4<S>,
    u_text: &Array4<S>,
    u_null: &Array4<S>,
    w_audio: f64,
    w_text: f64,
) -> Result<Array4<S>> {
    ensure!(
        u_text_audio.dim() == u_text.dim() && u_text.dim() == u_null.dim(),
        "guidance branches have different shapes"
    );
    ensure!(w_audio.is_finite() && w_text.is_finite(), "guidance scales must be finite");
    let one = S::one();
    let wa = S::from(w_audio).expect("scale");
    let wt = S::from(w_text).expect("scale");
    let mut out = Array4::zeros(u_text_audio.raw_dim());
    let zip = Zip::from(&mut out).and(u_text_audio).and(u_text).and(u_null);
    match mode {
        // same polynomial as the documented form, arranged so zero scales
        // return the conditional branch without rounding
        CfgMode::Normalized => zip.for_each(|o, &ta, &t, &n| *o = ta + wa * (ta - t) + wt * (t - n)),
        CfgMode::Literal => {
            zip.for_each(|o, &ta, &t, &n| *o = ((one + wa) * ta - wa * t) + ((one + wt) * t - wt * n))
        }
    }
    Ok(out)
}
