use std::str::FromStr;

use dlcz_core::stats::Window;

pub const US: f64 = 1e-6;
pub const MHZ: f64 = 1e6;

/// `A,B` in microseconds from the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroWindow {
    pub start_us: f64,
    pub end_us: f64,
}

/// Microseconds to seconds; division keeps decimal inputs correctly rounded.
pub fn us(x: f64) -> f64 {
    x / 1e6
}

impl MicroWindow {
    pub fn seconds(&self) -> Window {
        Window { start: us(self.start_us), end: us(self.end_us) }
    }
}

impl FromStr for MicroWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(',').ok_or_else(|| format!("expected A,B in us, got '{s}'"))?;
        let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}"));
        let (start_us, end_us) = (parse(a)?, parse(b)?);
        if !(start_us.is_finite() && end_us.is_finite() && start_us < end_us) {
            return Err(format!("window needs finite A < B, got {start_us},{end_us}"));
        }
        Ok(Self { start_us, end_us })
    }
}
