//! Bringing paired recordings onto the common rate and length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{minmax_normalize, resample, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub rate: f64,
    pub samples: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            rate: 48_000.0,
            samples: 192_000,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) || self.samples == 0 {
            return Err(Error::InvalidArgument(format!("geometry {self:?}")));
        }
        Ok(())
    }
}

/// Resample, loop-pad or center-crop, then min-max normalize one stream.
pub fn canonicalize_one(x: &Waveform, geom: &Geometry) -> Result<Waveform> {
    geom.validate()?;
    let r = resample(x, geom.rate)?;
    Ok(minmax_normalize(&r.fit_length(geom.samples)).wave)
}

pub fn canonicalize(acoustic: &Waveform, vibration: &Waveform, geom: &Geometry) -> Result<(Waveform, Waveform)> {
    Ok((canonicalize_one(acoustic, geom)?, canonicalize_one(vibration, geom)?))
}
