//! Multi-channel feature maps and the fusion variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source of a feature channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// Log-Mel spectrogram of the acoustic stream.
    M,
    /// Learned temporal feature of the acoustic stream.
    A,
    /// Learned temporal feature of the vibration stream.
    V,
}

/// Which channels are stacked into the classifier input, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MAV")]
    Mav,
    #[serde(rename = "ST")]
    St,
    #[serde(rename = "MV")]
    Mv,
    #[serde(rename = "AV")]
    Av,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mav, Variant::St, Variant::Mv, Variant::Av];

    pub fn channels(self) -> &'static [Channel] {
        match self {
            Variant::Mav => &[Channel::M, Channel::A, Channel::V],
            Variant::St => &[Channel::M, Channel::A],
            Variant::Mv => &[Channel::M, Channel::V],
            Variant::Av => &[Channel::A, Channel::V],
        }
    }

    pub fn uses(self, ch: Channel) -> bool {
        self.channels().contains(&ch)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mav => "MAV",
            Variant::St => "ST",
            Variant::Mv => "MV",
            Variant::Av => "AV",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MAV" | "MAVGRAM" => Ok(Variant::Mav),
            "ST" | "STGRAM" => Ok(Variant::St),
            "MV" | "MVGRAM" => Ok(Variant::Mv),
            "AV" | "AVGRAM" => Ok(Variant::Av),
            _ => Err(Error::InvalidArgument(format!(
                "unknown feature variant `{s}` (expected MAV, ST, MV or AV)"
            ))),
        }
    }
}

/// `channels x mel_bins x frames` grid of finite values, tagged by channel source.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    tags: Vec<Channel>,
    mels: usize,
    frames: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(tags: Vec<Channel>, mels: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if tags.is_empty() || data.len() != tags.len() * mels * frames {
            return Err(Error::Shape(format!(
                "{} channels x {mels} x {frames} does not match {} values",
                tags.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature map contains non-finite values".into()));
        }
        Ok(Self {
            tags,
            mels,
            frames,
            data,
        })
    }

    pub fn tags(&self) -> &[Channel] {
        &self.tags
    }

    pub fn channels(&self) -> usize {
        self.tags.len()
    }

    pub fn mels(&self) -> usize {
        self.mels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.tags.len(), self.mels, self.frames]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// One channel as its own map.
    pub fn channel(&self, i: usize) -> FeatureMap {
        let plane = self.mels * self.frames;
        FeatureMap {
            tags: vec![self.tags[i]],
            mels: self.mels,
            frames: self.frames,
            data: self.data[i * plane..(i + 1) * plane].to_vec(),
        }
    }

    /// Inverse of [`assemble`].
    pub fn split(&self) -> Vec<FeatureMap> {
        (0..self.channels()).map(|i| self.channel(i)).collect()
    }
}

/// Stacks single-channel maps in the order the variant declares (e.g. MAV = [M, A, V]).
///
/// `maps` may be given in any order and may contain channels the variant does not use; the
/// ones it needs must be present exactly once and share one `mels x frames` shape.
pub fn assemble(maps: &[&FeatureMap], variant: Variant) -> Result<FeatureMap> {
    let mut data = Vec::new();
    let mut shape = None;
    for &want in variant.channels() {
        let found: Vec<&&FeatureMap> = maps
            .iter()
            .filter(|m| m.channels() == 1 && m.tags[0] == want)
            .collect();
        let m = match found.as_slice() {
            [m] => *m,
            [] => return Err(Error::InvalidArgument(format!("{variant} needs a {want:?} channel"))),
            _ => return Err(Error::InvalidArgument(format!("more than one {want:?} channel given"))),
        };
        match shape {
            None => shape = Some((m.mels, m.frames)),
            Some(s) if s != (m.mels, m.frames) => {
                return Err(Error::Shape(format!(
                    "{want:?} is {}x{}, expected {}x{}",
                    m.mels, m.frames, s.0, s.1
                )))
            }
            _ => {}
        }
        data.extend_from_slice(&m.data);
    }
    let (mels, frames) = shape.expect("variants have at least two channels");
    FeatureMap::new(variant.channels().to_vec(), mels, frames, data)
}
