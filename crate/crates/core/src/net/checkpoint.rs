//! JSON checkpoint of a network.
//!
//! Every number is written with 17 significant digits so that loading a
//! checkpoint reproduces the weights bit for bit.

use std::fs;
use std::path::Path;

use serde::ser::{Error as _, SerializeSeq};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use super::{Dims, SegmentKind, TgrbfState};
use crate::error::{check_len, Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tgrbf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSegment {
    pub name: String,
    #[serde(serialize_with = "exact_floats")]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub segments: Vec<CheckpointSegment>,
    #[serde(serialize_with = "exact_floats")]
    pub h_init: Vec<f64>,
}

/// Formats a finite float with 17 significant digits.
pub fn format_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn exact_floats<S: Serializer>(values: &[f64], ser: S) -> std::result::Result<S::Ok, S::Error> {
    let mut seq = ser.serialize_seq(Some(values.len()))?;
    for &v in values {
        if !v.is_finite() {
            return Err(S::Error::custom(format!("cannot serialize non-finite value {v}")));
        }
        let raw = RawValue::from_string(format_exact(v)).map_err(S::Error::custom)?;
        seq.serialize_element(&raw)?;
    }
    seq.end()
}

impl Checkpoint {
    pub fn from_state(net: &TgrbfState) -> Self {
        let flat = net.flatten();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: net.dims(),
            segments: flat
                .layout
                .segments()
                .iter()
                .map(|seg| CheckpointSegment {
                    name: seg.kind.name().into(),
                    values: flat.values[seg.range()].to_vec(),
                })
                .collect(),
            h_init: net.h_init.clone(),
        }
    }

    /// Rebuilds the network; the hidden state starts at `h_init`.
    pub fn to_state(&self) -> Result<TgrbfState> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "not a network checkpoint (format {:?})",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut net = TgrbfState::zeros(self.dims)?;
        let layout = net.layout();
        check_len("checkpoint segments", layout.segments().len(), self.segments.len())?;
        let mut values = vec![0.0; layout.len()];
        for (seg, stored) in layout.segments().iter().zip(&self.segments) {
            let kind = SegmentKind::from_name(&stored.name).ok_or_else(|| {
                Error::Config(format!("unknown checkpoint segment {:?}", stored.name))
            })?;
            if kind != seg.kind {
                return Err(Error::Config(format!(
                    "segment {:?} out of order, expected {:?}",
                    stored.name,
                    seg.kind.name()
                )));
            }
            check_len(seg.kind.name(), seg.len, stored.values.len())?;
            values[seg.range()].copy_from_slice(&stored.values);
        }
        net.unflatten(&values)?;
        check_len("h_init", self.dims.p, self.h_init.len())?;
        net.h_init.clone_from(&self.h_init);
        net.reset();
        net.rbf.validate()?;
        net.lgru.validate()?;
        Ok(net)
    }
}

pub fn save_checkpoint(net: &TgrbfState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&Checkpoint::from_state(net))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TgrbfState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.to_state()
}
