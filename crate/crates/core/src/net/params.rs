//! Flat parameter layout shared by the optimizers and the checkpoint format.
//!
//! Segments are stored in a fixed order. The segments updated online come
//! first so that the online subset is a contiguous prefix; the remaining
//! segments (RBF widths and LGRU biases) are fitted offline only.

use serde::{Deserialize, Serialize};

use super::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    RbfWeights,
    RbfCenters,
    UpdateGateWeights,
    ResetGateWeights,
    CandidateWeights,
    GateWeights,
    GateBias,
    ReadoutWeights,
    ReadoutBias,
    RbfWidths,
    UpdateGateBias,
    ResetGateBias,
    CandidateBias,
}

impl SegmentKind {
    pub const ORDER: [SegmentKind; 13] = [
        SegmentKind::RbfWeights,
        SegmentKind::RbfCenters,
        SegmentKind::UpdateGateWeights,
        SegmentKind::ResetGateWeights,
        SegmentKind::CandidateWeights,
        SegmentKind::GateWeights,
        SegmentKind::GateBias,
        SegmentKind::ReadoutWeights,
        SegmentKind::ReadoutBias,
        SegmentKind::RbfWidths,
        SegmentKind::UpdateGateBias,
        SegmentKind::ResetGateBias,
        SegmentKind::CandidateBias,
    ];

    /// Whether the segment is refined by the event-triggered online optimizer.
    pub fn is_online(self) -> bool {
        !matches!(
            self,
            SegmentKind::RbfWidths
                | SegmentKind::UpdateGateBias
                | SegmentKind::ResetGateBias
                | SegmentKind::CandidateBias
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::RbfWeights => "rbf_weights",
            SegmentKind::RbfCenters => "rbf_centers",
            SegmentKind::UpdateGateWeights => "update_gate_weights",
            SegmentKind::ResetGateWeights => "reset_gate_weights",
            SegmentKind::CandidateWeights => "candidate_weights",
            SegmentKind::GateWeights => "gate_weights",
            SegmentKind::GateBias => "gate_bias",
            SegmentKind::ReadoutWeights => "readout_weights",
            SegmentKind::ReadoutBias => "readout_bias",
            SegmentKind::RbfWidths => "rbf_widths",
            SegmentKind::UpdateGateBias => "update_gate_bias",
            SegmentKind::ResetGateBias => "reset_gate_bias",
            SegmentKind::CandidateBias => "candidate_bias",
        }
    }

    pub fn from_name(name: &str) -> Option<SegmentKind> {
        Self::ORDER.iter().copied().find(|k| k.name() == name)
    }

    fn len(self, dims: Dims) -> usize {
        let Dims { n_in, m, p } = dims;
        let zeta = n_in + p;
        match self {
            SegmentKind::RbfWeights | SegmentKind::RbfWidths => m,
            SegmentKind::RbfCenters => m * n_in,
            SegmentKind::UpdateGateWeights
            | SegmentKind::ResetGateWeights
            | SegmentKind::CandidateWeights => p * zeta,
            SegmentKind::GateWeights => zeta,
            SegmentKind::GateBias | SegmentKind::ReadoutBias => 1,
            SegmentKind::ReadoutWeights
            | SegmentKind::UpdateGateBias
            | SegmentKind::ResetGateBias
            | SegmentKind::CandidateBias => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    dims: Dims,
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    pub fn new(dims: Dims) -> Self {
        let mut offset = 0;
        let segments = SegmentKind::ORDER
            .iter()
            .map(|&kind| {
                let len = kind.len(dims);
                let seg = Segment { kind, offset, len };
                offset += len;
                seg
            })
            .collect();
        ParamLayout {
            dims,
            segments,
            total: offset,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, kind: SegmentKind) -> Segment {
        // ORDER and `segments` are built in lockstep
        let idx = SegmentKind::ORDER.iter().position(|&k| k == kind).unwrap();
        self.segments[idx]
    }

    pub fn offset(&self, kind: SegmentKind) -> usize {
        self.segment(kind).offset
    }

    /// Boolean mask over the flat vector marking the online subset.
    pub fn online_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for seg in self.segments.iter().filter(|s| s.kind.is_online()) {
            mask[seg.range()].iter_mut().for_each(|b| *b = true);
        }
        mask
    }

    /// Flat indices of the online subset, in layout order.
    pub fn online_indices(&self) -> Vec<usize> {
        self.online_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// All trainable parameters of a network as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn online_mask(&self) -> Vec<bool> {
        self.layout.online_mask()
    }

    pub fn segment_values(&self, kind: SegmentKind) -> &[f64] {
        &self.values[self.layout.segment(kind).range()]
    }

    /// Values of the online subset in layout order.
    pub fn masked(&self) -> Vec<f64> {
        self.layout
            .online_indices()
            .into_iter()
            .map(|i| self.values[i])
            .collect()
    }

    pub fn set_masked(&mut self, masked: &[f64]) {
        for (slot, &v) in self.layout.online_indices().into_iter().zip(masked) {
            self.values[slot] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_covers_everything() {
        let layout = ParamLayout::new(Dims { n_in: 3, m: 6, p: 6 });
        let mut expected = 0;
        for seg in layout.segments() {
            assert_eq!(seg.offset, expected);
            expected += seg.len;
        }
        assert_eq!(expected, layout.len());
        assert_eq!(layout.len(), 227);
    }

    #[test]
    fn online_mask_covers_exactly_the_online_segments() {
        let layout = ParamLayout::new(Dims { n_in: 3, m: 4, p: 2 });
        let mask = layout.online_mask();
        for seg in layout.segments() {
            let expected = matches!(
                seg.kind,
                SegmentKind::RbfWeights
                    | SegmentKind::RbfCenters
                    | SegmentKind::UpdateGateWeights
                    | SegmentKind::ResetGateWeights
                    | SegmentKind::CandidateWeights
                    | SegmentKind::GateWeights
                    | SegmentKind::GateBias
                    | SegmentKind::ReadoutWeights
                    | SegmentKind::ReadoutBias
            );
            assert!(mask[seg.range()].iter().all(|&b| b == expected), "{:?}", seg.kind);
        }
        // online segments form a prefix
        let first_off = mask.iter().position(|&b| !b).unwrap();
        assert!(mask[first_off..].iter().all(|&b| !b));
    }

    #[test]
    fn segment_names_round_trip() {
        for kind in SegmentKind::ORDER {
            assert_eq!(SegmentKind::from_name(kind.name()), Some(kind));
        }
        assert_eq!(SegmentKind::from_name("nope"), None);
    }
}
