use crate::data::{group_clips, ClassCounts, TripletRecord};
use crate::dpeg::ClipLayout;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipLabels {
    pub attention: Vec<usize>,
    pub spatial: Vec<Vec<f64>>,
    pub contact: Vec<Vec<f64>>,
}

/// All pairs of one clip, in `(frame, subj, obj)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub clip: usize,
    pub keys: Vec<(usize, usize, usize)>,
    pub features: Tensor,
    pub layout: ClipLayout,
    pub labels: Option<ClipLabels>,
}

impl ClipBatch {
    /// Records must share one clip id.
    pub fn from_records(
        records: &[TripletRecord],
        classes: &ClassCounts,
        feat_dim: usize,
    ) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::contract("empty clip"))?;
        if records.iter().any(|r| r.clip != first.clip) {
            return Err(Error::contract("records from several clips in one batch"));
        }
        for r in records {
            r.check(classes, feat_dim)?;
        }
        let keys: Vec<_> = records.iter().map(|r| (r.frame, r.subj, r.obj)).collect();
        let layout = ClipLayout::new(&keys)?;
        let features = Tensor::matrix(
            records.len(),
            feat_dim,
            records
                .iter()
                .flat_map(|r| r.feat.iter().copied())
                .collect(),
        )?;
        Ok(Self {
            clip: first.clip,
            keys,
            features,
            layout,
            labels: Some(ClipLabels {
                attention: records.iter().map(|r| r.attn).collect(),
                spatial: records.iter().map(TripletRecord::spatial_targets).collect(),
                contact: records.iter().map(TripletRecord::contact_targets).collect(),
            }),
        })
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }
}

/// One batch per clip id, in ascending clip order.
pub fn clip_batches(
    records: &[TripletRecord],
    classes: &ClassCounts,
    feat_dim: usize,
) -> Result<Vec<ClipBatch>> {
    group_clips(records)
        .iter()
        .map(|c| ClipBatch::from_records(c, classes, feat_dim))
        .collect()
}
