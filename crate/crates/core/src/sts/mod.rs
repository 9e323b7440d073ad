//! Structured temporal scripts: per-segment event descriptions and the
//! pooled/replicated feature sequences the model consumes.

mod encoder;

pub use encoder::{TextEncoder, DEFAULT_EMBED_DIM, DEFAULT_MAX_SEQUENCE_LEN};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loudness {
    Quiet,
    Normal,
    Loud,
}

impl Loudness {
    pub fn word(self) -> &'static str {
        match self {
            Loudness::Quiet => "quiet",
            Loudness::Normal => "normal",
            Loudness::Loud => "loud",
        }
    }

    /// Amplitude multiplier used when rendering.
    pub fn amplitude(self) -> f64 {
        match self {
            Loudness::Quiet => 0.5,
            Loudness::Normal => 1.0,
            Loudness::Loud => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timbre {
    Smooth,
    Sharp,
}

impl Timbre {
    pub fn word(self) -> &'static str {
        match self {
            Timbre::Smooth => "smooth",
            Timbre::Sharp => "sharp",
        }
    }
}

/// In/out-of-frame label a control file may attach to a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameLabel {
    In,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub class: usize,
    pub desc: String,
    pub loudness: Loudness,
    pub timbre: Timbre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSegment {
    pub index: usize,
    pub empty: bool,
    pub events: Vec<ScriptEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<FrameLabel>,
}

impl ScriptSegment {
    pub fn empty_at(index: usize) -> Self {
        ScriptSegment {
            index,
            empty: true,
            events: Vec::new(),
            frame: None,
        }
    }

    pub fn with_events(index: usize, events: Vec<ScriptEvent>) -> Self {
        ScriptSegment {
            index,
            empty: events.is_empty(),
            events,
            frame: None,
        }
    }
}

/// The user-facing control script: one caption slot per fixed-length segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptTimeline {
    pub segment_duration_s: f64,
    pub segments: Vec<ScriptSegment>,
    pub clip_duration_s: f64,
}

#[derive(Serialize, Deserialize)]
struct TimelineFile {
    segment_duration_s: f64,
    segments: Vec<ScriptSegment>,
}

impl ScriptTimeline {
    pub fn new(segment_duration_s: f64, segments: Vec<ScriptSegment>) -> Result<Self> {
        if segment_duration_s <= 0.0 {
            return Err(Error::Parameter(format!(
                "segment duration must be positive, got {segment_duration_s}"
            )));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.empty && !s.events.is_empty() {
                return Err(Error::Contract(format!(
                    "segment {i} marked empty but carries {} events",
                    s.events.len()
                )));
            }
        }
        let clip_duration_s = segment_duration_s * segments.len() as f64;
        Ok(ScriptTimeline {
            segment_duration_s,
            segments,
            clip_duration_s,
        })
    }

    /// All-empty timeline covering `n_segments` segments.
    pub fn empty(segment_duration_s: f64, n_segments: usize) -> Result<Self> {
        let segments = (0..n_segments).map(ScriptSegment::empty_at).collect();
        ScriptTimeline::new(segment_duration_s, segments)
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Blank copy: same shape, every segment empty. Used for the script-free
    /// generation path.
    pub fn blanked(&self) -> Self {
        ScriptTimeline::empty(self.segment_duration_s, self.segments.len())
            .expect("blanking preserves validity")
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TimelineFile {
            segment_duration_s: self.segment_duration_s,
            segments: self.segments.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(format!("timeline encode: {e}")))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TimelineFile =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("timeline decode: {e}")))?;
        ScriptTimeline::new(file.segment_duration_s, file.segments)
    }
}

/// Caption for one non-empty segment: each event rendered as
/// "desc, loudness, timbre", events joined by "; ".
pub fn compose_caption(segment: &ScriptSegment) -> Result<String> {
    if segment.empty || segment.events.is_empty() {
        return Err(Error::Contract(format!(
            "segment {} is empty; use the empty-embedding path",
            segment.index
        )));
    }
    Ok(segment
        .events
        .iter()
        .map(|e| format!("{}, {}, {}", e.desc, e.loudness.word(), e.timbre.word()))
        .collect::<Vec<_>>()
        .join("; "))
}

/// Pooled embedding of a segment caption.
pub fn encode_segment(caption: &str, encoder: &TextEncoder) -> Vec<f64> {
    encoder.encode_pooled(caption)
}

/// Script features ready for fusion: pooled captions replicated
/// `tokens_per_segment` times each, concatenated along the sequence. Rows of
/// empty segments are zeroed in `tokens` and flagged in `empty_mask`; the
/// learnable empty embedding is substituted by the model (or by
/// [`StsFeatures::materialized`] for inspection).
#[derive(Debug, Clone, PartialEq)]
pub struct StsFeatures {
    pub tokens: Tensor,
    pub empty_mask: Vec<bool>,
    pub tokens_per_segment: usize,
    pub embed_dim: usize,
    pub segment_duration_s: f64,
}

impl StsFeatures {
    pub fn seq_len(&self) -> usize {
        self.empty_mask.len()
    }

    pub fn n_segments(&self) -> usize {
        self.seq_len() / self.tokens_per_segment
    }

    /// Tokens with the empty embedding substituted into flagged rows.
    pub fn materialized(&self, empty_embedding: &[f64]) -> Result<Tensor> {
        if empty_embedding.len() != self.embed_dim {
            return Err(Error::Shape(format!(
                "empty embedding has {} dims, features have {}",
                empty_embedding.len(),
                self.embed_dim
            )));
        }
        let mut data = self.tokens.data().to_vec();
        for (row, &is_empty) in self.empty_mask.iter().enumerate() {
            if is_empty {
                data[row * self.embed_dim..(row + 1) * self.embed_dim]
                    .copy_from_slice(empty_embedding);
            }
        }
        Tensor::new(vec![self.seq_len(), self.embed_dim], data)
    }

    /// All rows replaced by the empty embedding: the CFG null branch and the
    /// condition-dropout outcome.
    pub fn to_all_empty(&self) -> StsFeatures {
        StsFeatures {
            tokens: Tensor::zeros(vec![self.seq_len(), self.embed_dim]),
            empty_mask: vec![true; self.seq_len()],
            tokens_per_segment: self.tokens_per_segment,
            embed_dim: self.embed_dim,
            segment_duration_s: self.segment_duration_s,
        }
    }
}

/// Build the full script feature sequence for one timeline.
pub fn build_sts_features(
    timeline: &ScriptTimeline,
    tokens_per_segment: usize,
    encoder: &TextEncoder,
) -> Result<StsFeatures> {
    if tokens_per_segment == 0 {
        return Err(Error::Parameter("tokens_per_segment must be >= 1".into()));
    }
    if timeline.segments.is_empty() {
        return Err(Error::Contract("timeline has no segments".into()));
    }
    let n = timeline.segments.len();
    let seq_len = tokens_per_segment * n;
    if seq_len > encoder.max_sequence_len() {
        return Err(Error::Capacity(format!(
            "sequence {seq_len} exceeds configured max {}",
            encoder.max_sequence_len()
        )));
    }
    let d = encoder.dim();
    let mut data = vec![0.0; seq_len * d];
    let mut empty_mask = vec![false; seq_len];
    for (si, segment) in timeline.segments.iter().enumerate() {
        if segment.empty || segment.events.is_empty() {
            for row in si * tokens_per_segment..(si + 1) * tokens_per_segment {
                empty_mask[row] = true;
            }
            continue;
        }
        let caption = compose_caption(segment)?;
        let pooled = encode_segment(&caption, encoder);
        for row in si * tokens_per_segment..(si + 1) * tokens_per_segment {
            data[row * d..(row + 1) * d].copy_from_slice(&pooled);
        }
    }
    Ok(StsFeatures {
        tokens: Tensor::new(vec![seq_len, d], data)?,
        empty_mask,
        tokens_per_segment,
        embed_dim: d,
        segment_duration_s: timeline.segment_duration_s,
    })
}

/// Re-express a timeline on a different segment grid. Splitting duplicates a
/// segment's events into its children; merging unions child events. Total
/// token count (tokens_per_second x clip seconds) is preserved by pairing
/// with `tokens_for_duration`.
pub fn resegment(
    timeline: &ScriptTimeline,
    new_duration_s: f64,
    tokens_per_second: u32,
) -> Result<ScriptTimeline> {
    tokens_for_duration(tokens_per_second, new_duration_s)?;
    let old = timeline.segment_duration_s;
    let ratio_split = old / new_duration_s;
    let ratio_merge = new_duration_s / old;
    if (ratio_split - 1.0).abs() < 1e-9 {
        return Ok(timeline.clone());
    }
    if (ratio_split - ratio_split.round()).abs() < 1e-9 && ratio_split > 1.0 {
        let k = ratio_split.round() as usize;
        let mut segments = Vec::with_capacity(timeline.segments.len() * k);
        for seg in &timeline.segments {
            for _ in 0..k {
                let mut child = seg.clone();
                child.index = segments.len();
                segments.push(child);
            }
        }
        return ScriptTimeline::new(new_duration_s, segments);
    }
    if (ratio_merge - ratio_merge.round()).abs() < 1e-9 && ratio_merge > 1.0 {
        let k = ratio_merge.round() as usize;
        if timeline.segments.len() % k != 0 {
            return Err(Error::Parameter(format!(
                "{} segments cannot merge in groups of {k}",
                timeline.segments.len()
            )));
        }
        let mut segments = Vec::with_capacity(timeline.segments.len() / k);
        for group in timeline.segments.chunks_exact(k) {
            let mut events: Vec<ScriptEvent> = Vec::new();
            for child in group {
                for e in &child.events {
                    if !events.contains(e) {
                        events.push(e.clone());
                    }
                }
            }
            let labels: Vec<FrameLabel> = group.iter().filter_map(|s| s.frame).collect();
            let frame = if labels.is_empty() {
                None
            } else if labels.contains(&FrameLabel::Out) && !labels.contains(&FrameLabel::In) {
                Some(FrameLabel::Out)
            } else {
                Some(FrameLabel::In)
            };
            let index = segments.len();
            let empty = events.is_empty();
            segments.push(ScriptSegment {
                index,
                empty,
                events,
                frame,
            });
        }
        return ScriptTimeline::new(new_duration_s, segments);
    }
    Err(Error::Parameter(format!(
        "segment duration {old} s neither divides nor groups evenly into {new_duration_s} s"
    )))
}

/// Tokens per segment at a given duration; errors when the count is not a
/// positive integer.
pub fn tokens_for_duration(tokens_per_second: u32, duration_s: f64) -> Result<usize> {
    let t = tokens_per_second as f64 * duration_s;
    if t < 1.0 - 1e-9 || (t - t.round()).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "{tokens_per_second} tokens/s x {duration_s} s = {t} is not a positive integer"
        )));
    }
    Ok(t.round() as usize)
}

/// With probability `p` replace every row by the empty embedding. The flag in
/// the returned pair records the decision for the guidance null branch.
pub fn apply_condition_dropout<R: Rng>(
    features: &StsFeatures,
    p: f64,
    rng: &mut R,
) -> Result<(StsFeatures, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1]")));
    }
    let dropped = rng.gen::<f64>() < p;
    if dropped {
        Ok((features.to_all_empty(), true))
    } else {
        Ok((features.clone(), false))
    }
}
