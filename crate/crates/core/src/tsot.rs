//! Token-level serialized output: flattening two-speaker timed transcripts
//! into one stream with channel-change tokens, and splitting model output
//! back into speaker channels.
//!
//! Tokens are ordered by end time; a `<cc>` token is inserted wherever two
//! adjacent tokens belong to different speakers. Deserialization starts in
//! channel 0 and toggles at each `<cc>`, which with at most two speakers
//! reconstructs the per-speaker streams exactly.

use thiserror::Error;

/// Literal surface form of the channel-change token.
pub const CC_TOKEN: &str = "<cc>";

#[derive(Error, Debug)]
pub enum TsotError {
    #[error("serialization supports at most 2 speakers, got {0}")]
    TooManySpeakers(usize),
    #[error("end times not strictly increasing for speaker {0}")]
    NonIncreasingEndTimes(String),
    #[error("token must not equal the reserved {CC_TOKEN} marker")]
    ReservedToken,
}

/// A transcript token with its end time and speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedToken {
    pub token: String,
    pub end_time: f64,
    pub speaker_id: String,
}

/// Single token stream over vocabulary plus `<cc>`. A valid stream never
/// begins or ends with `<cc>` and has no two consecutive `<cc>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedTranscript {
    tokens: Vec<String>,
}

impl SerializedTranscript {
    /// Wraps a raw token stream (e.g. decoder output) without validation;
    /// `deserialize` repairs invariant violations.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        SerializedTranscript { tokens }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Space-separated text form with the literal `<cc>` marker.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn parse(text: &str) -> Self {
        SerializedTranscript {
            tokens: text.split_whitespace().map(|s| s.to_string()).collect(),
        }
    }
}

/// Two output channels; concatenating them in serialization order yields
/// the non-`<cc>` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChannelTranscripts {
    pub channels: [Vec<String>; 2],
}

/// Serializes timed tokens of at most two speakers: sort by end time (ties
/// by speaker id, then per-speaker order), then insert `<cc>` between
/// adjacent tokens of different speakers.
pub fn serialize(tokens: &[TimedToken]) -> Result<SerializedTranscript, TsotError> {
    let mut speakers: Vec<&str> = tokens.iter().map(|t| t.speaker_id.as_str()).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() > 2 {
        return Err(TsotError::TooManySpeakers(speakers.len()));
    }
    if tokens.iter().any(|t| t.token == CC_TOKEN) {
        return Err(TsotError::ReservedToken);
    }
    // Validate strictly increasing end times per speaker, in input order.
    for spk in &speakers {
        let mut last = f64::NEG_INFINITY;
        for t in tokens.iter().filter(|t| t.speaker_id == *spk) {
            if t.end_time <= last {
                return Err(TsotError::NonIncreasingEndTimes(spk.to_string()));
            }
            last = t.end_time;
        }
    }

    // Stable sort keyed by (end_time, speaker_id) keeps per-speaker input
    // order for exact ties.
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| {
        tokens[a]
            .end_time
            .partial_cmp(&tokens[b].end_time)
            .unwrap()
            .then_with(|| tokens[a].speaker_id.cmp(&tokens[b].speaker_id))
    });

    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
    let mut prev_speaker: Option<&str> = None;
    for &i in &order {
        let t = &tokens[i];
        if let Some(prev) = prev_speaker {
            if prev != t.speaker_id {
                out.push(CC_TOKEN.to_string());
            }
        }
        out.push(t.token.clone());
        prev_speaker = Some(&t.speaker_id);
    }
    Ok(SerializedTranscript { tokens: out })
}

/// Splits a serialized stream into two channels: start in channel 0, each
/// `<cc>` toggles the active channel.
///
/// Model output may violate the stream invariants; leading, trailing and
/// duplicated `<cc>` markers are dropped and counted as repairs.
pub fn deserialize(s: &SerializedTranscript) -> (ChannelTranscripts, usize) {
    let mut channels = ChannelTranscripts::default();
    let mut active = 0usize;
    let mut repairs = 0usize;
    let mut seen_token = false;
    let mut pending_cc = false;
    for tok in s.tokens() {
        if tok == CC_TOKEN {
            if !seen_token || pending_cc {
                // leading or doubled marker
                repairs += 1;
            } else {
                pending_cc = true;
            }
        } else {
            if pending_cc {
                active ^= 1;
                pending_cc = false;
            }
            channels.channels[active].push(tok.clone());
            seen_token = true;
        }
    }
    if pending_cc {
        repairs += 1; // trailing marker
    }
    (channels, repairs)
}
