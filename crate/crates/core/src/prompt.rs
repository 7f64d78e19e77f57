//! Model input layout: image slots, question prefix, answer suffix, padding,
//! and the suffix-only loss mask.
//!
//! Tokens are symbolic (whitespace split); a downstream trainer re-tokenizes
//! and re-derives the mask from the stored counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOS: &str = "<BOS>";
pub const SEP: &str = "<SEP>";
pub const EOS: &str = "<EOS>";
pub const PAD: &str = "<PAD>";

pub const DEFAULT_PATCHES_PER_FRAME: usize = 256;
pub const DEFAULT_CUE: &str = "answer en";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("pad_to = {pad_to} is shorter than the unpadded length {length}")]
    PadTooSmall { pad_to: usize, length: usize },
    #[error("sequence has no suffix")]
    EmptySuffix,
    #[error("n_frames and patches per frame must be positive")]
    InvalidImageCount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub image_slot_count: usize,
    pub prefix_tokens: Vec<String>,
    pub suffix_tokens: Vec<String>,
    pub pad_count: usize,
    pub loss_mask: Vec<bool>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.image_slot_count + self.prefix_tokens.len() + self.suffix_tokens.len() + self.pad_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct PromptParams<'a> {
    pub n_frames: usize,
    pub question: &'a str,
    /// `None` builds an inference-mode sequence with an empty suffix.
    pub answer: Option<&'a str>,
    pub patches_per_frame: usize,
    pub cue: &'a str,
    pub pad_to: Option<usize>,
}

impl<'a> PromptParams<'a> {
    pub fn new(n_frames: usize, question: &'a str, answer: Option<&'a str>) -> Self {
        Self {
            n_frames,
            question,
            answer,
            patches_per_frame: DEFAULT_PATCHES_PER_FRAME,
            cue: DEFAULT_CUE,
            pad_to: None,
        }
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_string)
}

pub fn assemble(params: &PromptParams<'_>) -> Result<PromptSequence, PromptError> {
    if params.n_frames == 0 || params.patches_per_frame == 0 {
        return Err(PromptError::InvalidImageCount);
    }
    let image_slot_count = params.n_frames * params.patches_per_frame;
    let prefix_tokens: Vec<String> = std::iter::once(BOS.to_string())
        .chain(words(params.cue))
        .chain(words(params.question))
        .chain(std::iter::once(SEP.to_string()))
        .collect();
    let suffix_tokens: Vec<String> = match params.answer {
        Some(answer) => words(answer).chain(std::iter::once(EOS.to_string())).collect(),
        None => Vec::new(),
    };
    let unpadded = image_slot_count + prefix_tokens.len() + suffix_tokens.len();
    let pad_count = match params.pad_to {
        Some(pad_to) if pad_to < unpadded => {
            return Err(PromptError::PadTooSmall {
                pad_to,
                length: unpadded,
            })
        }
        Some(pad_to) => pad_to - unpadded,
        None => 0,
    };
    let suffix_start = image_slot_count + prefix_tokens.len();
    let loss_mask = (0..unpadded + pad_count)
        .map(|i| i >= suffix_start && i < unpadded)
        .collect();
    Ok(PromptSequence {
        image_slot_count,
        prefix_tokens,
        suffix_tokens,
        pad_count,
        loss_mask,
    })
}

/// Half-open range `[start, start + length)` of loss-bearing positions.
pub fn mask_span(ps: &PromptSequence) -> Result<(usize, usize), PromptError> {
    if ps.suffix_tokens.is_empty() {
        return Err(PromptError::EmptySuffix);
    }
    Ok((
        ps.image_slot_count + ps.prefix_tokens.len(),
        ps.suffix_tokens.len(),
    ))
}

/// One line of a prompt file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub item_id: String,
    pub n_frames: usize,
    pub p: usize,
    pub cue: String,
    pub question: String,
    pub answer: Option<String>,
    pub frame_indices: Vec<usize>,
    pub total_length: usize,
    pub mask_start: Option<usize>,
    pub mask_length: usize,
}

impl PromptRecord {
    pub fn from_sequence(
        item_id: &str,
        params: &PromptParams<'_>,
        frame_indices: Vec<usize>,
        ps: &PromptSequence,
    ) -> Self {
        let span = mask_span(ps).ok();
        Self {
            item_id: item_id.to_string(),
            n_frames: params.n_frames,
            p: params.patches_per_frame,
            cue: params.cue.to_string(),
            question: params.question.to_string(),
            answer: params.answer.map(str::to_string),
            frame_indices,
            total_length: ps.len(),
            mask_start: span.map(|s| s.0),
            mask_length: span.map_or(0, |s| s.1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_frames_give_2048_slots() {
        let ps = assemble(&PromptParams::new(8, "what?", Some("yes"))).unwrap();
        assert_eq!(ps.image_slot_count, 2048);
        assert_eq!(ps.prefix_tokens, ["<BOS>", "answer", "en", "what?", "<SEP>"]);
        assert_eq!(ps.suffix_tokens, ["yes", "<EOS>"]);
    }

    #[test]
    fn inference_mode_has_no_loss() {
        let ps = assemble(&PromptParams::new(2, "who is it", None)).unwrap();
        assert!(ps.suffix_tokens.is_empty());
        assert!(ps.loss_mask.iter().all(|m| !m));
        assert_eq!(mask_span(&ps), Err(PromptError::EmptySuffix));
    }

    #[test]
    fn padding_is_masked_out() {
        let base = assemble(&PromptParams::new(1, "is it char_01", Some("yes"))).unwrap();
        let params = PromptParams {
            pad_to: Some(base.len() + 3),
            ..PromptParams::new(1, "is it char_01", Some("yes"))
        };
        let ps = assemble(&params).unwrap();
        assert_eq!(ps.pad_count, 3);
        assert_eq!(ps.loss_mask.iter().filter(|m| **m).count(), 2);
        assert!(ps.loss_mask[ps.len() - 3..].iter().all(|m| !m));
        assert_eq!(ps.loss_mask.len(), ps.len());
    }

    #[test]
    fn pad_too_small() {
        let params = PromptParams {
            pad_to: Some(10),
            ..PromptParams::new(1, "q", Some("a"))
        };
        assert_eq!(
            assemble(&params),
            Err(PromptError::PadTooSmall { pad_to: 10, length: 256 + 5 + 2 })
        );
    }

    #[test]
    fn span_arithmetic() {
        // prefix: BOS answer en + 3 question words + SEP = 7; suffix: 2 words + EOS
        let ps = assemble(&PromptParams::new(1, "which character appears", Some("Evading Left")))
            .unwrap();
        assert_eq!(ps.prefix_tokens.len(), 7);
        assert_eq!(mask_span(&ps).unwrap(), (263, 3));
        assert_eq!(ps.loss_mask.iter().position(|m| *m), Some(263));
    }
}
