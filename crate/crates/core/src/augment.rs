//! Random swap and random deletion views.
//!
//! `Aug_alpha` is swap first, then delete, both at the same strength. Code and
//! text views draw from separate sub-streams keyed by (seed, example, epoch),
//! so either view can be rebuilt on its own.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Strength used when nothing else is configured.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(alloc::format!(
                "augmentation strength {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewPair {
    pub original: TokenSequence,
    pub augmented: TokenSequence,
}

/// Number of swaps for a sequence of `len` tokens.
pub fn swap_count(len: usize, alpha: f64) -> usize {
    if alpha <= 0.0 {
        0
    } else {
        (libm::floor(alpha * len as f64) as usize).max(1)
    }
}

/// Performs `max(1, floor(alpha * len))` swaps of two distinct uniformly
/// chosen positions. Identity when `alpha == 0` or the input has fewer than
/// two tokens.
pub fn random_swap<T: Clone>(tokens: &[T], alpha: f64, rng: &mut impl Rng) -> Vec<T> {
    let mut out = tokens.to_vec();
    let len = out.len();
    if len < 2 {
        return out;
    }
    for _ in 0..swap_count(len, alpha) {
        let i = rng.gen_range(0..len);
        let mut j = rng.gen_range(0..len - 1);
        if j >= i {
            j += 1;
        }
        out.swap(i, j);
    }
    out
}

/// Drops each token independently with probability `alpha`; if nothing
/// survives, one uniformly chosen token is kept.
pub fn random_delete<T: Clone>(tokens: &[T], alpha: f64, rng: &mut impl Rng) -> Vec<T> {
    if alpha <= 0.0 || tokens.is_empty() {
        return tokens.to_vec();
    }
    let kept: Vec<T> = tokens
        .iter()
        .filter(|_| rng.gen::<f64>() >= alpha)
        .cloned()
        .collect();
    if kept.is_empty() {
        let keep = rng.gen_range(0..tokens.len());
        return alloc::vec![tokens[keep].clone()];
    }
    kept
}

pub fn augment_tokens<T: Clone>(tokens: &[T], alpha: f64, rng: &mut impl Rng) -> Vec<T> {
    let swapped = random_swap(tokens, alpha, rng);
    random_delete(&swapped, alpha, rng)
}

/// Sub-stream for one view of one example in one epoch.
pub fn view_stream(
    config: &AugConfig,
    view_domain: u64,
    example_key: u64,
    epoch: u64,
) -> rng::StreamRng {
    rng::substream(config.seed, &[view_domain, example_key, epoch])
}

/// Builds `(code, text)` view pairs for one example. `example_key` is usually
/// [`rng::hash_str`] of the record id.
pub fn make_augmented_views(
    code: &TokenSequence,
    text: &TokenSequence,
    config: &AugConfig,
    example_key: u64,
    epoch: u64,
) -> Result<(ViewPair, ViewPair)> {
    config.validate()?;
    if code.is_empty() || text.is_empty() {
        return Err(Error::invalid("augmentation needs non-empty token lists"));
    }
    let mut code_rng = view_stream(config, domain::AUGMENT_CODE, example_key, epoch);
    let mut text_rng = view_stream(config, domain::AUGMENT_TEXT, example_key, epoch);
    let code_aug = TokenSequence {
        tokens: augment_tokens(&code.tokens, config.alpha, &mut code_rng),
        modality: code.modality,
    };
    let text_aug = TokenSequence {
        tokens: augment_tokens(&text.tokens, config.alpha, &mut text_rng),
        modality: text.modality,
    };
    Ok((
        ViewPair {
            original: code.clone(),
            augmented: code_aug,
        },
        ViewPair {
            original: text.clone(),
            augmented: text_aug,
        },
    ))
}
