//! Wall-clock inference latency of the code-only path.

use std::time::Instant;

use multivul_core::corpus::TokenSequence;
use multivul_core::model::DualEncoderModel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Seconds per sample.
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub samples: usize,
    pub batch_size: usize,
    pub repetitions: usize,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `repetitions` passes over `code` in batches of `batch_size` after
/// one untimed warm-up pass. Each batch contributes its per-sample time
/// once per sample.
pub fn latency_bench(
    model: &DualEncoderModel,
    code: &[TokenSequence],
    repetitions: usize,
    batch_size: usize,
) -> Result<LatencyReport> {
    if repetitions < 3 {
        return Err(Error::Usage(
            "latency benchmark needs at least 3 repetitions".into(),
        ));
    }
    if batch_size == 0 || code.is_empty() {
        return Err(Error::Usage(
            "latency benchmark needs records and a positive batch size".into(),
        ));
    }
    let text_calls = model.text_encoder_calls();
    for chunk in code.chunks(batch_size) {
        model.predict_proba(chunk)?;
    }
    let mut times = Vec::with_capacity(code.len() * repetitions);
    for _ in 0..repetitions {
        for chunk in code.chunks(batch_size) {
            let start = Instant::now();
            std::hint::black_box(model.predict_proba(chunk)?);
            let per = (start.elapsed().as_secs_f64() / chunk.len() as f64).max(1e-9);
            times.extend(std::iter::repeat_n(per, chunk.len()));
        }
    }
    assert_eq!(
        model.text_encoder_calls(),
        text_calls,
        "code-only inference invoked the text encoder"
    );
    times.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        mean: times.iter().sum::<f64>() / times.len() as f64,
        p50: percentile(&times, 0.5),
        p95: percentile(&times, 0.95),
        samples: times.len(),
        batch_size,
        repetitions,
    })
}
