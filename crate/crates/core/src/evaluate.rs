//! Code-only inference, classification metrics, PCA of embeddings and
//! false-negative overlap analysis.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{encode_text, FunctionRecord, Modality, TokenSequence, Vocabulary};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::DualEncoderModel;
use crate::rng::{self, domain};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const PREDICT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probability: f64,
    pub predicted: u8,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub method: String,
    pub threshold: f64,
    pub predictions: Vec<Prediction>,
}

/// `1` iff `p > threshold`; a probability exactly at the threshold is negative.
pub fn threshold_label(p: f64, threshold: f64) -> u8 {
    u8::from(p > threshold)
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(())
}

pub fn encode_code(
    records: &[FunctionRecord],
    vocab: &Vocabulary,
    max_input_length: usize,
) -> Vec<TokenSequence> {
    records
        .iter()
        .map(|r| encode_text(&r.code, vocab, max_input_length))
        .collect()
}

/// Probabilities for already-encoded code sequences, scored in fixed chunks.
pub fn score_sequences(model: &DualEncoderModel, code: &[TokenSequence]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(code.len());
    for chunk in code.chunks(PREDICT_CHUNK) {
        out.extend(model.predict_proba(chunk)?);
    }
    Ok(out)
}

/// Scores records from their source code alone.
pub fn predict(
    model: &DualEncoderModel,
    records: &[FunctionRecord],
    vocab: &Vocabulary,
    threshold: f64,
    method: &str,
) -> Result<PredictionSet> {
    if records.is_empty() {
        return Err(Error::invalid("predict needs at least one record"));
    }
    check_threshold(threshold)?;
    if vocab.modality() != Modality::Code {
        return Err(Error::invalid("predict needs the code vocabulary"));
    }
    let seqs = encode_code(records, vocab, model.config().max_input_length);
    let probs = score_sequences(model, &seqs)?;
    Ok(PredictionSet {
        method: method.to_string(),
        threshold,
        predictions: records
            .iter()
            .zip(probs)
            .map(|(r, p)| Prediction {
                id: r.id.clone(),
                probability: p,
                predicted: threshold_label(p, threshold),
                label: r.label,
                cwe: r.cwe.clone(),
            })
            .collect(),
    })
}

/// Binary metrics with *vulnerable* as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Rounds a fraction to a percentage with two decimals.
pub fn percent(v: f64) -> f64 {
    libm::round(v * 10_000.0) / 100.0
}

pub fn compute_metrics(predictions: &[Prediction]) -> Metrics {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for p in predictions {
        match (p.label == 1, p.predicted == 1) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Metrics::from_counts(tp, fp, fn_, tn)
}

/// Scores a target corpus with a model and vocabulary from a different
/// source corpus. Target tokens outside the source vocabulary become
/// unknown.
pub fn cross_dataset_eval(
    model: &DualEncoderModel,
    target: &[FunctionRecord],
    source_vocab: &Vocabulary,
    threshold: f64,
    method: &str,
) -> Result<(Metrics, PredictionSet)> {
    let preds = predict(model, target, source_vocab, threshold, method)?;
    Ok((compute_metrics(&preds.predictions), preds))
}

// --- PCA ------------------------------------------------------------------

pub const PCA_TOLERANCE: f64 = 1e-9;
pub const PCA_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub components: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
    pub coordinates: Vec<[f64; 2]>,
    pub labels: Vec<u8>,
    pub mean: Vec<f64>,
}

fn mat_vec(c: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            c[i * d..(i + 1) * d]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(u) {
            *x -= d * y;
        }
    }
}

/// Deterministic start: the largest column of the matrix, nudged by a tiny
/// seeded vector so it cannot be exactly orthogonal to the top eigenvector.
fn start_vector(c: &[f64], d: usize, found: &[Vec<f64>], rng: &mut rng::StreamRng) -> Vec<f64> {
    let col = |j: usize| -> Vec<f64> { (0..d).map(|i| c[i * d + j]).collect() };
    let best = (0..d)
        .max_by(|&a, &b| {
            norm(&col(a))
                .partial_cmp(&norm(&col(b)))
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        })
        .unwrap_or(0);
    let mut v = col(best);
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    let noise: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
    let nn = norm(&noise);
    for (x, e) in v.iter_mut().zip(&noise) {
        *x += 1e-8 * e / nn;
    }
    orthogonalize(&mut v, found);
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn top_eigen(c: &[f64], d: usize, found: &[Vec<f64>], rng: &mut rng::StreamRng) -> (Vec<f64>, f64) {
    let mut v = start_vector(c, d, found, rng);
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut w = mat_vec(c, &v, d);
        orthogonalize(&mut w, found);
        let n = norm(&w);
        if n <= f64::EPSILON * 1e3 {
            // remaining spectrum is zero; any orthonormal completion works
            break;
        }
        w.iter_mut().for_each(|x| *x /= n);
        let delta = norm(&w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>());
        v = w;
        if delta < PCA_TOLERANCE {
            break;
        }
    }
    let cv = mat_vec(c, &v, d);
    let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
    (v, lambda.max(0.0))
}

/// Top-two principal components by power iteration with deflation.
pub fn pca_project(rows: &Tensor, labels: &[u8], seed: u64) -> Result<PcaProjection> {
    let (n, d) = (rows.rows(), rows.cols());
    if n < 3 || d < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 3 rows and 2 columns, got {n}x{d}"
        )));
    }
    if labels.len() != n {
        return Err(Error::invalid("one label per row required"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| rows.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(total > 0.0) {
        return Err(Error::invalid(
            "PCA input has zero variance (all rows equal)",
        ));
    }

    let mut rng = rng::substream(seed, &[domain::PCA]);
    let mut deflated = cov.clone();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut ratios = Vec::with_capacity(2);
    for _ in 0..2 {
        let (mut v, lambda) = top_eigen(&deflated, d, &components, &mut rng);
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for a in 0..d {
            for b in 0..d {
                deflated[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        ratios.push((lambda / total).clamp(0.0, 1.0));
        components.push(v);
    }
    let coordinates = centered
        .iter()
        .map(|r| {
            let p = |c: &Vec<f64>| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(PcaProjection {
        components,
        explained_variance_ratio: ratios,
        coordinates,
        labels: labels.to_vec(),
        mean,
    })
}

// --- false-negative analysis ----------------------------------------------

/// The seven regions of a three-set Venn diagram over false-negative ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VennRegions {
    pub a_only: Vec<String>,
    pub b_only: Vec<String>,
    pub c_only: Vec<String>,
    pub ab_not_c: Vec<String>,
    pub ac_not_b: Vec<String>,
    pub bc_not_a: Vec<String>,
    pub abc: Vec<String>,
}

impl VennRegions {
    pub fn counts(&self) -> [usize; 7] {
        [
            self.a_only.len(),
            self.b_only.len(),
            self.c_only.len(),
            self.ab_not_c.len(),
            self.ac_not_b.len(),
            self.bc_not_a.len(),
            self.abc.len(),
        ]
    }

    pub fn named_counts(&self) -> [(&'static str, usize); 7] {
        let c = self.counts();
        [
            ("a_only", c[0]),
            ("b_only", c[1]),
            ("c_only", c[2]),
            ("ab_not_c", c[3]),
            ("ac_not_b", c[4]),
            ("bc_not_a", c[5]),
            ("abc", c[6]),
        ]
    }
}

pub const OTHERS_BUCKET: &str = "Others";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnAnalysis {
    pub methods: [String; 3],
    pub fn_ids: [Vec<String>; 3],
    pub totals: [usize; 3],
    pub regions: VennRegions,
    /// FN counts per CWE tag, one column per method. Records with several
    /// tags count once under each; untagged records fall into `Others`.
    pub per_cwe: BTreeMap<String, [usize; 3]>,
}

fn fn_set(set: &PredictionSet, gold: &BTreeMap<&str, &FunctionRecord>) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for p in &set.predictions {
        let rec = gold.get(p.id.as_str()).ok_or_else(|| {
            Error::invalid(format!("prediction id {} not found in gold records", p.id))
        })?;
        if rec.label == 1 && p.predicted == 0 {
            out.insert(p.id.clone());
        }
    }
    Ok(out)
}

pub fn false_negative_analysis(
    sets: [&PredictionSet; 3],
    gold: &[FunctionRecord],
) -> Result<FnAnalysis> {
    let ids: Vec<BTreeSet<&str>> = sets
        .iter()
        .map(|s| s.predictions.iter().map(|p| p.id.as_str()).collect())
        .collect();
    for (k, s) in sets.iter().enumerate() {
        if ids[k].len() != s.predictions.len() {
            return Err(Error::invalid(format!(
                "duplicate ids in prediction set {}",
                s.method
            )));
        }
    }
    if ids[0] != ids[1] || ids[0] != ids[2] {
        return Err(Error::invalid("prediction sets cover different record ids"));
    }
    let gold_map: BTreeMap<&str, &FunctionRecord> =
        gold.iter().map(|r| (r.id.as_str(), r)).collect();
    let fns = [
        fn_set(sets[0], &gold_map)?,
        fn_set(sets[1], &gold_map)?,
        fn_set(sets[2], &gold_map)?,
    ];

    let union: BTreeSet<&String> = fns.iter().flatten().collect();
    let mut regions = VennRegions::default();
    for id in union {
        let (a, b, c) = (
            fns[0].contains(id),
            fns[1].contains(id),
            fns[2].contains(id),
        );
        let slot = match (a, b, c) {
            (true, false, false) => &mut regions.a_only,
            (false, true, false) => &mut regions.b_only,
            (false, false, true) => &mut regions.c_only,
            (true, true, false) => &mut regions.ab_not_c,
            (true, false, true) => &mut regions.ac_not_b,
            (false, true, true) => &mut regions.bc_not_a,
            (true, true, true) => &mut regions.abc,
            (false, false, false) => unreachable!("id comes from the union"),
        };
        slot.push(id.clone());
    }

    let mut per_cwe: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (k, set) in fns.iter().enumerate() {
        for id in set {
            let tags = gold_map[id.as_str()].cwe.as_deref().unwrap_or(&[]);
            if tags.is_empty() {
                per_cwe.entry(OTHERS_BUCKET.to_string()).or_default()[k] += 1;
            }
            for t in tags {
                per_cwe.entry(t.clone()).or_default()[k] += 1;
            }
        }
    }

    Ok(FnAnalysis {
        methods: [
            sets[0].method.clone(),
            sets[1].method.clone(),
            sets[2].method.clone(),
        ],
        totals: [fns[0].len(), fns[1].len(), fns[2].len()],
        fn_ids: fns.map(|s| s.into_iter().collect()),
        regions,
        per_cwe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, label: u8, predicted: u8) -> Prediction {
        Prediction {
            id: id.into(),
            probability: if predicted == 1 { 0.9 } else { 0.1 },
            predicted,
            label,
            cwe: None,
        }
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(threshold_label(0.5, 0.5), 0);
        assert_eq!(threshold_label(0.500001, 0.5), 1);
        assert!(check_threshold(0.0).is_err());
        assert!(check_threshold(1.0).is_err());
    }

    #[test]
    fn metrics_hand_computed() {
        let m = Metrics::from_counts(50, 10, 20, 20);
        assert_eq!(percent(m.precision), 83.33);
        assert_eq!(percent(m.recall), 71.43);
        assert_eq!(percent(m.f1), 76.92);
        assert_eq!(percent(m.accuracy), 70.0);
    }

    #[test]
    fn metrics_zero_denominators() {
        let m = compute_metrics(&[pred("a", 1, 0), pred("b", 0, 0)]);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 0.5);
        let all = compute_metrics(&[pred("a", 1, 1), pred("b", 0, 0)]);
        assert_eq!((all.accuracy, all.f1), (1.0, 1.0));
    }

    #[test]
    fn venn_constructed_sets() {
        let ids = ["1", "2", "3", "4"];
        let gold: Vec<FunctionRecord> = ids
            .iter()
            .map(|i| FunctionRecord::new(*i, "x", 1))
            .collect();
        let mk = |name: &str, missed: &[&str]| PredictionSet {
            method: name.into(),
            threshold: 0.5,
            predictions: ids
                .iter()
                .map(|i| pred(i, 1, u8::from(!missed.contains(i))))
                .collect(),
        };
        let a = mk("a", &["1", "2", "3"]);
        let b = mk("b", &["2", "3", "4"]);
        let c = mk("c", &["3"]);
        let fa = false_negative_analysis([&a, &b, &c], &gold).unwrap();
        assert_eq!(fa.regions.a_only, vec!["1"]);
        assert_eq!(fa.regions.b_only, vec!["4"]);
        assert_eq!(fa.regions.ab_not_c, vec!["2"]);
        assert_eq!(fa.regions.abc, vec!["3"]);
        assert!(
            fa.regions.c_only.is_empty()
                && fa.regions.ac_not_b.is_empty()
                && fa.regions.bc_not_a.is_empty()
        );
        assert_eq!(fa.totals, [3, 3, 1]);
        assert_eq!(fa.per_cwe[OTHERS_BUCKET], [3, 3, 1]);
    }

    #[test]
    fn venn_rejects_mismatched_ids() {
        let gold = vec![
            FunctionRecord::new("1", "x", 1),
            FunctionRecord::new("2", "x", 1),
        ];
        let a = PredictionSet {
            method: "a".into(),
            threshold: 0.5,
            predictions: vec![pred("1", 1, 0)],
        };
        let b = PredictionSet {
            method: "b".into(),
            threshold: 0.5,
            predictions: vec![pred("2", 1, 0)],
        };
        assert!(false_negative_analysis([&a, &a, &b], &gold).is_err());
    }

    #[test]
    fn pca_isotropic_pairs() {
        let rows = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let p = pca_project(&rows, &[0, 0, 1, 1], 1).unwrap();
        for r in &p.explained_variance_ratio {
            assert!((r - 0.5).abs() < 1e-12);
        }
        for c in &p.components {
            let axis = c.iter().filter(|v| (v.abs() - 1.0).abs() < 1e-6).count();
            assert_eq!(axis, 1, "component {c:?} is not an axis");
        }
    }

    #[test]
    fn pca_rank_one_and_degenerate() {
        let rows = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![-1.0, -2.0, -3.0],
            vec![0.5, 1.0, 1.5],
        ])
        .unwrap();
        let p = pca_project(&rows, &[0, 1, 0, 1], 3).unwrap();
        assert!(p.explained_variance_ratio[0] >= 0.9999);
        let dot: f64 = p.components[0]
            .iter()
            .zip(&p.components[1])
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-8);
        let same = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(pca_project(&same, &[0, 0, 0], 0).is_err());
        let two = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(pca_project(&two, &[0, 0], 0).is_err());
    }
}
