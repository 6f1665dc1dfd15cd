//! Synthetic, linearly planted corpus for smoke runs and end-to-end tests.
//!
//! Label 1 iff the function contains the call pattern `gets ( buf`. Safe
//! functions may contain the look-alike `fgets ( buf`, so the decision rests
//! on a single token. A fixed fraction of each body is distractor noise.

use multivul_core::commenter::attach_comments;
use multivul_core::commenter::StubGenerator;
use multivul_core::corpus::FunctionRecord;
use multivul_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;

pub const UNSAFE_PATTERN: [&str; 3] = ["gets", "(", "buf"];
pub const DEFAULT_NOISE: f64 = 0.3;
const FIXTURE_DOMAIN: u64 = 0xF1;

const VERBS: [&str; 8] = [
    "read", "parse", "copy", "load", "scan", "fill", "take", "fetch",
];
const NOUNS: [&str; 8] = [
    "line", "name", "input", "record", "header", "field", "token", "entry",
];
const NOISE: [&str; 16] = [
    "tmp", "flag", "idx", "count", "0", "1", "16", "ptr", "len", "state", "mode", "cur", "next",
    "prev", "acc", "k",
];

const STATEMENTS: [&[&str]; 6] = [
    &["int", "n", "=", "0", ";"],
    &["n", "=", "n", "+", "1", ";"],
    &[
        "if", "(", "n", ">", "size", ")", "{", "n", "=", "size", ";", "}",
    ],
    &["buf", "[", "0", "]", "=", "0", ";"],
    &["size", "=", "size", "-", "1", ";"],
    &["puts", "(", "buf", ")", ";"],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub functions: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            functions: 400,
            noise: DEFAULT_NOISE,
            seed: 7,
        }
    }
}

/// Whether `code` contains the planted pattern as consecutive tokens.
pub fn has_unsafe_pattern(code: &str) -> bool {
    let toks = multivul_core::corpus::tokenize(code, multivul_core::corpus::Modality::Code);
    toks.windows(3)
        .any(|w| w.iter().zip(UNSAFE_PATTERN).all(|(a, b)| a == b))
}

fn function(vulnerable: bool, noise: f64, rng: &mut impl Rng) -> String {
    let name = format!(
        "{}_{}",
        VERBS.choose(rng).unwrap(),
        NOUNS.choose(rng).unwrap()
    );
    let mut body: Vec<&str> = Vec::new();
    for _ in 0..rng.gen_range(1..=2) {
        body.extend_from_slice(STATEMENTS.choose(rng).unwrap());
    }
    let call: &[&str] = if vulnerable {
        &["gets", "(", "buf", ")", ";"]
    } else if rng.gen_bool(0.5) {
        &["fgets", "(", "buf", ",", "size", ",", "stdin", ")", ";"]
    } else {
        &["memset", "(", "buf", ",", "0", ",", "size", ")", ";"]
    };
    body.extend_from_slice(call);
    body.extend_from_slice(&["return", "n", ";"]);

    // distractors make up `noise` of the final body, never split the pattern
    let extra = ((noise / (1.0 - noise)) * body.len() as f64).round() as usize;
    for _ in 0..extra {
        let at = rng.gen_range(0..=body.len());
        if !(at > 0 && matches!(body[at - 1], "gets" | "(")) {
            body.insert(at, NOISE.choose(rng).unwrap());
        }
    }
    format!(
        "int {name} ( char * buf , int size ) {{ {} }}",
        body.join(" ")
    )
}

/// Balanced records with stub comments attached.
pub fn generate(spec: &FixtureSpec) -> Vec<FunctionRecord> {
    let mut rng = rng::substream(spec.seed, &[FIXTURE_DOMAIN]);
    let records: Vec<FunctionRecord> = (0..spec.functions)
        .map(|i| {
            let vulnerable = i % 2 == 1;
            let code = function(vulnerable, spec.noise, &mut rng);
            let mut r = FunctionRecord::new(format!("syn-{i:04}"), code, u8::from(vulnerable));
            if vulnerable {
                r.cwe = Some(vec!["CWE-242".into()]);
            }
            r
        })
        .collect();
    attach_comments(&records, &StubGenerator)
        .expect("stub generation cannot fail on non-empty code")
        .records
}
