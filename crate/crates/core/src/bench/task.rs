use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CskvError, Result};

/// Digits per register value (values are 10000..=99999).
pub const VALUE_DIGITS: usize = 5;

/// Token layout of the synthetic line-retrieval vocabulary.
///
/// Ids below [`VocabProfile::NAME_BASE`] are template tokens; digits occupy
/// `DIGIT_BASE..DIGIT_BASE+10`; line names are drawn from the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabProfile {
    pub vocab_size: u32,
}

impl Default for VocabProfile {
    fn default() -> Self {
        Self { vocab_size: 1024 }
    }
}

impl VocabProfile {
    pub const BOS: u32 = 1;
    pub const LINE: u32 = 2;
    pub const COLON: u32 = 3;
    pub const REGISTER: u32 = 4;
    pub const IS: u32 = 5;
    pub const NEWLINE: u32 = 6;
    pub const QUERY: u32 = 7;
    pub const DIGIT_BASE: u32 = 16;
    pub const NAME_BASE: u32 = 32;
    /// Smallest vocabulary that leaves room for 16 name tokens.
    pub const MIN_VOCAB: u32 = Self::NAME_BASE + 16;

    pub fn new(vocab_size: u32) -> Result<Self> {
        if vocab_size < Self::MIN_VOCAB {
            return Err(CskvError::Input(format!(
                "retrieval vocabulary needs at least {} ids, got {vocab_size}",
                Self::MIN_VOCAB
            )));
        }
        Ok(Self { vocab_size })
    }

    pub fn n_names(&self) -> u32 {
        self.vocab_size - Self::NAME_BASE
    }

    pub fn digit(d: u32) -> u32 {
        Self::DIGIT_BASE + d
    }

    pub fn is_digit(token: u32) -> bool {
        (Self::DIGIT_BASE..Self::DIGIT_BASE + 10).contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub n_lines: usize,
    pub key_line: usize,
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
    pub seed: u64,
}

fn value_tokens(value: u32) -> Vec<u32> {
    let s = value.to_string();
    debug_assert_eq!(s.len(), VALUE_DIGITS);
    s.bytes()
        .map(|b| VocabProfile::digit((b - b'0') as u32))
        .collect()
}

/// Lines of the form `LINE a b : REGISTER IS d d d d d NEWLINE`, each with a
/// distinct two-token name and a distinct value, followed by a query
/// `QUERY a b : REGISTER IS` for one of them.
pub fn gen_lines_task(n_lines: usize, seed: u64, vocab: &VocabProfile) -> Result<RetrievalTask> {
    if n_lines == 0 {
        return Err(CskvError::Input(
            "a retrieval task needs at least one line".into(),
        ));
    }
    let names = vocab.n_names() as usize;
    if n_lines > names * names {
        return Err(CskvError::Input(format!(
            "{n_lines} lines exceed the {} distinct names of a {}-id vocabulary",
            names * names,
            vocab.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Distinct pairs by sampling distinct indices into the name grid.
    let pairs: Vec<usize> = rand::seq::index::sample(&mut rng, names * names, n_lines).into_vec();
    let mut values: Vec<u32> = Vec::with_capacity(n_lines);
    while values.len() < n_lines {
        let v = rng.random_range(10_000..100_000u32);
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let key_line = rng.random_range(0..n_lines);
    let name = |p: usize| {
        [
            VocabProfile::NAME_BASE + (p / names) as u32,
            VocabProfile::NAME_BASE + (p % names) as u32,
        ]
    };

    let mut prompt = vec![VocabProfile::BOS];
    for (p, v) in pairs.iter().zip(&values) {
        prompt.push(VocabProfile::LINE);
        prompt.extend(name(*p));
        prompt.extend([
            VocabProfile::COLON,
            VocabProfile::REGISTER,
            VocabProfile::IS,
        ]);
        prompt.extend(value_tokens(*v));
        prompt.push(VocabProfile::NEWLINE);
    }
    prompt.push(VocabProfile::QUERY);
    prompt.extend(name(pairs[key_line]));
    prompt.extend([
        VocabProfile::COLON,
        VocabProfile::REGISTER,
        VocabProfile::IS,
    ]);
    Ok(RetrievalTask {
        n_lines,
        key_line,
        prompt,
        answer: value_tokens(values[key_line]),
        seed,
    })
}

/// Prompts for calibration streams: tasks seeded away from evaluation seeds.
pub fn calibration_streams(
    count: usize,
    n_lines: usize,
    seed: u64,
    vocab: &VocabProfile,
) -> Result<Vec<Vec<u32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC411_B8A7);
    let mut seeds: Vec<u64> = (0..count as u64).map(|i| (1 << 40) + i).collect();
    seeds.shuffle(&mut rng);
    seeds
        .into_iter()
        .map(|s| gen_lines_task(n_lines, s, vocab).map(|t| t.prompt))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalScore {
    Exact,
    Partial,
    Miss,
}

pub(crate) fn count_occurrences(haystack: &[u32], needle: &[u32]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack
        .windows(needle.len())
        .filter(|w| *w == needle)
        .count()
}

/// Exact when the answer span occurs in the transcript; partial when a
/// proper prefix or suffix of at least half its length does.
pub fn score_retrieval(transcript: &[u32], task: &RetrievalTask) -> RetrievalScore {
    let answer = &task.answer;
    if count_occurrences(transcript, answer) > 0 {
        return RetrievalScore::Exact;
    }
    let min = answer.len().div_ceil(2);
    for len in (min.max(1)..answer.len()).rev() {
        if count_occurrences(transcript, &answer[..len]) > 0
            || count_occurrences(transcript, &answer[answer.len() - len..]) > 0
        {
            return RetrievalScore::Partial;
        }
    }
    RetrievalScore::Miss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_task() {
        let v = VocabProfile::default();
        assert_eq!(
            gen_lines_task(20, 3, &v).unwrap(),
            gen_lines_task(20, 3, &v).unwrap()
        );
        assert_ne!(
            gen_lines_task(20, 3, &v).unwrap(),
            gen_lines_task(20, 4, &v).unwrap()
        );
    }

    #[test]
    fn single_line_answers_its_value() {
        let t = gen_lines_task(1, 9, &VocabProfile::default()).unwrap();
        assert_eq!(t.key_line, 0);
        // BOS, LINE, a, b, :, REGISTER, IS, then the value digits.
        assert_eq!(&t.prompt[7..7 + VALUE_DIGITS], &t.answer[..]);
        assert_eq!(t.prompt.len(), 1 + 12 + 6);
    }

    #[test]
    fn answer_occurs_exactly_once() {
        let v = VocabProfile::new(64).unwrap();
        for seed in 0..50 {
            let t = gen_lines_task(40, seed, &v).unwrap();
            assert_eq!(count_occurrences(&t.prompt, &t.answer), 1, "seed {seed}");
            assert!(t.prompt.iter().all(|x| *x < 64));
            assert!(t.answer.iter().all(|x| VocabProfile::is_digit(*x)));
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(gen_lines_task(0, 0, &VocabProfile::default()).is_err());
        assert!(VocabProfile::new(40).is_err());
        let v = VocabProfile::new(VocabProfile::MIN_VOCAB).unwrap();
        assert!(gen_lines_task(257, 0, &v).is_err());
        assert!(gen_lines_task(256, 0, &v).is_ok());
    }

    #[test]
    fn scoring_cases() {
        let t = gen_lines_task(5, 1, &VocabProfile::default()).unwrap();
        let mut exact = vec![99, 98];
        exact.extend(&t.answer);
        assert_eq!(score_retrieval(&exact, &t), RetrievalScore::Exact);
        // Four of five digits, like answering 4244 to 42440.
        assert_eq!(score_retrieval(&t.answer[..4], &t), RetrievalScore::Partial);
        assert_eq!(score_retrieval(&t.answer[2..], &t), RetrievalScore::Partial);
        assert_eq!(score_retrieval(&t.answer[..2], &t), RetrievalScore::Miss);
        assert_eq!(score_retrieval(&[500, 501, 502], &t), RetrievalScore::Miss);
        assert_eq!(score_retrieval(&[], &t), RetrievalScore::Miss);
    }

    #[test]
    fn calibration_streams_avoid_small_seeds() {
        let v = VocabProfile::default();
        let s = calibration_streams(3, 4, 0, &v).unwrap();
        assert_eq!(s.len(), 3);
        for seed in 0..100 {
            let t = gen_lines_task(4, seed, &v).unwrap();
            assert!(!s.contains(&t.prompt));
        }
    }
}
