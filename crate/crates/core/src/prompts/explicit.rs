//! Five-part natural-language trajectory prompt and its closed-vocabulary tokenizer.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::params::Mat;
use crate::trajectory::{movement_stats, Trajectory};

const DAYS: [&str; 7] = ["Sunday", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday"];

const ONES: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];
const TENS: [&str; 10] = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"];

/// English words for a non-negative integer, e.g. `245` -> "two hundred forty five".
pub fn number_words(n: u64) -> String {
    match n {
        0..=19 => ONES[n as usize].to_string(),
        20..=99 => {
            let (t, o) = (n / 10, n % 10);
            if o == 0 {
                TENS[t as usize].to_string()
            } else {
                format!("{} {}", TENS[t as usize], ONES[o as usize])
            }
        }
        100..=999 => join_rest(format!("{} hundred", ONES[(n / 100) as usize]), n % 100),
        1_000..=999_999 => join_rest(format!("{} thousand", number_words(n / 1000)), n % 1000),
        _ => join_rest(format!("{} million", number_words(n / 1_000_000)), n % 1_000_000),
    }
}

fn join_rest(head: String, rest: u64) -> String {
    if rest == 0 {
        head
    } else {
        format!("{head} {}", number_words(rest))
    }
}

/// "four minutes", "ninety seconds", "two minutes thirty seconds".
pub fn interval_words(seconds: i64) -> String {
    let seconds = seconds.max(0) as u64;
    let (m, s) = (seconds / 60, seconds % 60);
    let unit = |n: u64, one: &str, many: &str| format!("{} {}", number_words(n), if n == 1 { one } else { many });
    match (m, s) {
        (0, s) => unit(s, "second", "seconds"),
        (m, 0) => unit(m, "minute", "minutes"),
        (m, s) => format!("{} {}", unit(m, "minute", "minutes"), unit(s, "second", "seconds")),
    }
}

/// Wall-clock reading of an epoch timestamp, e.g. "eight o'clock", "eight oh five", "eight thirty".
pub fn clock_words(t: i64) -> String {
    let secs = t.rem_euclid(86_400);
    let (h, m) = ((secs / 3600) as u64, ((secs % 3600) / 60) as u64);
    match m {
        0 => format!("{} o'clock", number_words(h)),
        1..=9 => format!("{} oh {}", number_words(h), number_words(m)),
        _ => format!("{} {}", number_words(h), number_words(m)),
    }
}

pub fn day_of_week(t: i64) -> &'static str {
    // 1970-01-01 was a Thursday.
    DAYS[(t.div_euclid(86_400) + 4).rem_euclid(7) as usize]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplicitPrompt {
    pub task_part: String,
    pub target_part: String,
    pub content_part: String,
    pub time_part: String,
    pub movement_part: String,
}

impl ExplicitPrompt {
    pub fn parts(&self) -> [&str; 5] {
        [&self.task_part, &self.target_part, &self.content_part, &self.time_part, &self.movement_part]
    }

    pub fn text(&self) -> String {
        self.parts().join(" ")
    }
}

/// Fills the task, target, content, time and movement templates for a sparse
/// trajectory sampled every `interval` seconds and recovered every `epsilon` seconds.
pub fn build_explicit_prompt(sparse: &Trajectory, interval: i64, epsilon: i64) -> ExplicitPrompt {
    let (duration, km) = movement_stats(sparse);
    let (start, end) = (sparse.start_time(), sparse.end_time());
    ExplicitPrompt {
        task_part: "Sparse trajectory recovery.".into(),
        target_part: "Output the road segment and moving ratio for each point in the trajectory.".into(),
        content_part: format!(
            "The sparse trajectory is sampled every {} and aims to recover trajectory every {} seconds.",
            interval_words(interval),
            number_words(epsilon.max(0) as u64)
        ),
        time_part: format!(
            "The trajectory started at {} on {} and ended at {} on {}.",
            clock_words(start),
            day_of_week(start),
            clock_words(end),
            day_of_week(end)
        ),
        movement_part: format!(
            "Total time cost: {} minutes {} seconds. Total space transfer distance: {:.2} kilometers.",
            number_words((duration / 60) as u64),
            number_words((duration % 60) as u64),
            km
        ),
    }
}

pub const UNK: &str = "[unk]";

const TEMPLATE_WORDS: &str = "sparse trajectory recovery output the road segment and moving ratio for each point in \
    is sampled every aims to recover started at on ended total time cost space transfer distance kilometers \
    minute minutes second seconds o'clock oh hundred thousand million . : ,";

/// Lowercase word-level tokenizer over the closed template vocabulary.
/// Digits are single tokens; unknown words map to [`UNK`] (id 0).
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut tokens = vec![UNK.to_string()];
            let words = TEMPLATE_WORDS
                .split_whitespace()
                .map(str::to_string)
                .chain(ONES.iter().map(|s| s.to_string()))
                .chain(TENS.iter().filter(|s| !s.is_empty()).map(|s| s.to_string()))
                .chain(DAYS.iter().map(|d| d.to_lowercase()))
                .chain((0..10).map(|d| d.to_string()));
            for w in words {
                if !tokens.contains(&w) {
                    tokens.push(w);
                }
            }
            let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
            Vocab { tokens, ids }
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_alphabetic() || (ch == '\'' && !word.is_empty()) {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        Self::split(text).iter().map(|t| self.ids.get(t).copied().unwrap_or(0)).collect()
    }
}

/// Token ids of the five parts, concatenated in fixed part order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTokens {
    pub ids: Vec<usize>,
    pub part_lens: [usize; 5],
}

impl PromptTokens {
    pub fn new(prompt: &ExplicitPrompt, vocab: &Vocab) -> Self {
        let mut ids = Vec::new();
        let mut part_lens = [0; 5];
        for (k, part) in prompt.parts().iter().enumerate() {
            let toks = vocab.encode(part);
            part_lens[k] = toks.len();
            ids.extend(toks);
        }
        Self { ids, part_lens }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row range of part `k` in the concatenated embedding.
    pub fn part_range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.part_lens[..k].iter().sum();
        start..start + self.part_lens[k]
    }
}

/// Concatenated per-part token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub matrix: Mat,
    pub part_lens: [usize; 5],
}

/// Looks up each token's row of `table` (`[vocab × F]`).
pub fn embed_prompt(prompt: &ExplicitPrompt, vocab: &Vocab, table: &Mat) -> PromptEmbedding {
    let tokens = PromptTokens::new(prompt, vocab);
    let mut matrix = Mat::zeros((tokens.len(), table.ncols()));
    for (row, &id) in tokens.ids.iter().enumerate() {
        matrix.row_mut(row).assign(&table.row(id));
    }
    PromptEmbedding { matrix, part_lens: tokens.part_lens }
}
