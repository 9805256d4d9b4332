//! Token inventories and utterances.
//!
//! The small vocabulary is frozen at 15 entries:
//!
//! | id | token       | id | token    |
//! |----|-------------|----|----------|
//! | 0  | `<pad>`     | 8  | `red`    |
//! | 1  | `<s>`       | 9  | `blue`   |
//! | 2  | `</s>`      | 10 | `green`  |
//! | 3  | `circle`    | 11 | `yellow` |
//! | 4  | `square`    | 12 | `white`  |
//! | 5  | `rectangle` | 13 | `gray`   |
//! | 6  | `ellipse`   | 14 | `shape`  |
//! | 7  | `triangle`  |    |          |
//!
//! Ids 3..=14 are the domain tokens. A large vocabulary keeps these 15 ids
//! in place and appends seeded filler words, so captions encode to the same
//! ids under either vocabulary. The three specials are never domain tokens
//! and never count towards overlap.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const SHAPES: [&str; 5] = ["circle", "square", "rectangle", "ellipse", "triangle"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "white", "gray"];
pub const GENERIC_SHAPE: &str = "shape";
pub const PAD: &str = "<pad>";
pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const SMALL_VOCAB_SIZE: usize = 15;
pub const DEFAULT_MAX_LEN: usize = 10;

const FILE_MAGIC: &str = "refgame-vocab v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Small,
    Large,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    domain: BTreeSet<usize>,
    seed: Option<u64>,
    pub pad_id: usize,
    pub start_id: usize,
    pub end_id: usize,
}

fn small_tokens() -> Vec<String> {
    [PAD, START, END]
        .into_iter()
        .chain(SHAPES)
        .chain(COLORS)
        .chain([GENERIC_SHAPE])
        .map(str::to_string)
        .collect()
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, domain: BTreeSet<usize>, seed: Option<u64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate token `{t}`")));
            }
        }
        if let Some(bad) = domain.iter().find(|&&d| d >= tokens.len()) {
            return Err(Error::Invalid(format!("domain id {bad} out of range")));
        }
        let id = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("vocab lacks special token {s}")))
        };
        Ok(Self {
            pad_id: id(PAD)?,
            start_id: id(START)?,
            end_id: id(END)?,
            tokens,
            index,
            domain,
            seed,
        })
    }

    /// The 15-token caption vocabulary.
    pub fn small() -> Self {
        let domain = (3..SMALL_VOCAB_SIZE).collect();
        Self::from_parts(small_tokens(), domain, None).expect("small vocab is well formed")
    }

    /// The small vocabulary followed by `total_size - 15` seeded filler words.
    pub fn large(total_size: usize, seed: u64) -> Result<Self> {
        if total_size <= SMALL_VOCAB_SIZE {
            return Err(Error::Invalid(format!(
                "large vocab size must exceed {SMALL_VOCAB_SIZE}, got {total_size}"
            )));
        }
        let mut tokens = small_tokens();
        let mut seen: BTreeSet<String> = tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut rng = RngStream::new(seed).derive("vocab/filler");
        while tokens.len() < total_size {
            let word = filler_word(&mut rng);
            if seen.insert(word.to_lowercase()) {
                tokens.push(word);
            }
        }
        let domain = (3..SMALL_VOCAB_SIZE).collect();
        Self::from_parts(tokens, domain, Some(seed))
    }

    pub fn build(kind: VocabKind, large_size: usize, seed: u64) -> Result<Self> {
        match kind {
            VocabKind::Small => Ok(Self::small()),
            VocabKind::Large => Self::large(large_size, seed),
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn domain_ids(&self) -> &BTreeSet<usize> {
        &self.domain
    }

    pub fn is_domain(&self, id: usize) -> bool {
        self.domain.contains(&id)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.pad_id || id == self.start_id || id == self.end_id
    }

    /// Encodes up to `max_len` tokens, appending `</s>` when it fits.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Result<Utterance> {
        if tokens.len() > max_len {
            return Err(Error::Invalid(format!(
                "utterance of {} tokens exceeds max length {max_len}",
                tokens.len()
            )));
        }
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        for t in tokens {
            let t = t.as_ref();
            ids.push(self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string()))?);
        }
        if ids.len() < max_len {
            ids.push(self.end_id);
        }
        Ok(Utterance { ids })
    }

    /// Content tokens of `utt` (everything before `</s>`, specials dropped).
    pub fn decode(&self, utt: &Utterance) -> Vec<String> {
        utt.content(self).map(|id| self.tokens[id].clone()).collect()
    }

    pub fn decode_string(&self, utt: &Utterance) -> String {
        self.decode(utt).join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{FILE_MAGIC} size={} seed={seed} pad={} start={} end={}",
            self.size(),
            self.pad_id,
            self.start_id,
            self.end_id
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("[domain]\n");
        let ids: Vec<String> = self.domain.iter().map(usize::to_string).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Invalid(format!("vocab file: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let rest = header
            .strip_prefix(FILE_MAGIC)
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        let mut size = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("size", v)) => size = v.parse::<usize>().ok(),
                Some(("seed", "none")) => {}
                Some(("seed", v)) => {
                    seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?)
                }
                _ => {}
            }
        }
        let size = size.ok_or_else(|| bad("header lacks size".into()))?;
        let mut tokens = Vec::with_capacity(size);
        let mut domain = BTreeSet::new();
        let mut in_domain = false;
        for line in lines {
            if line == "[domain]" {
                in_domain = true;
            } else if in_domain {
                for id in line.split_whitespace() {
                    domain.insert(id.parse::<usize>().map_err(|e| bad(e.to_string()))?);
                }
            } else {
                tokens.push(line.to_string());
            }
        }
        if tokens.len() != size {
            return Err(bad(format!("header says {size} tokens, found {}", tokens.len())));
        }
        Self::from_parts(tokens, domain, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn filler_word(rng: &mut RngStream) -> String {
    const ONSETS: [&str; 24] = [
        "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
        "br", "ch", "sh", "st", "pr", "tr",
    ];
    const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ea", "io"];
    const CODAS: [&str; 8] = ["", "", "", "n", "s", "x", "rd", "ck"];
    let syllables = 1 + rng.below(3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.below(ONSETS.len())]);
        w.push_str(VOWELS[rng.below(VOWELS.len())]);
    }
    w.push_str(CODAS[rng.below(CODAS.len())]);
    if rng.bernoulli(0.3) {
        let mut c = w.chars();
        let first = c.next().expect("non-empty word").to_ascii_uppercase();
        w = std::iter::once(first).chain(c).collect();
    }
    w
}

/// A hard utterance: token ids truncated at (and including) the first `</s>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    ids: Vec<usize>,
}

impl Utterance {
    /// Builds from raw ids, dropping everything after the first `end_id`.
    pub fn from_ids(ids: &[usize], end_id: usize) -> Self {
        let cut = ids.iter().position(|&i| i == end_id).map_or(ids.len(), |p| p + 1);
        Self {
            ids: ids[..cut].to_vec(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Ids before `</s>` excluding specials.
    pub fn content<'a>(&'a self, vocab: &'a Vocab) -> impl Iterator<Item = usize> + 'a {
        self.ids
            .iter()
            .copied()
            .take_while(move |&i| i != vocab.end_id)
            .filter(move |&i| !vocab.is_special(i))
    }

    /// Fixed-length id sequence padded with `<pad>`.
    pub fn padded(&self, len: usize, pad_id: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.ids.iter().copied().take(len).collect();
        out.resize(len, pad_id);
        out
    }
}

/// Percentage of non-special tokens that are domain tokens; 0 when empty.
///
/// Counts token occurrences, so repeats weigh in.
pub fn token_overlap(utt: &Utterance, vocab: &Vocab) -> f64 {
    let (mut domain, mut total) = (0usize, 0usize);
    for id in utt.content(vocab) {
        total += 1;
        if vocab.is_domain(id) {
            domain += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * domain as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_vocab_layout() {
        let v = Vocab::small();
        assert_eq!(v.size(), 15);
        assert_eq!((v.pad_id, v.start_id, v.end_id), (0, 1, 2));
        assert_eq!(v.domain_ids().len(), 12);
        for id in 0..15 {
            assert_eq!(v.is_domain(id), !v.is_special(id));
        }
    }

    #[test]
    fn large_vocab_extends_small_in_place() {
        let s = Vocab::small();
        let l = Vocab::large(2000, 7).unwrap();
        assert_eq!(l.size(), 2000);
        assert_eq!(l.domain_ids(), s.domain_ids());
        assert_eq!(&l.tokens()[..15], s.tokens());
        let caption = ["red", "circle"];
        assert_eq!(
            s.encode(&caption, 10).unwrap(),
            l.encode(&caption, 10).unwrap()
        );
        assert_eq!(Vocab::large(2000, 7).unwrap(), l);
        assert_ne!(Vocab::large(2000, 8).unwrap().tokens(), l.tokens());
    }

    #[test]
    fn large_vocab_rejects_small_sizes() {
        assert!(Vocab::large(15, 1).is_err());
        assert!(Vocab::large(3, 1).is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocab::small();
        let u = v.encode(&["red", "circle"], 10).unwrap();
        assert_eq!(u.padded(10, v.pad_id), vec![8, 3, 2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(v.decode(&u), vec!["red", "circle"]);
        let empty: [&str; 0] = [];
        let e = v.encode(&empty, 10).unwrap();
        assert_eq!(e.padded(10, v.pad_id), vec![2, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let long = ["red"; 11];
        assert!(v.encode(&long, 10).is_err());
        assert!(matches!(
            v.encode(&["purple"], 10),
            Err(Error::UnknownToken(t)) if t == "purple"
        ));
    }

    #[test]
    fn from_ids_truncates_after_end() {
        let u = Utterance::from_ids(&[8, 3, 2, 9, 4], 2);
        assert_eq!(u.ids(), &[8, 3, 2]);
    }

    #[test]
    fn overlap_examples() {
        let l = Vocab::large(200, 3).unwrap();
        let red_circle = l.encode(&["red", "circle"], 10).unwrap();
        assert_eq!(token_overlap(&red_circle, &l), 100.0);
        let fillers: Vec<&str> = l.tokens()[15..18].iter().map(String::as_str).collect();
        assert_eq!(token_overlap(&l.encode(&fillers, 10).unwrap(), &l), 0.0);
        let gray = l.encode(&["gray", "gray", "gray"], 10).unwrap();
        assert_eq!(token_overlap(&gray, &l), 100.0);
        let mixed = l.encode(&["gray", fillers[0]], 10).unwrap();
        assert_eq!(token_overlap(&mixed, &l), 50.0);
        let empty: [&str; 0] = [];
        assert_eq!(token_overlap(&l.encode(&empty, 10).unwrap(), &l), 0.0);
    }

    #[test]
    fn vocab_file_round_trip() {
        let l = Vocab::large(64, 11).unwrap();
        let back = Vocab::from_text(&l.to_text()).unwrap();
        assert_eq!(back, l);
        assert_eq!(Vocab::from_text(&Vocab::small().to_text()).unwrap(), Vocab::small());
        assert!(Vocab::from_text("nonsense\n").is_err());
    }
}
