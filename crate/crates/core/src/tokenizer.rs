//! Byte-level BPE tokenizer.
//!
//! Ids: `PAD = 0`, `BOS = 1`, `EOS = 2`, raw byte `b` is `3 + b`, and the
//! i-th learned merge is `259 + i`. Text is pre-split into chunks at every
//! space that follows a non-space byte (the space stays attached to the
//! following word), and merges never cross chunk boundaries.
//!
//! Vocabulary file grammar (UTF-8, one record per line, `\n` terminated):
//!
//! ```text
//! file    := "#selm-bpe v1" NL special{3} "merges " COUNT NL merge{COUNT}
//! special := "special " ID " " ESCAPED NL
//! merge   := "merge " LEFT_ID " " RIGHT_ID " " ESCAPED NL
//! ```
//!
//! `ESCAPED` writes bytes 0x21..=0x7e other than `\` literally and every other
//! byte as `\xHH` (lowercase hex). For a merge it spells the merged token's
//! bytes, which must equal the concatenation of the two parts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NUM_SPECIAL: u32 = 3;
pub const BYTE_OFFSET: u32 = NUM_SPECIAL;
pub const MIN_VOCAB: usize = 256 + NUM_SPECIAL as usize;

const HEADER: &str = "#selm-bpe v1";
const SPECIAL_NAMES: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Vocabulary {
    /// The 259-token vocabulary with no merges.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|_| Vec::new()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Vocabulary {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to
    /// the lexicographically smaller pair of byte strings) until `target_vocab`
    /// ids exist or no pair occurs at least twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Self> {
        if target_vocab < MIN_VOCAB {
            return Err(Error::Config(format!(
                "target vocabulary {target_vocab} is below the minimum {MIN_VOCAB}"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Config("empty tokenizer corpus".into()));
        }
        let mut vocab = Self::byte_level();

        let mut freq: HashMap<&[u8], usize> = HashMap::new();
        for text in corpus {
            for chunk in chunks(text.as_ref().as_bytes()) {
                *freq.entry(chunk).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = freq
            .into_iter()
            .map(|(c, n)| (c.iter().map(|&b| b as u32 + BYTE_OFFSET).collect(), n))
            .collect();
        words.sort();

        while vocab.len() < target_vocab {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (ids, n) in &words {
                for w in ids.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += n;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, n)| n >= 2)
                .max_by(|(pa, na), (pb, nb)| {
                    na.cmp(nb).then_with(|| {
                        let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                        let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                });
            let Some((pair, _)) = best else { break };
            let id = vocab.push_merge(pair);
            for (ids, _) in &mut words {
                merge_in_place(ids, pair, id);
            }
        }
        Ok(vocab)
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.tokens.push(bytes);
        self.ranks.insert(pair, id);
        self.merges.push(pair);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> TokenSequence {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in chunks(bytes) {
            let mut ids: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
            // Apply the lowest-ranked (earliest learned) merge present until none apply.
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&id| ((w[0], w[1]), id)))
                    .min_by_key(|&(_, id)| id);
                let Some((pair, id)) = best else { break };
                merge_in_place(&mut ids, pair, id);
            }
            out.extend(ids);
        }
        TokenSequence(out)
    }

    /// Concatenated bytes of every non-special token.
    pub fn decode_bytes(&self, seq: &TokenSequence) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in seq.ids() {
            let bytes = self.tokens.get(id as usize).ok_or_else(|| {
                Error::Vocabulary(format!("unknown token id {id} (vocabulary size {})", self.len()))
            })?;
            if !Self::is_special(id) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    /// Decodes to text, replacing invalid UTF-8 sequences.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(seq)?).into_owned())
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let _ = writeln!(s, "special {i} {}", escape(name.as_bytes()));
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (i, &(l, r)) in self.merges.iter().enumerate() {
            let id = MIN_VOCAB + i;
            let _ = writeln!(s, "merge {l} {r} {}", escape(&self.tokens[id]));
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n').map(|line| {
            let start = offset;
            offset += line.len();
            (start, line)
        });
        let mut next = |what: &str| -> Result<(usize, &str)> {
            let (start, line) = lines
                .next()
                .ok_or_else(|| Error::format(text.len(), format!("missing {what} record")))?;
            let body = line
                .strip_suffix('\n')
                .ok_or_else(|| Error::format(start + line.len(), "record is not newline-terminated"))?;
            Ok((start, body))
        };

        let (at, header) = next("header")?;
        if header != HEADER {
            return Err(Error::format(at, format!("expected header {HEADER:?}")));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let (at, line) = next("special")?;
            let expected = format!("special {i} {}", escape(name.as_bytes()));
            if line != expected {
                return Err(Error::format(at, format!("expected {expected:?}")));
            }
        }
        let (at, line) = next("merge count")?;
        let count: usize = line
            .strip_prefix("merges ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::format(at, "expected `merges <count>`"))?;

        let mut vocab = Self::byte_level();
        for _ in 0..count {
            let (at, line) = next("merge")?;
            let mut parts = line.splitn(4, ' ');
            let (Some("merge"), Some(l), Some(r), Some(esc)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::format(at, "expected `merge <left> <right> <bytes>`"));
            };
            let parse_id = |s: &str| -> Result<u32> {
                let id: u32 = s
                    .parse()
                    .map_err(|_| Error::format(at, format!("bad token id {s:?}")))?;
                if id < NUM_SPECIAL || id as usize >= vocab.len() {
                    return Err(Error::format(at, format!("merge refers to unavailable id {id}")));
                }
                Ok(id)
            };
            let pair = (parse_id(l)?, parse_id(r)?);
            let bytes = unescape(esc).ok_or_else(|| Error::format(at, "bad byte escape"))?;
            if vocab.ranks.contains_key(&pair) {
                return Err(Error::format(at, "duplicate merge"));
            }
            let id = vocab.push_merge(pair);
            if vocab.tokens[id as usize] != bytes {
                return Err(Error::format(at, "merged bytes do not match the pair"));
            }
        }
        if offset != text.len() {
            return Err(Error::format(offset, "trailing data after merges"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    let mut i = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        i = i.max(start + 1);
        while i < bytes.len() && !(bytes[i] == b' ' && bytes[i - 1] != b' ') {
            i += 1;
        }
        let chunk = &bytes[start..i];
        start = i;
        Some(chunk)
    })
}

fn merge_in_place(ids: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            ids[out] = id;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            s.push(b as char);
        } else {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                if bytes.get(i + 1) != Some(&b'x') {
                    return None;
                }
                let hex = s.get(i + 2..i + 4)?;
                if !hex.bytes().all(|c| c.is_ascii_digit() || (b'a'..=b'f').contains(&c)) {
                    return None;
                }
                out.push(u8::from_str_radix(hex, 16).ok()?);
                i += 4;
            }
            b @ 0x21..=0x7e => {
                out.push(b);
                i += 1;
            }
            _ => return None,
        }
    }
    Some(out)
}
