//! Paired source/target vocabularies with a shared KB-element extension.
//!
//! Base vocabularies hold ordinary words (and specials) below the cutoff
//! index; every KB element lives at or above it, at the same id in source and
//! target. Ids at or above the cutoff are masked to `<unk>` before entering
//! the encoder or decoder, so the network itself never conditions on KB
//! identity — only the copy layer can route those tokens.

use std::collections::HashMap;

use thiserror::Error;

/// The seven prefixes that mark a token as a KB element.
pub const KB_PREFIXES: [&str; 7] = ["dbo:", "dbr:", "dbp:", "dbc:", "geo:", "georss:", "dct:"];

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<unk>", "<pad>", "<bos>", "<eos>"];

pub fn is_kb_element(token: &str) -> bool {
    KB_PREFIXES.iter().any(|p| token.starts_with(p))
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum VocabError {
    #[error("`{0}` is not a KB element; only KB tokens can extend the vocabulary")]
    NotKbElement(String),
    #[error("id {id} out of range for vocabulary of size {size}")]
    OutOfRange { id: usize, size: usize },
    #[error("vocabulary file: {0}")]
    File(String),
}

pub type Result<T> = std::result::Result<T, VocabError>;

/// One side of the pair: base tokens (specials first), then the KB extension.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    base_tokens: Vec<String>,
    kb_extension: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn assemble(base_tokens: Vec<String>, kb_extension: Vec<String>) -> Self {
        let mut index = HashMap::new();
        for (i, t) in base_tokens.iter().chain(kb_extension.iter()).enumerate() {
            index.insert(t.clone(), i);
        }
        Vocabulary { base_tokens, kb_extension, index }
    }

    /// Index of the first KB token; ids at or above this are masked out of
    /// model inputs.
    pub fn cutoff(&self) -> usize {
        self.base_tokens.len()
    }

    pub fn len(&self) -> usize {
        self.base_tokens.len() + self.kb_extension.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kb_extension(&self) -> &[String] {
        &self.kb_extension
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        if id < self.base_tokens.len() {
            Ok(&self.base_tokens[id])
        } else {
            self.kb_extension
                .get(id - self.base_tokens.len())
                .map(String::as_str)
                .ok_or(VocabError::OutOfRange { id, size: self.len() })
        }
    }

    /// Unknown tokens map to `<unk>` (id 0).
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id_of(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    fn push_extension(&mut self, token: &str) {
        let id = self.len();
        self.kb_extension.push(token.to_string());
        self.index.insert(token.to_string(), id);
    }
}

/// Replaces every id at or above the cutoff with 0 (`<unk>`).
pub fn mask_above_cutoff(ids: &[usize], cutoff: usize) -> Vec<usize> {
    ids.iter().map(|&id| if id >= cutoff { UNK } else { id }).collect()
}

/// Source and target vocabularies built together so the shared KB extension
/// stays identical (same token, same id) on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabPair {
    pub source: Vocabulary,
    pub target: Vocabulary,
}

impl VocabPair {
    /// Builds the pair from (tagged question tokens, intermediary query
    /// tokens) training pairs: non-KB tokens go to the respective base in
    /// first-encounter order, KB tokens from either side go to the shared
    /// extension, and the smaller base is padded with `<fill_k>` tokens so
    /// the extension starts at the same index in both.
    pub fn build<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a [String], &'a [String])>,
    {
        let mut src_base: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut tgt_base: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut extension: Vec<String> = Vec::new();
        let mut src_seen: HashMap<String, ()> = src_base.iter().map(|t| (t.clone(), ())).collect();
        let mut tgt_seen: HashMap<String, ()> = tgt_base.iter().map(|t| (t.clone(), ())).collect();
        let mut ext_seen: HashMap<String, ()> = HashMap::new();

        for (src, tgt) in pairs {
            for tok in src {
                if is_kb_element(tok) {
                    if ext_seen.insert(tok.clone(), ()).is_none() {
                        extension.push(tok.clone());
                    }
                } else if src_seen.insert(tok.clone(), ()).is_none() {
                    src_base.push(tok.clone());
                }
            }
            for tok in tgt {
                if is_kb_element(tok) {
                    if ext_seen.insert(tok.clone(), ()).is_none() {
                        extension.push(tok.clone());
                    }
                } else if tgt_seen.insert(tok.clone(), ()).is_none() {
                    tgt_base.push(tok.clone());
                }
            }
        }

        pad_with_fillers(&mut src_base, &mut tgt_base);
        VocabPair {
            source: Vocabulary::assemble(src_base, extension.clone()),
            target: Vocabulary::assemble(tgt_base, extension),
        }
    }

    /// Tagged-baseline variant: KB tokens are ordinary base-vocabulary words.
    /// The extension is empty and the cutoff sits past every trained token,
    /// so masking never fires and the model must generate KB ids itself —
    /// which is exactly what makes it fail on unseen elements.
    pub fn build_baseline<'a, I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a [String], &'a [String])>,
    {
        let mut src_base: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut tgt_base: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut src_seen: HashMap<String, ()> = src_base.iter().map(|t| (t.clone(), ())).collect();
        let mut tgt_seen: HashMap<String, ()> = tgt_base.iter().map(|t| (t.clone(), ())).collect();

        for (src, tgt) in pairs {
            for tok in src {
                if src_seen.insert(tok.clone(), ()).is_none() {
                    src_base.push(tok.clone());
                }
            }
            for tok in tgt {
                if tgt_seen.insert(tok.clone(), ()).is_none() {
                    tgt_base.push(tok.clone());
                }
            }
        }

        pad_with_fillers(&mut src_base, &mut tgt_base);
        VocabPair {
            source: Vocabulary::assemble(src_base, Vec::new()),
            target: Vocabulary::assemble(tgt_base, Vec::new()),
        }
    }

    pub fn cutoff(&self) -> usize {
        debug_assert_eq!(self.source.cutoff(), self.target.cutoff());
        self.source.cutoff()
    }

    /// Registers an unseen KB token at the end of both vocabularies and
    /// returns its shared id; returns the existing id if already present.
    pub fn extend_dynamic(&mut self, token: &str) -> Result<usize> {
        if !is_kb_element(token) {
            return Err(VocabError::NotKbElement(token.to_string()));
        }
        if let Some(id) = self.source.id_of(token) {
            return Ok(id);
        }
        let id = self.source.len();
        self.source.push_extension(token);
        self.target.push_extension(token);
        Ok(id)
    }

    /// Serialized form: `cutoff=<n>` header, n source base tokens, n target
    /// base tokens, a `# KB` marker, then the shared extension.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("cutoff={}\n", self.cutoff()));
        for t in &self.source.base_tokens {
            out.push_str(t);
            out.push('\n');
        }
        for t in &self.target.base_tokens {
            out.push_str(t);
            out.push('\n');
        }
        out.push_str("# KB\n");
        for t in &self.source.kb_extension {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| VocabError::File("empty file".to_string()))?;
        let cutoff: usize = header
            .strip_prefix("cutoff=")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| VocabError::File(format!("bad header `{header}`")))?;
        let mut src_base = Vec::with_capacity(cutoff);
        let mut tgt_base = Vec::with_capacity(cutoff);
        for base in [&mut src_base, &mut tgt_base] {
            for _ in 0..cutoff {
                let tok = lines
                    .next()
                    .ok_or_else(|| VocabError::File("truncated base token list".to_string()))?;
                base.push(tok.to_string());
            }
        }
        match lines.next() {
            Some("# KB") => {}
            other => {
                return Err(VocabError::File(format!(
                    "expected `# KB` marker, found {other:?}"
                )))
            }
        }
        let mut extension = Vec::new();
        for tok in lines {
            if tok.is_empty() {
                continue;
            }
            if !is_kb_element(tok) {
                return Err(VocabError::File(format!(
                    "non-KB token `{tok}` in the extension section"
                )));
            }
            extension.push(tok.to_string());
        }
        Ok(VocabPair {
            source: Vocabulary::assemble(src_base, extension.clone()),
            target: Vocabulary::assemble(tgt_base, extension),
        })
    }
}

fn pad_with_fillers(a: &mut Vec<String>, b: &mut Vec<String>) {
    let target = a.len().max(b.len());
    for base in [a, b] {
        let mut k = 0;
        while base.len() < target {
            base.push(format!("<fill_{k}>"));
            k += 1;
        }
    }
}
