//! Greedy longest-match tokenization of molecular strings, plus sequence
//! and batch containers.

use crate::vocab::{TokenId, Vocabulary};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("no vocabulary token starts at byte offset {0}")]
    UnknownSymbol(usize),
    #[error("empty input string")]
    EmptyInput,
    #[error("malformed sequence: {0}")]
    MalformedSequence(&'static str),
    #[error("sequence {index} has length {len}, exceeding global padded length {global_len}")]
    LengthExceeded { index: usize, len: usize, global_len: usize },
}

/// An encoded sequence: `<start>`, body tokens, `<end>`, then zero or more
/// `<pad>`. Constructors that take outside data validate the layout;
/// sampler output uses `from_raw` since an untrained model can emit any
/// grid of ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    /// Wrap ids after checking the `<start>`/`<end>`/`<pad>` layout.
    pub fn checked(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self, TokenizerError> {
        let seq = TokenSequence { ids };
        seq.validate(vocab)?;
        Ok(seq)
    }

    /// Wrap ids without validation.
    pub fn from_raw(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Length without trailing pads.
    pub fn unpadded_len(&self, vocab: &Vocabulary) -> usize {
        let pad = vocab.pad_id();
        let mut n = self.ids.len();
        while n > 0 && self.ids[n - 1] == pad {
            n -= 1;
        }
        n
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), TokenizerError> {
        if self.ids.is_empty() {
            return Err(TokenizerError::MalformedSequence("empty id list"));
        }
        if self.ids.iter().any(|&id| (id as usize) >= vocab.len()) {
            return Err(TokenizerError::MalformedSequence("id out of vocabulary range"));
        }
        if self.ids[0] != vocab.start_id() {
            return Err(TokenizerError::MalformedSequence("first id is not <start>"));
        }
        let n_end = self.ids.iter().filter(|&&id| id == vocab.end_id()).count();
        if n_end != 1 {
            return Err(TokenizerError::MalformedSequence("expected exactly one <end>"));
        }
        let end_pos = self.ids.iter().position(|&id| id == vocab.end_id()).unwrap();
        if self.ids[end_pos + 1..].iter().any(|&id| id != vocab.pad_id()) {
            return Err(TokenizerError::MalformedSequence("non-pad id after <end>"));
        }
        if self.ids[1..end_pos].iter().any(|&id| vocab.is_special(id)) {
            return Err(TokenizerError::MalformedSequence("special id inside body"));
        }
        Ok(())
    }

    /// Copy with trailing pads appended up to `len`.
    pub fn padded_to(&self, len: usize, vocab: &Vocabulary) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), vocab.pad_id());
        TokenSequence { ids }
    }
}

/// Greedy longest-match segmentation of `smiles`, wrapped in
/// `<start>`/`<end>`. Any prefix-free ambiguity is resolved toward the
/// longest token, so `detokenize(tokenize(s)) == s` whenever tokenization
/// succeeds.
pub fn tokenize(smiles: &str, vocab: &Vocabulary) -> Result<TokenSequence, TokenizerError> {
    if smiles.is_empty() {
        return Err(TokenizerError::EmptyInput);
    }
    let mut ids = Vec::with_capacity(smiles.len() + 2);
    ids.push(vocab.start_id());
    let mut pos = 0;
    while pos < smiles.len() {
        match vocab.longest_match(&smiles[pos..]) {
            Some((id, len)) => {
                ids.push(id);
                pos += len;
            }
            None => return Err(TokenizerError::UnknownSymbol(pos)),
        }
    }
    ids.push(vocab.end_id());
    Ok(TokenSequence { ids })
}

/// Concatenate body tokens; specials emit nothing. Strict mode insists on a
/// well-formed sequence, lenient mode takes whatever precedes the first
/// `<end>` (or the whole sequence if there is none) and skips specials.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary, strict: bool) -> Result<String, TokenizerError> {
    if strict {
        seq.validate(vocab)?;
    }
    let mut out = String::new();
    for &id in &seq.ids {
        if id == vocab.end_id() {
            break;
        }
        if (id as usize) >= vocab.len() {
            return Err(TokenizerError::MalformedSequence("id out of vocabulary range"));
        }
        if !vocab.is_special(id) {
            out.push_str(vocab.token(id));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingStrategy {
    /// Pad each batch to its own maximum length.
    Dynamic,
    /// Pad every batch to one fixed length.
    Global(usize),
}

#[derive(Debug, Clone)]
pub struct PaddedBatch {
    seqs: Vec<TokenSequence>,
    /// True where the underlying token is real (not `<pad>`).
    pad_mask: Vec<Vec<bool>>,
    width: usize,
    strategy: PaddingStrategy,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn strategy(&self) -> PaddingStrategy {
        self.strategy
    }

    pub fn sequences(&self) -> &[TokenSequence] {
        &self.seqs
    }

    pub fn pad_mask(&self, row: usize) -> &[bool] {
        &self.pad_mask[row]
    }
}

/// Pad a batch of sequences with `<pad>`, preserving order and emitting the
/// real-token mask.
pub fn pad_batch(
    seqs: &[TokenSequence],
    strategy: PaddingStrategy,
    vocab: &Vocabulary,
) -> Result<PaddedBatch, TokenizerError> {
    let width = match strategy {
        PaddingStrategy::Dynamic => seqs.iter().map(|s| s.len()).max().unwrap_or(0),
        PaddingStrategy::Global(global_len) => {
            for (index, s) in seqs.iter().enumerate() {
                if s.len() > global_len {
                    return Err(TokenizerError::LengthExceeded {
                        index,
                        len: s.len(),
                        global_len,
                    });
                }
            }
            global_len
        }
    };
    let mut padded = Vec::with_capacity(seqs.len());
    let mut masks = Vec::with_capacity(seqs.len());
    for s in seqs {
        let real = s.len();
        let p = s.padded_to(width, vocab);
        let mask: Vec<bool> = (0..width).map(|i| i < real).collect();
        padded.push(p);
        masks.push(mask);
    }
    Ok(PaddedBatch { seqs: padded, pad_mask: masks, width, strategy })
}
