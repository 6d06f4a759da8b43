//! The fixed 246-token vocabulary for molecular strings.
//!
//! The vocabulary is the same for any molecule collection, so the category
//! count K = 246 never depends on the dataset. Composition:
//!
//! * 3 special tokens: `<pad>`, `<start>`, `<end>` (ids 0, 1, 2);
//! * the 94 printable ASCII characters `!`..`~` as single-character tokens,
//!   covering digits, ring-bond `%`, every bond/branch/stereo/charge symbol,
//!   all one-letter element symbols, and every character that can appear
//!   inside a bracket atom;
//! * the 104 two-letter element symbols in atomic-number order;
//! * the bracket aromatics `as`, `se`, `te`;
//! * the reaction arrow `>>`;
//! * 41 reserved slots `<unused0>`..`<unused40>` kept so K stays 246 when
//!   alternative string representations with their own multi-character
//!   tokens are added later.
//!
//! Segmentation is greedy longest-match, so two-letter element symbols win
//! over their single-letter prefixes ("Cl" is one token) while bracket-atom
//! interiors fall back to single characters ("[C@@H]" splits into six
//! tokens). Two-digit ring bonds stay `%` + digit + digit.
//!
//! The ordered token list is pinned by a SHA-256 hash; any change to the
//! list is a format break and must be treated as a new vocabulary.

use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Number of tokens in the fixed vocabulary.
pub const VOCAB_SIZE: usize = 246;

/// SHA-256 of the newline-joined ordered token list, hex-encoded.
pub const VOCAB_SHA256: &str = "5ad21cefb8eb060c22d13efc9c1e9b18ee29550d3b6df77a97dcf4d16a331216";

/// Two-letter element symbols, atomic-number order, one-letter symbols
/// (H, B, C, N, O, F, P, S, K, V, Y, I, W, U) excluded since single ASCII
/// letters are already tokens.
const TWO_LETTER_ELEMENTS: [&str; 104] = [
    "He", "Li", "Be", "Ne", "Na", "Mg", "Al", "Si", "Cl", "Ar", "Ca", "Sc", "Ti", "Cr", "Mn",
    "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Zr", "Nb",
    "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "Xe", "Cs", "Ba", "La",
    "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf",
    "Ta", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra",
    "Ac", "Th", "Pa", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf",
    "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

const BRACKET_AROMATICS: [&str; 3] = ["as", "se", "te"];
const RESERVED_SLOTS: usize = 41;

pub const PAD_TOKEN: &str = "<pad>";
pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";

/// Token id; the vocabulary is small enough that u16 is never tight.
pub type TokenId = u16;

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
    /// Candidate token ids per leading byte, longest surface first.
    by_first_byte: Vec<Vec<TokenId>>,
    pad_id: TokenId,
    start_id: TokenId,
    end_id: TokenId,
}

/// Build the fixed vocabulary. Deterministic across runs and platforms.
pub fn build_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = Vec::with_capacity(VOCAB_SIZE);
    tokens.push(PAD_TOKEN.to_string());
    tokens.push(START_TOKEN.to_string());
    tokens.push(END_TOKEN.to_string());
    for b in 0x21u8..=0x7e {
        tokens.push((b as char).to_string());
    }
    for sym in TWO_LETTER_ELEMENTS {
        tokens.push(sym.to_string());
    }
    for sym in BRACKET_AROMATICS {
        tokens.push(sym.to_string());
    }
    tokens.push(">>".to_string());
    for i in 0..RESERVED_SLOTS {
        tokens.push(format!("<unused{i}>"));
    }
    debug_assert_eq!(tokens.len(), VOCAB_SIZE);

    let mut id_of = HashMap::with_capacity(VOCAB_SIZE);
    for (i, tok) in tokens.iter().enumerate() {
        let prev = id_of.insert(tok.clone(), i as TokenId);
        debug_assert!(prev.is_none(), "duplicate token {tok}");
    }

    let mut by_first_byte: Vec<Vec<TokenId>> = vec![Vec::new(); 256];
    for (i, tok) in tokens.iter().enumerate() {
        by_first_byte[tok.as_bytes()[0] as usize].push(i as TokenId);
    }
    for bucket in by_first_byte.iter_mut() {
        // Longest first so a linear scan implements longest-match; ties are
        // impossible (tokens are distinct, equal-length strings sharing a
        // first byte still differ and only one can match a given slice).
        bucket.sort_by(|a, b| {
            let (sa, sb) = (&tokens[*a as usize], &tokens[*b as usize]);
            sb.len().cmp(&sa.len()).then_with(|| sa.cmp(sb))
        });
    }

    Vocabulary {
        pad_id: id_of[PAD_TOKEN],
        start_id: id_of[START_TOKEN],
        end_id: id_of[END_TOKEN],
        tokens,
        id_of,
        by_first_byte,
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn start_id(&self) -> TokenId {
        self.start_id
    }

    pub fn end_id(&self) -> TokenId {
        self.end_id
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.pad_id || id == self.start_id || id == self.end_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Longest vocabulary token matching a prefix of `s`, if any.
    pub(crate) fn longest_match(&self, s: &str) -> Option<(TokenId, usize)> {
        let first = *s.as_bytes().first()?;
        for &id in &self.by_first_byte[first as usize] {
            let tok = &self.tokens[id as usize];
            if s.len() >= tok.len() && s.as_bytes()[..tok.len()] == *tok.as_bytes() {
                return Some((id, tok.len()));
            }
        }
        None
    }

    /// SHA-256 over the newline-joined ordered token list, hex-encoded.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                hasher.update(b"\n");
            }
            hasher.update(tok.as_bytes());
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
