use std::collections::HashMap;

use super::ModelError;

/// Characters of the default vocabulary; ids start after the two special tokens.
pub const DEFAULT_ALPHABET: &str = "\n !#()*+,-./0123456789:;=?ANQS";

pub const BOS: usize = 0;
pub const EOS: usize = 1;
const SPECIALS: usize = 2;

/// Character-level tokenizer with a fixed alphabet.
///
/// One character maps to one id, so `encode(a)` is always a prefix of
/// `encode(a + b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizerSpec {
    alphabet: Vec<char>,
    to_id: HashMap<char, usize>,
    separator: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self::from_alphabet(DEFAULT_ALPHABET, '\n').expect("default alphabet")
    }
}

impl TokenizerSpec {
    pub fn from_alphabet(alphabet: &str, separator: char) -> Result<Self, ModelError> {
        let chars: Vec<char> = alphabet.chars().collect();
        let mut to_id = HashMap::with_capacity(chars.len());
        for (i, c) in chars.iter().enumerate() {
            if to_id.insert(*c, i + SPECIALS).is_some() {
                return Err(ModelError::Tokenizer(format!("duplicate symbol {c:?} in alphabet")));
            }
        }
        let separator = *to_id
            .get(&separator)
            .ok_or_else(|| ModelError::Tokenizer(format!("separator {separator:?} not in alphabet")))?;
        Ok(Self { alphabet: chars, to_id, separator })
    }

    pub fn alphabet(&self) -> String {
        self.alphabet.iter().collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + SPECIALS
    }

    pub fn bos(&self) -> usize {
        BOS
    }

    pub fn eos(&self) -> usize {
        EOS
    }

    /// Id of the step separator (newline in the default alphabet).
    pub fn separator(&self) -> usize {
        self.separator
    }

    pub fn separator_char(&self) -> char {
        self.alphabet[self.separator - SPECIALS]
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.to_id.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| ModelError::Tokenizer(format!("symbol {c:?} not in vocabulary"))))
            .collect()
    }

    /// `BOS` followed by the encoded text.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode); special tokens render as nothing.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS)
            .filter_map(|&id| self.alphabet.get(id - SPECIALS))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_vocab_is_32() {
        let t = TokenizerSpec::default();
        assert_eq!(t.vocab_size(), 32);
        assert_eq!(t.decode(&[t.separator()]), "\n");
    }

    #[test]
    fn unknown_symbol_rejected() {
        assert!(TokenizerSpec::default().encode("3+x").is_err());
    }

    fn text() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(DEFAULT_ALPHABET.chars().collect::<Vec<_>>()), 0..40)
            .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn round_trip(s in text()) {
            let t = TokenizerSpec::default();
            prop_assert_eq!(t.decode(&t.encode(&s).unwrap()), s);
        }

        #[test]
        fn prefix_stable(a in text(), b in text()) {
            let t = TokenizerSpec::default();
            let whole = t.encode(&format!("{a}{b}")).unwrap();
            let head = t.encode(&a).unwrap();
            prop_assert_eq!(&whole[..head.len()], &head[..]);
        }
    }
}
