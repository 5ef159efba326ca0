//! Token vocabulary: content tokens, the four special tokens and the
//! control-token registry mapping `(reward, bin)` to reserved ids.
//!
//! Id layout is fixed: content tokens first (in first-seen order), then
//! `pad`, `bos`, `eos`, the answer delimiter, then control tokens grouped by
//! reward in registration order with bins ascending.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rewards::RewardSpec;

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const ANSWER_DELIM: &str = "<ans>";

const FORMAT_VERSION: u32 = 1;

/// Name of the control token for `bin` of `reward`.
pub fn control_token_name(reward: &str, bin: u32) -> String {
    format!("<R={reward}:{bin}>")
}

fn is_reserved(token: &str) -> bool {
    matches!(token, PAD | BOS | EOS | ANSWER_DELIM) || token.starts_with("<R=")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub delim: TokenId,
}

/// `(reward, bin) -> token id`, bin 1 being the best bin.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ControlTokenTable {
    order: Vec<String>,
    bins: BTreeMap<String, u32>,
    entries: BTreeMap<(String, u32), TokenId>,
}

impl ControlTokenTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn reward_order(&self) -> &[String] {
        &self.order
    }

    pub fn bins(&self, reward: &str) -> Option<u32> {
        self.bins.get(reward).copied()
    }

    pub fn get(&self, reward: &str, bin: u32) -> Option<TokenId> {
        self.entries.get(&(reward.to_string(), bin)).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.values().copied()
    }
}

/// Immutable once control tokens are registered.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    n_content: usize,
    special: SpecialTokens,
    control: ControlTokenTable,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Collects content tokens from `corpus` in first-seen order and appends
    /// the special tokens.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for seq in corpus {
            for tok in seq {
                let tok = tok.as_ref();
                if is_reserved(tok) {
                    return Err(Error::Vocab(format!(
                        "reserved token {tok:?} used as content"
                    )));
                }
                if !index.contains_key(tok) {
                    index.insert(tok.to_string(), tokens.len() as TokenId);
                    tokens.push(tok.to_string());
                }
            }
        }
        if tokens.is_empty() {
            return Err(Error::Vocab("corpus has no content tokens".into()));
        }
        let n_content = tokens.len();
        let mut push = |name: &str| {
            let id = tokens.len() as TokenId;
            index.insert(name.to_string(), id);
            tokens.push(name.to_string());
            id
        };
        let special = SpecialTokens {
            pad: push(PAD),
            bos: push(BOS),
            eos: push(EOS),
            delim: push(ANSWER_DELIM),
        };
        Ok(Self {
            tokens,
            n_content,
            special,
            control: ControlTokenTable::default(),
            index,
        })
    }

    /// Reserves `K_j` fresh ids for every reward. Can only be done once.
    pub fn register_control_tokens(&mut self, rewards: &[RewardSpec]) -> Result<&ControlTokenTable> {
        let pairs: Vec<(String, u32)> = rewards.iter().map(|r| (r.name.clone(), r.bins)).collect();
        self.register_control_pairs(&pairs)?;
        Ok(&self.control)
    }

    fn register_control_pairs(&mut self, rewards: &[(String, u32)]) -> Result<()> {
        if !self.control.is_empty() {
            return Err(Error::Vocab("control tokens already registered".into()));
        }
        let mut table = ControlTokenTable::default();
        for (name, k) in rewards {
            if *k < 2 {
                return Err(Error::Vocab(format!("reward {name:?} needs at least 2 bins, got {k}")));
            }
            if table.bins.insert(name.clone(), *k).is_some() {
                return Err(Error::Vocab(format!("duplicate reward name {name:?}")));
            }
            table.order.push(name.clone());
        }
        for (name, k) in rewards {
            for bin in 1..=*k {
                let tok = control_token_name(name, bin);
                let id = self.tokens.len() as TokenId;
                self.index.insert(tok.clone(), id);
                self.tokens.push(tok);
                table.entries.insert((name.clone(), bin), id);
            }
        }
        self.control = table;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn control(&self) -> &ControlTokenTable {
        &self.control
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[..self.n_content]
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.n_content
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::InvalidId(id))
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.to_document())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: VocabDocument = io::read_json(path)?;
        Self::from_document(doc)
    }

    fn to_document(&self) -> VocabDocument {
        let mut special = BTreeMap::new();
        special.insert("pad".to_string(), PAD.to_string());
        special.insert("bos".to_string(), BOS.to_string());
        special.insert("eos".to_string(), EOS.to_string());
        special.insert("answer_delimiter".to_string(), ANSWER_DELIM.to_string());
        VocabDocument {
            version: FORMAT_VERSION,
            content: self.content_tokens().to_vec(),
            special,
            control: ControlDocument {
                rewards: self
                    .control
                    .order
                    .iter()
                    .map(|name| ControlEntry {
                        name: name.clone(),
                        bins: self.control.bins[name],
                    })
                    .collect(),
            },
        }
    }

    fn from_document(doc: VocabDocument) -> Result<Self> {
        if doc.version != FORMAT_VERSION {
            return Err(Error::Version {
                what: "vocabulary",
                found: doc.version,
                expected: FORMAT_VERSION,
            });
        }
        let expected = [
            ("answer_delimiter", ANSWER_DELIM),
            ("bos", BOS),
            ("eos", EOS),
            ("pad", PAD),
        ];
        for (key, tok) in expected {
            if doc.special.get(key).map(String::as_str) != Some(tok) {
                return Err(Error::Vocab(format!("special token {key} must be {tok:?}")));
            }
        }
        let mut vocab = Self::build(std::slice::from_ref(&doc.content))?;
        if vocab.n_content != doc.content.len() {
            return Err(Error::Vocab("duplicate content tokens".into()));
        }
        let pairs: Vec<(String, u32)> = doc
            .control
            .rewards
            .into_iter()
            .map(|e| (e.name, e.bins))
            .collect();
        if !pairs.is_empty() {
            vocab.register_control_pairs(&pairs)?;
        }
        Ok(vocab)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabDocument {
    version: u32,
    content: Vec<String>,
    special: BTreeMap<String, String>,
    control: ControlDocument,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlDocument {
    rewards: Vec<ControlEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlEntry {
    name: String,
    bins: u32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::RewardSpec;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn corpus(seqs: &[&[&str]]) -> Vec<Vec<String>> {
        seqs.iter()
            .map(|s| s.iter().map(|t| t.to_string()).collect())
            .collect()
    }

    #[test]
    fn build_counts_content_plus_specials() {
        let v = Vocabulary::build(&corpus(&[&["a", "b"], &["b", "c"]])).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.content_tokens(), &["a", "b", "c"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(&corpus(&[&[]])).is_err());
        assert!(Vocabulary::build::<String>(&[]).is_err());
    }

    #[test]
    fn reserved_tokens_rejected_as_content() {
        assert!(Vocabulary::build(&corpus(&[&["a", "<eos>"]])).is_err());
        assert!(Vocabulary::build(&corpus(&[&["<R=x:1>"]])).is_err());
    }

    #[test]
    fn fifty_sequences_over_26_symbols() {
        let letters: Vec<String> = (b'a'..=b'z').map(|c| (c as char).to_string()).collect();
        let seqs: Vec<Vec<String>> = (0..50)
            .map(|i| (0..7).map(|j| letters[(i * 7 + j * 3) % 26].clone()).collect())
            .collect();
        let distinct: HashSet<&String> = seqs.iter().flatten().collect();
        assert_eq!(distinct.len(), 26);
        assert_eq!(Vocabulary::build(&seqs).unwrap().size(), 26 + 4);
    }

    #[test]
    fn control_tokens_for_standard_rewards() {
        let mut v = Vocabulary::build(&corpus(&[&["a"]])).unwrap();
        let table = v.register_control_tokens(&RewardSpec::standard()).unwrap();
        assert_eq!(table.len(), 17);
        let ids: HashSet<TokenId> = table.ids().collect();
        assert_eq!(ids.len(), 17);
        let sp = v.special();
        for id in v.control().ids() {
            assert!(!v.is_content(id));
            assert!(![sp.pad, sp.bos, sp.eos, sp.delim].contains(&id));
        }
        let best = v.control().get("diversity", 1).unwrap();
        assert_eq!(v.token(best).unwrap(), "<R=diversity:1>");
    }

    #[test]
    fn minimal_and_duplicate_registration() {
        let mut v = Vocabulary::build(&corpus(&[&["a"]])).unwrap();
        let one = RewardSpec::diversity().with_bins(2);
        assert_eq!(v.register_control_tokens(std::slice::from_ref(&one)).unwrap().len(), 2);

        let mut v = Vocabulary::build(&corpus(&[&["a"]])).unwrap();
        let err = v.register_control_tokens(&[one.clone(), one]);
        assert!(err.is_err());

        let mut v = Vocabulary::build(&corpus(&[&["a"]])).unwrap();
        assert!(v
            .register_control_tokens(&[RewardSpec::diversity().with_bins(1)])
            .is_err());
    }

    #[test]
    fn encode_decode_and_unknowns() {
        let v = Vocabulary::build(&corpus(&[&["a", "b"]])).unwrap();
        let ids = v.encode(&["a"]).unwrap();
        assert_eq!(ids, vec![v.id("a").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), vec!["a".to_string()]);
        assert!(matches!(v.encode(&["zz"]), Err(Error::UnknownToken(_))));
        assert!(matches!(v.decode(&[99]), Err(Error::InvalidId(99))));
    }

    #[test]
    fn save_load_keeps_ids() {
        let mut v = Vocabulary::build(&corpus(&[&["x", "y", "z"]])).unwrap();
        v.register_control_tokens(&RewardSpec::standard()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back.tokens, v.tokens);
        assert_eq!(back.control, v.control);
        assert_eq!(back.special, v.special);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"version\": 1"));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(seqs in proptest::collection::vec(
            proptest::collection::vec("[a-h]{1,3}", 0..12), 1..8)) {
            prop_assume!(seqs.iter().any(|s| !s.is_empty()));
            let v = Vocabulary::build(&seqs).unwrap();
            for s in &seqs {
                let ids = v.encode(s).unwrap();
                prop_assert_eq!(&v.decode(&ids).unwrap(), s);
            }
        }
    }
}
