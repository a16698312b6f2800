use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{type_token, EntityType, Example};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SUBJ_MARKER: &str = "@";
pub const OBJ_MARKER: &str = "#";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SUBJ_MARKER_ID: usize = 2;
pub const OBJ_MARKER_ID: usize = 3;

/// Dense token ids. Reserved tokens come first in a fixed order: padding,
/// unknown, the two markers, then one generic type token per (role, type).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

pub fn reserved_tokens() -> Vec<String> {
    let mut out: Vec<String> = [PAD, UNK, SUBJ_MARKER, OBJ_MARKER].map(String::from).to_vec();
    for is_subject in [true, false] {
        for ty in EntityType::ALL {
            out.push(type_token(is_subject, ty));
        }
    }
    out
}

impl Vocabulary {
    /// Reserved tokens followed by every other corpus token in sorted order.
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let reserved = reserved_tokens();
        let mut rest = BTreeSet::new();
        for ex in examples {
            for t in &ex.tokens {
                rest.insert(t.as_str());
            }
        }
        let mut tokens = reserved.clone();
        tokens.extend(rest.into_iter().filter(|t| !reserved.iter().any(|r| r == t)).map(String::from));
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityType;

    fn ex(tokens: &str) -> Example {
        Example {
            id: "x".into(),
            tokens: tokens.split(' ').map(String::from).collect(),
            subj_span: [0, 0],
            obj_span: [2, 2],
            subj_type: EntityType::Person,
            obj_type: EntityType::Org,
            relation: "no_relation".into(),
        }
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build(&[ex("b a c"), ex("@ z #")]);
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(UNK), UNK_ID);
        assert_eq!(v.id("@"), SUBJ_MARKER_ID);
        assert_eq!(v.id("#"), OBJ_MARKER_ID);
        assert_eq!(v.id("[subj-person]"), 4);
        let n = reserved_tokens().len();
        assert_eq!(&v.tokens()[n..], ["a", "b", "c", "z"]);
        assert_eq!(v.id("never-seen"), UNK_ID);
    }

    #[test]
    fn serde_round_trip_keeps_ids() {
        let v = Vocabulary::build(&[ex("Microsoft invests in OpenAI")]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        for t in v.tokens() {
            assert_eq!(back.id(t), v.id(t));
        }
    }
}
