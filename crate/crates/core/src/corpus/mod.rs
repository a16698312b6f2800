//! Synthetic relation-extraction corpus with a controllable entity shortcut.
//!
//! Every sentence comes from a template whose wording alone determines the
//! relation. With probability `rho` an entity slot is filled by a "biased"
//! name that only ever appears with one relation, so a model can also
//! learn the relation from entity identity. The out-of-domain split swaps
//! every entity for an unseen name of the same type.

mod generate;
mod lexicon;
mod templates;
mod transforms;

pub use generate::{generate_corpus, make_ood_testset, BiasSpec, Corpus, SplitSizes};
pub use lexicon::{EntityLexicon, NamePools};
pub use templates::{default_templates, Template};
pub use transforms::{
    apply_entity_mask_baseline, apply_entity_substitution_baseline, replace_entities,
    type_token,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_RELATION: &str = "no_relation";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityType {
    #[serde(rename = "PERSON")]
    Person,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "GPE")]
    Gpe,
    #[serde(rename = "DATE")]
    Date,
    #[serde(rename = "TITLE")]
    Title,
}

impl EntityType {
    pub const ALL: [EntityType; 5] = [
        EntityType::Person,
        EntityType::Org,
        EntityType::Gpe,
        EntityType::Date,
        EntityType::Title,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Person => "PERSON",
            EntityType::Org => "ORG",
            EntityType::Gpe => "GPE",
            EntityType::Date => "DATE",
            EntityType::Title => "TITLE",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            EntityType::Person => "person",
            EntityType::Org => "org",
            EntityType::Gpe => "gpe",
            EntityType::Date => "date",
            EntityType::Title => "title",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A content relation with its argument types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationDef {
    pub name: &'static str,
    pub subj: EntityType,
    pub obj: EntityType,
}

pub const RELATIONS: [RelationDef; 8] = [
    RelationDef { name: "pers:org:employee_of", subj: EntityType::Person, obj: EntityType::Org },
    RelationDef { name: "pers:org:founder_of", subj: EntityType::Person, obj: EntityType::Org },
    RelationDef { name: "pers:title:title", subj: EntityType::Person, obj: EntityType::Title },
    RelationDef { name: "org:gpe:headquartered_in", subj: EntityType::Org, obj: EntityType::Gpe },
    RelationDef { name: "org:gpe:operations_in", subj: EntityType::Org, obj: EntityType::Gpe },
    RelationDef { name: "org:date:formed_on", subj: EntityType::Org, obj: EntityType::Date },
    RelationDef { name: "org:date:acquired_on", subj: EntityType::Org, obj: EntityType::Date },
    RelationDef { name: "org:org:subsidiary_of", subj: EntityType::Org, obj: EntityType::Org },
];

pub fn relation_def(name: &str) -> Option<&'static RelationDef> {
    RELATIONS.iter().find(|r| r.name == name)
}

/// Dense label ids; `no_relation` is always id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl Default for LabelSet {
    fn default() -> Self {
        let names = std::iter::once(NO_RELATION)
            .chain(RELATIONS.iter().map(|r| r.name))
            .map(String::from)
            .collect();
        Self { names }
    }
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Label(format!("unknown relation '{name}'")))
    }

    pub fn no_relation(&self) -> usize {
        0
    }
}

/// One relation-extraction instance. Spans are inclusive token ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub subj_span: [usize; 2],
    pub obj_span: [usize; 2],
    pub subj_type: EntityType,
    pub obj_type: EntityType,
    pub relation: String,
}

impl Example {
    pub fn subj_tokens(&self) -> &[String] {
        &self.tokens[self.subj_span[0]..=self.subj_span[1]]
    }

    pub fn obj_tokens(&self) -> &[String] {
        &self.tokens[self.obj_span[0]..=self.obj_span[1]]
    }

    pub fn subj_text(&self) -> String {
        self.subj_tokens().join(" ")
    }

    pub fn obj_text(&self) -> String {
        self.obj_tokens().join(" ")
    }

    pub fn span_len(span: [usize; 2]) -> usize {
        span[1] - span[0] + 1
    }

    /// Checks span validity and that the label belongs to `labels`.
    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        let n = self.tokens.len();
        for (name, [s, e]) in [("subj_span", self.subj_span), ("obj_span", self.obj_span)] {
            if s > e || e >= n {
                return Err(Error::Data(format!(
                    "{}: {name} [{s}, {e}] invalid for {n} tokens",
                    self.id
                )));
            }
        }
        let [ss, se] = self.subj_span;
        let [os, oe] = self.obj_span;
        if ss <= oe && os <= se {
            return Err(Error::Data(format!("{}: subject and object spans overlap", self.id)));
        }
        labels.id(&self.relation)?;
        Ok(())
    }
}
