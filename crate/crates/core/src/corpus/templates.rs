use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{relation_def, EntityType, LabelSet, NO_RELATION};
use crate::error::{Error, Result};

pub const SUBJ_SLOT: &str = "{subj}";
pub const OBJ_SLOT: &str = "{obj}";

/// Context wording for one relation. `text` is whitespace-tokenized and
/// holds `{subj}` and `{obj}` exactly once each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub relation: String,
    pub subj_type: EntityType,
    pub obj_type: EntityType,
    pub text: String,
}

impl Template {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }

    /// Rejects templates whose slots or argument types do not fit the
    /// relation.
    pub fn check(&self, labels: &LabelSet) -> Result<()> {
        labels
            .id(&self.relation)
            .map_err(|_| Error::Generation(format!("template for unknown relation '{}'", self.relation)))?;
        let count = |slot| self.tokens().filter(|t| *t == slot).count();
        if count(SUBJ_SLOT) != 1 || count(OBJ_SLOT) != 1 {
            return Err(Error::Generation(format!(
                "template '{}' must contain {SUBJ_SLOT} and {OBJ_SLOT} exactly once",
                self.text
            )));
        }
        if let Some(tok) = self.tokens().find(|t| *t == "@" || *t == "#") {
            return Err(Error::Generation(format!(
                "template '{}' uses reserved marker '{tok}'",
                self.text
            )));
        }
        if self.relation != NO_RELATION {
            let def = relation_def(&self.relation).expect("label set covers relation defs");
            if def.subj != self.subj_type || def.obj != self.obj_type {
                return Err(Error::Generation(format!(
                    "template '{}' has types ({}, {}) but {} takes ({}, {})",
                    self.text, self.subj_type, self.obj_type, def.name, def.subj, def.obj
                )));
            }
        }
        Ok(())
    }
}

/// Checks every template and that no context wording (with entities as
/// typed placeholders) maps to more than one relation.
pub(crate) fn check_templates(templates: &[Template], labels: &LabelSet) -> Result<()> {
    let mut by_context: BTreeMap<(EntityType, EntityType, &str), &str> = BTreeMap::new();
    for t in templates {
        t.check(labels)?;
        let key = (t.subj_type, t.obj_type, t.text.as_str());
        if let Some(prev) = by_context.insert(key, &t.relation) {
            if prev != t.relation {
                return Err(Error::Generation(format!(
                    "context '{}' maps to both {prev} and {}",
                    t.text, t.relation
                )));
            }
        }
    }
    for name in labels.names() {
        let n: BTreeSet<&str> = templates
            .iter()
            .filter(|t| &t.relation == name)
            .map(|t| t.text.as_str())
            .collect();
        if n.len() < 3 {
            return Err(Error::Generation(format!(
                "relation {name} has {} templates, need at least 3",
                n.len()
            )));
        }
    }
    Ok(())
}

struct Group {
    subj: EntityType,
    obj: EntityType,
    members: &'static [&'static str],
    /// `cue_a[i]` / `cue_b[j]`: interchangeable words for cue index i / j.
    cue_a: &'static [&'static [&'static str]],
    cue_b: &'static [&'static [&'static str]],
}

const GROUPS: &[Group] = &[
    Group {
        subj: EntityType::Person,
        obj: EntityType::Org,
        members: &["pers:org:employee_of", "pers:org:founder_of", NO_RELATION],
        cue_a: &[&["joined", "entered"], &["shaped", "steered"], &["praised", "toured"]],
        cue_b: &[&["payroll", "staff"], &["charter", "blueprint"], &["lobby", "showroom"]],
    },
    Group {
        subj: EntityType::Person,
        obj: EntityType::Title,
        members: &["pers:title:title", NO_RELATION],
        cue_a: &[&["holds", "carries"], &["mocked", "debated"]],
        cue_b: &[&["rank", "badge"], &["slogan", "rumor"]],
    },
    Group {
        subj: EntityType::Org,
        obj: EntityType::Gpe,
        members: &["org:gpe:headquartered_in", "org:gpe:operations_in", NO_RELATION],
        cue_a: &[&["anchored", "based"], &["expanded", "deployed"], &["surveyed", "mentioned"]],
        cue_b: &[&["campus", "seat"], &["plants", "outlets"], &["weather", "festival"]],
    },
    Group {
        subj: EntityType::Org,
        obj: EntityType::Date,
        members: &["org:date:formed_on", "org:date:acquired_on", NO_RELATION],
        cue_a: &[&["registered", "incorporated"], &["sold", "transferred"], &["audited", "reviewed"]],
        cue_b: &[&["founding", "inception"], &["ownership", "control"], &["ledger", "forecast"]],
    },
    Group {
        subj: EntityType::Org,
        obj: EntityType::Org,
        members: &["org:org:subsidiary_of", NO_RELATION],
        cue_a: &[&["reports", "belongs"], &["competes", "litigates"]],
        cue_b: &[&["parent", "owner"], &["rival", "neighbor"]],
    },
];

const FRAMES: &[&str] = &[
    "{subj} {a} the {b} of {obj} .",
    "records show that {subj} {a} the {b} at {obj} .",
    "{obj} said {subj} had {a} its {b} .",
    "in a statement , {subj} {a} the {b} with {obj} .",
];

/// Built-in template pools. Within each argument-type group the relation is
/// fixed by the pair of cue words `(a, b)` through `members[(i + j) mod m]`,
/// so neither cue word alone identifies it.
pub fn default_templates() -> Vec<Template> {
    let mut out = Vec::new();
    for g in GROUPS {
        let m = g.members.len();
        for (i, a_words) in g.cue_a.iter().enumerate() {
            for (j, b_words) in g.cue_b.iter().enumerate() {
                let relation = g.members[(i + j) % m];
                for a in a_words.iter() {
                    for b in b_words.iter() {
                        for frame in FRAMES {
                            out.push(Template {
                                relation: relation.to_string(),
                                subj_type: g.subj,
                                obj_type: g.obj,
                                text: frame.replace("{a}", a).replace("{b}", b),
                            });
                        }
                    }
                }
            }
        }
    }
    out
}
