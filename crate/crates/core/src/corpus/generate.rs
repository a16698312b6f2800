use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::templates::{check_templates, default_templates, OBJ_SLOT, SUBJ_SLOT};
use super::transforms::{draw_pair, replace_entities};
use super::{EntityLexicon, EntityType, Example, LabelSet, Template, NO_RELATION, RELATIONS};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng as StdRng};

/// Knobs of the entity shortcut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSpec {
    /// Probability that an entity slot of a relation instance is filled by
    /// a name tied to that relation.
    pub rho: f64,
    /// Share of each type's pool-A names that are tied to one relation.
    pub biased_fraction: f64,
    pub no_relation_rate: f64,
    pub seed: u64,
    pub names_per_pool: usize,
    pub templates: Vec<Template>,
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            rho: 0.9,
            biased_fraction: 0.4,
            no_relation_rate: 0.25,
            seed: 13,
            names_per_pool: 48,
            templates: default_templates(),
        }
    }
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("biased_fraction", self.biased_fraction),
            ("no_relation_rate", self.no_relation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.no_relation_rate >= 1.0 {
            return Err(Error::Config("no_relation_rate must be below 1".into()));
        }
        check_templates(&self.templates, &LabelSet::default())
    }

    pub fn lexicon(&self) -> Result<EntityLexicon> {
        EntityLexicon::generate(self.seed, self.names_per_pool)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test_id: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 8000,
            dev: 1000,
            test_id: 1000,
        }
    }
}

impl SplitSizes {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("train", self.train), ("dev", self.dev), ("test_id", self.test_id)] {
            if n == 0 {
                return Err(Error::Config(format!("split size '{name}' must be positive")));
            }
        }
        Ok(())
    }
}

/// Generated splits plus the name → (relation, is_subject) tie of every
/// biased entity.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test_id: Vec<Example>,
    pub biased: BTreeMap<String, (String, bool)>,
}

type Slot = (&'static str, bool);

struct Sampler<'a> {
    spec: &'a BiasSpec,
    by_relation: BTreeMap<&'a str, Vec<&'a Template>>,
    biased: BTreeMap<Slot, Vec<&'a str>>,
    unbiased: BTreeMap<EntityType, Vec<&'a str>>,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a BiasSpec, lexicon: &'a EntityLexicon) -> Result<Self> {
        let mut by_relation: BTreeMap<&str, Vec<&Template>> = BTreeMap::new();
        for t in &spec.templates {
            by_relation.entry(t.relation.as_str()).or_default().push(t);
        }
        let mut rng = stream(spec.seed, "bias-assignment");
        let mut biased: BTreeMap<Slot, Vec<&str>> = BTreeMap::new();
        let mut unbiased = BTreeMap::new();
        for ty in EntityType::ALL {
            let mut names: Vec<&str> = lexicon.pools(ty)?.pool_a.iter().map(String::as_str).collect();
            names.shuffle(&mut rng);
            let slots: Vec<Slot> = RELATIONS
                .iter()
                .flat_map(|r| {
                    let mut s = Vec::new();
                    if r.subj == ty {
                        s.push((r.name, true));
                    }
                    if r.obj == ty {
                        s.push((r.name, false));
                    }
                    s
                })
                .collect();
            let n_biased = (spec.biased_fraction * names.len() as f64).round() as usize;
            let rest = names.split_off(n_biased.min(names.len()));
            if !slots.is_empty() {
                for (i, name) in names.into_iter().enumerate() {
                    biased.entry(slots[i % slots.len()]).or_default().push(name);
                }
                if spec.rho > 0.0 && spec.biased_fraction > 0.0 {
                    if let Some(s) = slots.iter().find(|s| !biased.contains_key(s)) {
                        return Err(Error::Generation(format!(
                            "no biased {ty} names left for {} ({})",
                            s.0,
                            if s.1 { "subject" } else { "object" }
                        )));
                    }
                }
            }
            if rest.len() < 2 {
                return Err(Error::Generation(format!(
                    "type {ty} needs at least two unbiased pool-A names"
                )));
            }
            unbiased.insert(ty, rest);
        }
        Ok(Self {
            spec,
            by_relation,
            biased,
            unbiased,
        })
    }

    fn name(&self, relation: &str, is_subject: bool, ty: EntityType, rng: &mut StdRng) -> &'a str {
        let def = RELATIONS.iter().find(|r| r.name == relation);
        if let Some(def) = def {
            if rng.random_bool(self.spec.rho) {
                if let Some(pool) = self.biased.get(&(def.name, is_subject)) {
                    return pool.choose(rng).expect("non-empty");
                }
            }
        }
        self.unbiased[&ty].choose(rng).expect("non-empty")
    }

    fn example(&self, id: String, rng: &mut StdRng) -> Result<Example> {
        let relation = if rng.random_bool(self.spec.no_relation_rate) {
            NO_RELATION
        } else {
            RELATIONS.choose(rng).expect("non-empty").name
        };
        let template = self
            .by_relation
            .get(relation)
            .and_then(|ts| ts.choose(rng))
            .ok_or_else(|| Error::Generation(format!("no template for {relation}")))?;
        let subj = self.name(relation, true, template.subj_type, rng);
        let mut obj = self.name(relation, false, template.obj_type, rng);
        while obj == subj {
            obj = self.name(relation, false, template.obj_type, rng);
        }
        let mut tokens = Vec::new();
        let (mut subj_span, mut obj_span) = ([0, 0], [0, 0]);
        for tok in template.tokens() {
            let (span, name) = match tok {
                SUBJ_SLOT => (&mut subj_span, subj),
                OBJ_SLOT => (&mut obj_span, obj),
                _ => {
                    tokens.push(tok.to_string());
                    continue;
                }
            };
            span[0] = tokens.len();
            tokens.extend(name.split_whitespace().map(String::from));
            span[1] = tokens.len() - 1;
        }
        Ok(Example {
            id,
            tokens,
            subj_span,
            obj_span,
            subj_type: template.subj_type,
            obj_type: template.obj_type,
            relation: relation.to_string(),
        })
    }

    fn split(&self, name: &str, n: usize) -> Result<Vec<Example>> {
        let mut rng = stream(self.spec.seed, &format!("split:{name}"));
        (0..n)
            .map(|i| self.example(format!("{name}-{i:06}"), &mut rng))
            .collect()
    }
}

/// Deterministic in `(spec, lexicon, sizes)`. Each split draws from its own
/// seeded stream.
pub fn generate_corpus(spec: &BiasSpec, lexicon: &EntityLexicon, sizes: &SplitSizes) -> Result<Corpus> {
    spec.validate()?;
    sizes.validate()?;
    lexicon.validate()?;
    let sampler = Sampler::new(spec, lexicon)?;
    let corpus = Corpus {
        train: sampler.split("train", sizes.train)?,
        dev: sampler.split("dev", sizes.dev)?,
        test_id: sampler.split("test_id", sizes.test_id)?,
        biased: sampler
            .biased
            .iter()
            .flat_map(|(&(rel, subj), names)| {
                names.iter().map(move |n| (n.to_string(), (rel.to_string(), subj)))
            })
            .collect(),
    };
    let labels = LabelSet::default();
    for ex in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test_id) {
        ex.validate(&labels)?;
    }
    Ok(corpus)
}

/// Replaces both entities of every example with uniformly drawn pool-B
/// names of the same type. Context and labels are untouched.
pub fn make_ood_testset(test_id: &[Example], lexicon: &EntityLexicon, seed: u64) -> Result<Vec<Example>> {
    let mut rng = stream(seed, "ood-replacement");
    test_id
        .iter()
        .map(|ex| {
            let (s, o) = draw_pair(ex, lexicon, &mut rng, |p| &p.pool_b)?;
            let s: Vec<String> = s.split_whitespace().map(String::from).collect();
            let o: Vec<String> = o.split_whitespace().map(String::from).collect();
            Ok(replace_entities(ex, &s, &o))
        })
        .collect()
}
