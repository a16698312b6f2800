use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EntityType;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng as StdRng};

/// Two disjoint name pools for one entity type: `pool_a` feeds training and
/// the in-domain test, `pool_b` only the out-of-domain replacement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamePools {
    pub pool_a: Vec<String>,
    pub pool_b: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLexicon {
    pub pools: BTreeMap<EntityType, NamePools>,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "gr", "kr",
    "st", "tr", "sh", "th",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "x", "nd", "rk"];

const ORG_SUFFIXES: &[&str] = &["Corp", "Group", "Holdings", "Labs", "Partners", "Systems"];
const GPE_SUFFIXES: &[&str] = &["City", "Province", "Bay"];
const TITLE_MODIFIERS: &[&str] = &["senior", "chief", "deputy", "associate"];
const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];
const DATE_QUALIFIERS: &[&str] = &["early", "mid", "late"];

fn pseudo_word(rng: &mut StdRng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("non-empty"));
        w.push_str(NUCLEI.choose(rng).expect("non-empty"));
    }
    w.push_str(CODAS.choose(rng).expect("non-empty"));
    w
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Draws a word never handed out before.
fn fresh_word(rng: &mut StdRng, used: &mut HashSet<String>, capital: bool) -> String {
    loop {
        let syl = rng.random_range(2..=3);
        let mut w = pseudo_word(rng, syl);
        if capital {
            w = capitalize(&w);
        }
        if used.insert(w.to_lowercase()) {
            return w;
        }
    }
}

fn make_name(ty: EntityType, rng: &mut StdRng, used: &mut HashSet<String>, years: &mut Vec<u32>) -> String {
    // 1 to 3 tokens; the identity-bearing word is always fresh.
    let len = match rng.random_range(0..100) {
        0..=19 => 1,
        20..=79 => 2,
        _ => 3,
    };
    let pick = |rng: &mut StdRng, xs: &[&str]| xs.choose(rng).expect("non-empty").to_string();
    let parts: Vec<String> = match ty {
        EntityType::Person => {
            let mut p: Vec<String> = (0..len).map(|_| fresh_word(rng, used, true)).collect();
            if len == 3 {
                p[1] = format!("{}.", &p[1][..1]);
            }
            p
        }
        EntityType::Org => {
            let mut p = vec![fresh_word(rng, used, true)];
            if len >= 2 {
                p.push(fresh_word(rng, used, true));
            }
            if len == 3 || (len == 2 && rng.random_bool(0.5)) {
                p.truncate(len - 1);
                p.push(pick(rng, ORG_SUFFIXES));
            }
            p
        }
        EntityType::Gpe => {
            let mut p = vec![fresh_word(rng, used, true)];
            if len >= 2 {
                p.push(pick(rng, GPE_SUFFIXES));
            }
            if len == 3 {
                p.insert(0, "New".into());
            }
            p
        }
        EntityType::Date => {
            let year = years.pop().expect("enough distinct years").to_string();
            match len {
                1 => vec![year],
                2 => vec![pick(rng, MONTHS), year],
                _ => vec![pick(rng, DATE_QUALIFIERS), pick(rng, MONTHS), year],
            }
        }
        EntityType::Title => {
            let mut p = vec![fresh_word(rng, used, false)];
            for _ in 1..len {
                p.insert(0, pick(rng, TITLE_MODIFIERS));
            }
            p.dedup();
            p
        }
    };
    parts.join(" ")
}

impl EntityLexicon {
    /// Programmatic name lists: `per_pool` names per type and pool. Pool A
    /// and pool B share no identity-bearing word; dates use disjoint years.
    pub fn generate(seed: u64, per_pool: usize) -> Result<Self> {
        if per_pool == 0 {
            return Err(Error::Config("names_per_pool must be positive".into()));
        }
        if per_pool > 400 {
            return Err(Error::Config("names_per_pool must be at most 400".into()));
        }
        let mut rng = stream(seed, "lexicon");
        let mut used = HashSet::new();
        let mut pools = BTreeMap::new();
        for ty in EntityType::ALL {
            let mut draw = |rng: &mut StdRng, years: &mut Vec<u32>| {
                let mut seen = HashSet::new();
                let mut names = Vec::with_capacity(per_pool);
                while names.len() < per_pool {
                    let n = make_name(ty, rng, &mut used, years);
                    if seen.insert(n.clone()) {
                        names.push(n);
                    }
                }
                names
            };
            // Years 1600..2399 split into two halves so the pools never meet.
            let mut years_a: Vec<u32> = (1600..2000).rev().collect();
            let mut years_b: Vec<u32> = (2000..2400).rev().collect();
            shuffle(&mut years_a, &mut rng);
            shuffle(&mut years_b, &mut rng);
            let pool_a = draw(&mut rng, &mut years_a);
            let pool_b = draw(&mut rng, &mut years_b);
            pools.insert(ty, NamePools { pool_a, pool_b });
        }
        let lex = Self { pools };
        lex.validate()?;
        Ok(lex)
    }

    pub fn pools(&self, ty: EntityType) -> Result<&NamePools> {
        self.pools
            .get(&ty)
            .ok_or_else(|| Error::Generation(format!("lexicon has no pools for type {ty}")))
    }

    pub fn validate(&self) -> Result<()> {
        for (ty, p) in &self.pools {
            if p.pool_a.iter().chain(&p.pool_b).any(|n| n.split_whitespace().next().is_none()) {
                return Err(Error::Config(format!("{ty}: empty entity name")));
            }
            let a: HashSet<&String> = p.pool_a.iter().collect();
            if let Some(dup) = p.pool_b.iter().find(|n| a.contains(n)) {
                return Err(Error::Config(format!("{ty}: '{dup}' is in both pools")));
            }
            for n in p.pool_a.iter().chain(&p.pool_b) {
                if n.split_whitespace().any(|t| t == "@" || t == "#") {
                    return Err(Error::Config(format!("{ty}: name '{n}' contains a marker token")));
                }
            }
        }
        Ok(())
    }
}

fn shuffle<T>(xs: &mut [T], rng: &mut StdRng) {
    use rand::seq::SliceRandom;
    xs.shuffle(rng);
}
