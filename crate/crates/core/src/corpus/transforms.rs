use rand::seq::IndexedRandom;
use rand::Rng;

use super::{EntityLexicon, EntityType, Example};
use crate::error::{Error, Result};

/// Generic placeholder such as `[subj-person]` or `[obj-org]`.
pub fn type_token(is_subject: bool, ty: EntityType) -> String {
    let role = if is_subject { "subj" } else { "obj" };
    format!("[{role}-{}]", ty.slug())
}

/// Rewrites the entity surfaces, re-indexing spans; context tokens, types
/// and label are kept.
pub fn replace_entities(ex: &Example, subj: &[String], obj: &[String]) -> Example {
    let subj_first = ex.subj_span[0] < ex.obj_span[0];
    let (first, second) = if subj_first {
        ((ex.subj_span, subj), (ex.obj_span, obj))
    } else {
        ((ex.obj_span, obj), (ex.subj_span, subj))
    };
    let t = &ex.tokens;
    let mut tokens = Vec::with_capacity(t.len() + subj.len() + obj.len());
    tokens.extend_from_slice(&t[..first.0[0]]);
    let a = [tokens.len(), tokens.len() + first.1.len() - 1];
    tokens.extend_from_slice(first.1);
    tokens.extend_from_slice(&t[first.0[1] + 1..second.0[0]]);
    let b = [tokens.len(), tokens.len() + second.1.len() - 1];
    tokens.extend_from_slice(second.1);
    tokens.extend_from_slice(&t[second.0[1] + 1..]);
    let (subj_span, obj_span) = if subj_first { (a, b) } else { (b, a) };
    Example {
        tokens,
        subj_span,
        obj_span,
        ..ex.clone()
    }
}

/// Collapses each entity to a single generic type token.
pub fn apply_entity_mask_baseline(ex: &Example) -> Example {
    replace_entities(
        ex,
        &[type_token(true, ex.subj_type)],
        &[type_token(false, ex.obj_type)],
    )
}

fn split(name: &str) -> Vec<String> {
    name.split_whitespace().map(String::from).collect()
}

/// Training-time augmentation: both entities become random same-type names
/// from pool A (distinct from each other when the types coincide).
pub fn apply_entity_substitution_baseline<R: Rng + ?Sized>(
    ex: &Example,
    lexicon: &EntityLexicon,
    rng: &mut R,
) -> Result<Example> {
    let (subj, obj) = draw_pair(ex, lexicon, rng, |p| &p.pool_a)?;
    Ok(replace_entities(ex, &split(subj), &split(obj)))
}

pub(crate) fn draw_pair<'a, R, F>(
    ex: &Example,
    lexicon: &'a EntityLexicon,
    rng: &mut R,
    pool: F,
) -> Result<(&'a str, &'a str)>
where
    R: Rng + ?Sized,
    F: Fn(&'a super::NamePools) -> &'a Vec<String>,
{
    let get = |ty: EntityType| -> Result<&'a Vec<String>> {
        let names = pool(lexicon.pools(ty).map_err(|e| Error::Replacement(e.to_string()))?);
        if names.is_empty() {
            return Err(Error::Replacement(format!("empty name pool for type {ty}")));
        }
        Ok(names)
    };
    let subj_pool = get(ex.subj_type)?;
    let obj_pool = get(ex.obj_type)?;
    let subj = subj_pool.choose(rng).expect("non-empty");
    let mut obj = obj_pool.choose(rng).expect("non-empty");
    if subj == obj {
        if obj_pool.len() < 2 {
            return Err(Error::Replacement(format!(
                "pool for {} needs two names to fill both slots",
                ex.obj_type
            )));
        }
        while subj == obj {
            obj = obj_pool.choose(rng).expect("non-empty");
        }
    }
    Ok((subj, obj))
}
