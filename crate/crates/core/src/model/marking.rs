use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, OBJ_MARKER, SUBJ_MARKER};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::vib::EntityMask;

/// An example after marker insertion and id lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkedExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// Index of the opening `@`.
    pub subj_pos: usize,
    /// Index of the opening `#`.
    pub obj_pos: usize,
    pub mask: EntityMask,
    /// Positions of all four marker tokens, ascending.
    pub markers: [usize; 4],
}

impl MarkedExample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The original token sequence with the four markers removed.
    pub fn strip_markers(&self) -> Vec<String> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.markers.contains(i))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

/// Wraps the subject in `@ … @` and the object in `# … #`.
pub fn mark_entities(ex: &Example, vocab: &Vocabulary, max_len: usize) -> Result<MarkedExample> {
    let n = ex.tokens.len();
    for (name, [s, e]) in [("subj_span", ex.subj_span), ("obj_span", ex.obj_span)] {
        if s > e || e >= n {
            return Err(Error::Data(format!("{}: {name} [{s}, {e}] invalid for {n} tokens", ex.id)));
        }
    }
    let [ss, se] = ex.subj_span;
    let [os, oe] = ex.obj_span;
    if ss <= oe && os <= se {
        return Err(Error::Data(format!("{}: subject and object spans overlap", ex.id)));
    }
    let len = n + 4;
    if len > max_len {
        return Err(Error::Truncation {
            id: ex.id.clone(),
            len,
            max: max_len,
        });
    }
    let mut tokens = Vec::with_capacity(len);
    let mut flags = Vec::with_capacity(len);
    let mut markers = Vec::with_capacity(4);
    let (mut subj_pos, mut obj_pos) = (0, 0);
    for (i, tok) in ex.tokens.iter().enumerate() {
        for (start, marker, pos) in [(ss, SUBJ_MARKER, &mut subj_pos), (os, OBJ_MARKER, &mut obj_pos)] {
            if i == start {
                *pos = tokens.len();
                markers.push(tokens.len());
                tokens.push(marker.to_string());
                flags.push(false);
            }
        }
        tokens.push(tok.clone());
        flags.push((ss..=se).contains(&i) || (os..=oe).contains(&i));
        for (end, marker) in [(se, SUBJ_MARKER), (oe, OBJ_MARKER)] {
            if i == end {
                markers.push(tokens.len());
                tokens.push(marker.to_string());
                flags.push(false);
            }
        }
    }
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(MarkedExample {
        id: ex.id.clone(),
        tokens,
        ids,
        subj_pos,
        obj_pos,
        mask: EntityMask::new(flags),
        markers: markers.try_into().expect("four markers"),
    })
}
