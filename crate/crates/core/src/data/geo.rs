//! Entity anonymization for the geography question corpus: replaces entity
//! mentions with numbered placeholder tokens, aligned between the question
//! and its meaning representation so the model never has to memorize
//! specific place names.

use std::path::Path;

use super::{DataError, Example};

/// Multi-word entity surface forms, each a sequence of lowercase tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityLexicon {
    entities: Vec<Vec<String>>,
}

const DEFAULT_LEXICON: &str = include_str!("../../assets/geo_entities.txt");

impl EntityLexicon {
    fn from_lines(text: &str) -> Self {
        let mut entities: Vec<Vec<String>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect();
        // Longest first so matching can take the first hit at a position.
        entities.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        entities.dedup();
        EntityLexicon { entities }
    }

    /// The lexicon checked in with the crate.
    pub fn bundled() -> Self {
        Self::from_lines(DEFAULT_LEXICON)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            kind: e.kind(),
        })?;
        Ok(Self::from_lines(&text))
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// The longest entity starting at `pos`, if any.
    fn match_at(&self, tokens: &[String], pos: usize) -> Option<&[String]> {
        self.entities
            .iter()
            .find(|e| tokens[pos..].len() >= e.len() && tokens[pos..pos + e.len()] == e[..])
            .map(|e| e.as_slice())
    }
}

/// One anonymized example plus the entities it mentions, in placeholder
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anonymized {
    pub example: Example,
    /// Entity surface forms (joined with spaces), index N belongs to
    /// placeholder `<entN>`.
    pub entities: Vec<String>,
}

fn placeholder(index: usize) -> String {
    format!("<ent{index}>")
}

/// Replaces entity mentions in `tokens` with placeholders. `table` maps the
/// joined surface form to its placeholder index; `assign` controls whether
/// unseen entities get fresh numbers (question side) or are reported as
/// misses (meaning side).
fn substitute(
    tokens: &[String],
    lexicon: &EntityLexicon,
    table: &mut Vec<String>,
    assign: bool,
) -> Result<Vec<String>, String> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    while pos < tokens.len() {
        match lexicon.match_at(tokens, pos) {
            Some(entity) => {
                let joined = entity.join(" ");
                let index = match table.iter().position(|e| *e == joined) {
                    Some(i) => i,
                    None if assign => {
                        table.push(joined);
                        table.len() - 1
                    }
                    None => return Err(joined),
                };
                out.push(placeholder(index));
                pos += entity.len();
            }
            None => {
                out.push(tokens[pos].clone());
                pos += 1;
            }
        }
    }
    Ok(out)
}

/// Anonymizes one example. Placeholders are numbered by first occurrence in
/// the question; mentions of the same entity share a number on both sides.
/// An entity that appears only in the meaning representation has no aligned
/// question mention, so the example is kept verbatim and the entity name is
/// returned as a warning.
pub fn anonymize(
    example: &Example,
    lexicon: &EntityLexicon,
) -> (Anonymized, Option<String>) {
    let mut table = Vec::new();
    let input = substitute(&example.input, lexicon, &mut table, true)
        .expect("question side assigns fresh placeholders");
    match substitute(&example.output, lexicon, &mut table, false) {
        Ok(output) => (
            Anonymized {
                example: Example { input, output, id: example.id },
                entities: table,
            },
            None,
        ),
        Err(missing) => (
            Anonymized { example: example.clone(), entities: Vec::new() },
            Some(format!(
                "example {}: entity {missing:?} appears only in the meaning \
                 representation; kept verbatim",
                example.id
            )),
        ),
    }
}

/// Restores entity names in a decoded output sequence.
pub fn restore(tokens: &[String], entities: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for tok in tokens {
        let restored = entities.iter().enumerate().find_map(|(i, e)| {
            if *tok == placeholder(i) {
                Some(e.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            } else {
                None
            }
        });
        match restored {
            Some(words) => out.extend(words),
            None => out.push(tok.clone()),
        }
    }
    out
}
