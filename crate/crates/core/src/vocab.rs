//! Tokenizer and closed vocabulary.
//!
//! The lab's language surface is exactly the template banks plus tag words,
//! so the vocabulary is enumerable at startup. Concept names are dynamic:
//! the vocabulary reserves `name_slots` ids, and encode/decode map registered
//! names to slots positionally. Any other out-of-bank word is an error — by
//! construction the generators never produce one.
//!
//! Tokenization: lowercase; alphanumeric runs are words; an apostrophe opens
//! a clitic token (`'s`, `'ve`, `'t`); `. , ? !` are single-character tokens.

use crate::error::{Error, Result};
use crate::templates;
use std::collections::HashMap;

/// Sequence terminator; also pads answer rows out to the fixed slot count.
pub const END: &str = "<end>";

/// Split bound text into tokens. Unknown characters become their own token so
/// that the id lookup fails loudly instead of silently dropping input.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        match ch {
            'a'..='z' | '0'..='9' => cur.push(ch),
            '\'' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                cur.push('\'');
            }
            '.' | ',' | '?' | '!' => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            other => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(other.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Substitute concept names for `<sks>`-style placeholders.
///
/// `names[0]` fills `<sks>` and `<sks1>`, `names[1]` fills `<sks2>`. Errors
/// when the template needs more names than given or a placeholder survives.
pub fn bind(template: &str, names: &[&str]) -> Result<String> {
    let mut s = template.to_string();
    if s.contains("<sks1>") || s.contains("<sks2>") {
        if names.len() < 2 {
            return Err(Error::Template(format!(
                "two-entity template needs two names, got {}: {template:?}",
                names.len()
            )));
        }
        s = s.replace("<sks1>", names[0]).replace("<sks2>", names[1]);
    }
    if s.contains("<sks>") {
        if names.is_empty() {
            return Err(Error::Template(format!(
                "template needs a name: {template:?}"
            )));
        }
        s = s.replace("<sks>", names[0]);
    }
    if s.contains("<sks") {
        return Err(Error::Template(format!(
            "unbound placeholder left in {s:?}"
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, usize>,
    fixed: usize,
    name_slots: usize,
}

impl Vocab {
    /// Enumerate every fixed token from the banks, tags, and answer
    /// templates, then reserve `name_slots` ids for concept names.
    pub fn build(name_slots: usize) -> Vocab {
        let mut surfaces: Vec<String> = vec![END.to_string()];
        let mut index = HashMap::new();
        index.insert(END.to_string(), 0usize);
        let add = |word: String, surfaces: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            if !index.contains_key(&word) {
                index.insert(word.clone(), surfaces.len());
                surfaces.push(word);
            }
        };

        let strip = |s: &str| {
            s.replace("<sks1>", " ")
                .replace("<sks2>", " ")
                .replace("<sks>", " ")
                .replace("<action>", " ")
                .replace("<color>", " ")
                .replace("<garment>", " ")
                .replace("<scenario>", " ")
        };
        let all_templates = templates::EXIST_Q
            .iter()
            .chain(&templates::EXIST_YES)
            .chain(&templates::EXIST_NO)
            .chain(&templates::EXIST2_Q)
            .chain(&templates::EXIST2_BOTH_YES)
            .chain(&templates::EXIST2_MIXED)
            .chain(&templates::EXIST2_BOTH_NO)
            .chain(&templates::DESC_Q)
            .chain([
                templates::ACTION_ANSWER,
                templates::APPEARANCE_ANSWER,
                templates::LOCATION_ANSWER,
            ].iter());
        for t in all_templates {
            for w in tokenize(&strip(t)) {
                add(w, &mut surfaces, &mut index);
            }
        }
        let tags = templates::SCENARIOS
            .iter()
            .chain(&templates::ACTIONS)
            .chain(&templates::COLORS)
            .chain(&templates::GARMENTS);
        for t in tags {
            add(t.to_string(), &mut surfaces, &mut index);
        }

        let fixed = surfaces.len();
        for k in 0..name_slots {
            surfaces.push(format!("<name:{k}>"));
        }
        Vocab {
            surfaces,
            index,
            fixed,
            name_slots,
        }
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn fixed_tokens(&self) -> usize {
        self.fixed
    }

    pub fn name_slots(&self) -> usize {
        self.name_slots
    }

    pub fn end_id(&self) -> usize {
        0
    }

    pub fn name_slot_id(&self, slot: usize) -> Result<usize> {
        if slot >= self.name_slots {
            return Err(Error::IndexOutOfRange {
                op: "name_slot_id",
                index: slot,
                bound: self.name_slots,
            });
        }
        Ok(self.fixed + slot)
    }

    /// Id for one token, with `names` bound to slots positionally.
    pub fn token_id(&self, word: &str, names: &[String]) -> Result<usize> {
        if let Some(slot) = names.iter().position(|n| n == word) {
            return self.name_slot_id(slot);
        }
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn encode(&self, text: &str, names: &[String]) -> Result<Vec<usize>> {
        tokenize(text)
            .iter()
            .map(|w| self.token_id(w, names))
            .collect()
    }

    /// Token surfaces for ids, stopping before the first `<end>`.
    pub fn decode_tokens(&self, ids: &[usize], names: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &id in ids {
            if id == self.end_id() {
                break;
            }
            if id >= self.surfaces.len() {
                return Err(Error::IndexOutOfRange {
                    op: "decode_tokens",
                    index: id,
                    bound: self.surfaces.len(),
                });
            }
            if id >= self.fixed {
                let slot = id - self.fixed;
                out.push(
                    names
                        .get(slot)
                        .cloned()
                        .unwrap_or_else(|| self.surfaces[id].clone()),
                );
            } else {
                out.push(self.surfaces[id].clone());
            }
        }
        Ok(out)
    }

    /// Human-readable rendering: words separated by spaces, punctuation and
    /// clitics attached to the preceding word.
    pub fn render(&self, ids: &[usize], names: &[String]) -> Result<String> {
        let toks = self.decode_tokens(ids, names)?;
        let mut s = String::new();
        for t in toks {
            let glue = t.starts_with('\'') || matches!(t.as_str(), "." | "," | "?" | "!");
            if !s.is_empty() && !glue {
                s.push(' ');
            }
            s.push_str(&t);
        }
        Ok(s)
    }

    /// Fixed question span: the longest tokenized question any bank can ask.
    /// Shorter questions are padded (and the padding masked) up to this.
    pub fn question_slots(&self) -> usize {
        let dummy_refs = ["a", "b"];
        templates::EXIST_Q
            .iter()
            .chain(&templates::EXIST2_Q)
            .chain(&templates::DESC_Q)
            .map(|t| {
                let bound = bind(t, &dummy_refs).expect("bank templates bind with two names");
                tokenize(&bound).len()
            })
            .max()
            .unwrap_or(0)
    }

    /// Fixed answer row length: the longest tokenized answer any bank or
    /// answer template can emit, plus one slot for `<end>`.
    pub fn answer_slots(&self) -> usize {
        let dummy = ["a".to_string(), "b".to_string()];
        let dummy_refs: Vec<&str> = dummy.iter().map(String::as_str).collect();
        let tag_filled = |t: &str| {
            t.replace("<action>", templates::ACTIONS[0])
                .replace("<color>", templates::COLORS[0])
                .replace("<garment>", templates::GARMENTS[0])
                .replace("<scenario>", templates::SCENARIOS[0])
        };
        let answers = templates::EXIST_YES
            .iter()
            .chain(&templates::EXIST_NO)
            .chain(&templates::EXIST2_BOTH_YES)
            .chain(&templates::EXIST2_MIXED)
            .chain(&templates::EXIST2_BOTH_NO)
            .map(|s| s.to_string())
            .chain(
                [
                    templates::ACTION_ANSWER,
                    templates::APPEARANCE_ANSWER,
                    templates::LOCATION_ANSWER,
                ]
                .iter()
                .map(|s| tag_filled(s)),
            );
        let longest = answers
            .map(|t| {
                let bound = bind(&t, &dummy_refs).expect("bank templates bind with two names");
                tokenize(&bound).len()
            })
            .max()
            .unwrap_or(0);
        longest + 1
    }
}
