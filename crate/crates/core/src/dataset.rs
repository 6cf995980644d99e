// SPDX-License-Identifier: MIT OR Apache-2.0

//! Factual tuples `(s, r, a)` with token-group spans and counterfactual
//! attribute sets.
//!
//! On disk a dataset is JSON Lines, one [`FactEntry`] per line:
//!
//! | field            | type               | meaning                                   |
//! |------------------|--------------------|-------------------------------------------|
//! | `subject`        | string             | subject text, e.g. `"Sydney Opera House"` |
//! | `relation_id`    | string             | e.g. `"IN_COUNTRY"`                       |
//! | `relation_text`  | string             | e.g. `" is in the country of"`            |
//! | `attribute`      | string             | correct attribute `a`                     |
//! | `prompt`         | string             | full prompt text                          |
//! | `prompt_tokens`  | int list           | authoritative token ids                   |
//! | `spans`          | object             | `prefix`/`subject`/`relation` as `[start, end)`, `end` as a position |
//! | `S_minus_a`      | string list        | subject attributes other than `a`         |
//! | `R_minus_a`      | string list        | relation attributes other than `a`        |
//! | `a_first_token`  | int                | first token of `a` (leading-space form)   |
//!
//! Attributes are matched by their first token with a leading space, so
//! `"Australia"` is looked up as `" Australia"`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{forward, ModelBundle, TokenId, Vocab};
use crate::numerics::rank_of;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenGroup {
    Prefix,
    Subject,
    Relation,
    End,
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 4] = [
        TokenGroup::Prefix,
        TokenGroup::Subject,
        TokenGroup::Relation,
        TokenGroup::End,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenGroup::Prefix => "PREFIX",
            TokenGroup::Subject => "SUBJECT",
            TokenGroup::Relation => "RELATION",
            TokenGroup::End => "END",
        }
    }
}

impl fmt::Display for TokenGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TokenGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenGroup::ALL
            .into_iter()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Spans(format!("unknown token group `{s}`")))
    }
}

/// Partition of `0..T` into PREFIX, SUBJECT, RELATION and END, in that
/// order. Ranges may be empty; END is always the single last position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGroupSpans {
    pub prefix: Range<usize>,
    pub subject: Range<usize>,
    pub relation: Range<usize>,
    pub end: usize,
}

impl TokenGroupSpans {
    /// Spans from the three part lengths; END is the position after them.
    pub fn from_lengths(prefix: usize, subject: usize, relation: usize) -> Self {
        let s = prefix;
        let r = s + subject;
        let e = r + relation;
        TokenGroupSpans {
            prefix: 0..s,
            subject: s..r,
            relation: r..e,
            end: e,
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        let parts = [
            ("prefix", &self.prefix),
            ("subject", &self.subject),
            ("relation", &self.relation),
        ];
        for (name, r) in parts {
            if r.start > r.end {
                return Err(Error::Spans(format!("{name} range {r:?} is reversed")));
            }
        }
        if self.prefix.start != 0 {
            return Err(Error::Spans(format!("prefix must start at 0, got {:?}", self.prefix)));
        }
        if self.subject.start < self.prefix.end
            || self.relation.start < self.subject.end
            || self.end < self.relation.end
        {
            return Err(Error::Spans(format!(
                "overlapping groups: prefix {:?}, subject {:?}, relation {:?}, end {}",
                self.prefix, self.subject, self.relation, self.end
            )));
        }
        if self.subject.start != self.prefix.end
            || self.relation.start != self.subject.end
            || self.end != self.relation.end
        {
            return Err(Error::Spans(format!(
                "groups leave a gap: prefix {:?}, subject {:?}, relation {:?}, end {}",
                self.prefix, self.subject, self.relation, self.end
            )));
        }
        if self.end + 1 != t {
            return Err(Error::Spans(format!(
                "end position {} is not the last of {t} tokens",
                self.end
            )));
        }
        Ok(())
    }

    pub fn positions(&self, group: TokenGroup) -> Range<usize> {
        match group {
            TokenGroup::Prefix => self.prefix.clone(),
            TokenGroup::Subject => self.subject.clone(),
            TokenGroup::Relation => self.relation.clone(),
            TokenGroup::End => self.end..self.end + 1,
        }
    }

    pub fn group_of(&self, pos: usize) -> Option<TokenGroup> {
        TokenGroup::ALL.into_iter().find(|&g| self.positions(g).contains(&pos))
    }
}

#[derive(Serialize, Deserialize)]
struct SpansRepr {
    prefix: [usize; 2],
    subject: [usize; 2],
    relation: [usize; 2],
    end: usize,
}

impl Serialize for TokenGroupSpans {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SpansRepr {
            prefix: [self.prefix.start, self.prefix.end],
            subject: [self.subject.start, self.subject.end],
            relation: [self.relation.start, self.relation.end],
            end: self.end,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenGroupSpans {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SpansRepr::deserialize(d)?;
        Ok(TokenGroupSpans {
            prefix: r.prefix[0]..r.prefix[1],
            subject: r.subject[0]..r.subject[1],
            relation: r.relation[0]..r.relation[1],
            end: r.end,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEntry {
    pub subject: String,
    pub relation_id: String,
    pub relation_text: String,
    pub attribute: String,
    pub prompt: String,
    pub prompt_tokens: Vec<TokenId>,
    pub spans: TokenGroupSpans,
    #[serde(rename = "S_minus_a")]
    pub s_minus_a: Vec<String>,
    #[serde(rename = "R_minus_a")]
    pub r_minus_a: Vec<String>,
    pub a_first_token: TokenId,
}

/// First token of an attribute in its leading-space form.
pub fn attribute_first_token(attribute: &str, vocab: &Vocab) -> Result<TokenId> {
    let text = if attribute.starts_with(' ') {
        attribute.to_string()
    } else {
        format!(" {attribute}")
    };
    // Greedy longest match: the first token is the longest vocab prefix.
    let mut best = None;
    for (end, _) in text.char_indices().skip(1).chain([(text.len(), ' ')]) {
        if let Some(id) = vocab.id(&text[..end]) {
            best = Some(id);
        }
    }
    best.ok_or_else(|| Error::Vocab(format!("attribute `{attribute}` has no first token in the vocab")))
}

impl FactEntry {
    /// Builds an entry by tokenizing `prefix`, `subject` and `relation_text`
    /// separately. The last relation token becomes END.
    #[allow(clippy::too_many_arguments)]
    pub fn from_text(
        vocab: &Vocab,
        prefix: &str,
        subject: &str,
        relation_id: &str,
        relation_text: &str,
        attribute: &str,
        s_minus_a: Vec<String>,
        r_minus_a: Vec<String>,
    ) -> Result<Self> {
        let p = vocab.tokenize(prefix)?;
        let s = vocab.tokenize(subject)?;
        let r = vocab.tokenize(relation_text)?;
        if r.is_empty() {
            return Err(Error::Spans("relation text tokenizes to nothing".into()));
        }
        let spans = TokenGroupSpans::from_lengths(p.len(), s.len(), r.len() - 1);
        let mut prompt_tokens = p;
        prompt_tokens.extend(s);
        prompt_tokens.extend(r);
        let entry = FactEntry {
            subject: subject.to_string(),
            relation_id: relation_id.to_string(),
            relation_text: relation_text.to_string(),
            attribute: attribute.to_string(),
            prompt: format!("{prefix}{subject}{relation_text}"),
            prompt_tokens,
            spans,
            s_minus_a,
            r_minus_a,
            a_first_token: attribute_first_token(attribute, vocab)?,
        };
        entry.validate(vocab)?;
        Ok(entry)
    }

    pub fn end_pos(&self) -> usize {
        self.spans.end
    }

    /// Checks spans, set exclusivity and attribute tokens; returns every
    /// problem found.
    pub fn problems(&self, vocab: &Vocab) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.spans.validate(self.prompt_tokens.len()) {
            out.push(e.to_string());
        }
        if let Some(&bad) = self.prompt_tokens.iter().find(|&&t| t >= vocab.len()) {
            out.push(format!("prompt token {bad} outside vocab of size {}", vocab.len()));
        }
        if self.s_minus_a.contains(&self.attribute) {
            out.push(format!("S_minus_a contains the attribute `{}`", self.attribute));
        }
        if self.r_minus_a.contains(&self.attribute) {
            out.push(format!("R_minus_a contains the attribute `{}`", self.attribute));
        }
        match attribute_first_token(&self.attribute, vocab) {
            Ok(id) if id != self.a_first_token => out.push(format!(
                "a_first_token {} does not match `{}` (expected {id})",
                self.a_first_token, self.attribute
            )),
            Ok(_) => {}
            Err(e) => out.push(e.to_string()),
        }
        for attr in self.s_minus_a.iter().chain(&self.r_minus_a) {
            if let Err(e) = attribute_first_token(attr, vocab) {
                out.push(e.to_string());
            }
        }
        out
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let problems = self.problems(vocab);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Dataset(problems))
        }
    }

    /// First tokens of `R ∖ {a}`, de-duplicated, in list order.
    pub fn r_first_tokens(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        first_tokens(&self.r_minus_a, self.a_first_token, vocab)
    }

    /// First tokens of `S ∖ {a}`, de-duplicated, in list order.
    pub fn s_first_tokens(&self, vocab: &Vocab) -> Result<Vec<TokenId>> {
        first_tokens(&self.s_minus_a, self.a_first_token, vocab)
    }
}

fn first_tokens(attrs: &[String], a: TokenId, vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for attr in attrs {
        let id = attribute_first_token(attr, vocab)?;
        if id != a && !out.contains(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

pub fn parse_dataset(text: &str, vocab: &Vocab) -> Result<Vec<FactEntry>> {
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<FactEntry>(line) {
            Ok(entry) => {
                for p in entry.problems(vocab) {
                    problems.push(format!("line {}: {p}", i + 1));
                }
                entries.push(entry);
            }
            Err(e) => problems.push(format!("line {}: malformed entry: {e}", i + 1)),
        }
    }
    if problems.is_empty() {
        Ok(entries)
    } else {
        Err(Error::Dataset(problems))
    }
}

pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<FactEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, vocab)
}

pub fn to_jsonl(entries: &[FactEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, entries: &[FactEntry]) -> Result<()> {
    fs::write(path, to_jsonl(entries)?).map_err(|e| Error::io(path, e))
}

/// Outcome of [`filter_by_rank`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankFilter {
    pub kept: Vec<FactEntry>,
    pub dropped: Vec<(FactEntry, usize)>,
    /// Rank of `a` for every input entry, in input order.
    pub ranks: Vec<usize>,
}

impl RankFilter {
    /// `(rank, count)` pairs for every rank that occurs, ascending.
    pub fn histogram(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for &r in &self.ranks {
            *counts.entry(r).or_insert(0) += 1;
        }
        counts.into_iter().collect()
    }

    pub fn write_histogram_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "count"]).map_err(crate::trace::csv_err)?;
        for (rank, count) in self.histogram() {
            w.write_record([rank.to_string(), count.to_string()])
                .map_err(crate::trace::csv_err)?;
        }
        w.flush().map_err(|e| Error::io("rank histogram", e))
    }
}

/// Keeps entries whose attribute ranks strictly below `max_rank` at END.
/// `max_rank = 0` therefore keeps nothing.
pub fn filter_by_rank(model: &ModelBundle, entries: &[FactEntry], max_rank: usize) -> Result<RankFilter> {
    let ranks = entries
        .par_iter()
        .map(|e| {
            let logits = forward(model, &e.prompt_tokens)?;
            rank_of(logits.row(e.end_pos()), e.a_first_token)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (e, &r) in entries.iter().zip(&ranks) {
        if r < max_rank {
            kept.push(e.clone());
        } else {
            dropped.push((e.clone(), r));
        }
    }
    Ok(RankFilter { kept, dropped, ranks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        let toks = [
            "Fact: ",
            "Sydney",
            " Opera",
            " House",
            " is",
            " in",
            " the",
            " country",
            " of",
            " Australia",
            " China",
            " France",
            " Germany",
            " Sydney",
            " iconic",
        ];
        Vocab::new(toks.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn sydney(v: &Vocab) -> FactEntry {
        FactEntry::from_text(
            v,
            "Fact: ",
            "Sydney Opera House",
            "IN_COUNTRY",
            " is in the country of",
            "Australia",
            vec!["Sydney".into(), "iconic".into()],
            vec!["China".into(), "France".into(), "Germany".into()],
        )
        .unwrap()
    }

    #[test]
    fn sydney_entry_round_trips() {
        let v = vocab();
        let e = sydney(&v);
        assert_eq!(e.prompt, "Fact: Sydney Opera House is in the country of");
        assert_eq!(e.spans, TokenGroupSpans::from_lengths(1, 3, 4));
        assert_eq!(e.spans.end, 8);
        assert_eq!(v.token(e.a_first_token), Some(" Australia"));
        assert_eq!(e.r_minus_a[..3], ["China", "France", "Germany"]);
        let text = to_jsonl(std::slice::from_ref(&e)).unwrap();
        assert!(text.contains("\"S_minus_a\""));
        assert!(text.contains("\"prefix\":[0,1]"));
        let back = parse_dataset(&text, &v).unwrap();
        assert_eq!(back, vec![e]);
        assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let v = vocab();
        let mut e = sydney(&v);
        e.spans.relation = 3..8;
        let text = to_jsonl(&[e]).unwrap();
        let err = parse_dataset(&text, &v).unwrap_err();
        assert!(err.to_string().contains("overlapping"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_dataset("", &vocab()).unwrap().is_empty());
    }

    #[test]
    fn unknown_attributes_listed_per_entry() {
        let v = vocab();
        let mut e = sydney(&v);
        e.r_minus_a.push("Narnia".into());
        e.s_minus_a.push("Atlantis".into());
        let text = to_jsonl(&[e]).unwrap() + "{not json}\n";
        match parse_dataset(&text, &v).unwrap_err() {
            Error::Dataset(list) => {
                assert_eq!(list.len(), 3, "{list:?}");
                assert!(list[0].starts_with("line 1") && list[2].starts_with("line 2"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn attribute_in_own_set_rejected() {
        let v = vocab();
        let mut e = sydney(&v);
        e.r_minus_a.push("Australia".into());
        assert!(e.validate(&v).is_err());
    }

    #[test]
    fn group_lookup() {
        let s = TokenGroupSpans::from_lengths(1, 3, 4);
        assert_eq!(s.group_of(0), Some(TokenGroup::Prefix));
        assert_eq!(s.group_of(3), Some(TokenGroup::Subject));
        assert_eq!(s.group_of(7), Some(TokenGroup::Relation));
        assert_eq!(s.group_of(8), Some(TokenGroup::End));
        assert_eq!(s.group_of(9), None);
        assert_eq!("relation".parse::<TokenGroup>().unwrap(), TokenGroup::Relation);
    }
}
