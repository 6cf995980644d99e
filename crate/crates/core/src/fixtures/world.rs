// SPDX-License-Identifier: MIT OR Apache-2.0

//! The synthetic fact world shared by the four attention fixtures: three
//! relations, twenty subjects, a ~100-token vocab.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::FactEntry;
use crate::error::Result;
use crate::model::{TokenId, Vocab};

pub const PREFIX: &str = "Fact: ";
pub const END_TOKEN: &str = " of";

pub struct Subject {
    pub name: &'static str,
    pub attribute: &'static str,
    /// `S ∖ {a}`; the first two drive the composite fixture.
    pub s_minus_a: [&'static str; 2],
}

pub struct Relation {
    pub id: &'static str,
    pub text: &'static str,
    /// Last RELATION token; relation heads key on it.
    pub key_token: &'static str,
    /// A plausible-for-the-relation token that is never an answer.
    pub generic: &'static str,
    /// `R`, with the popular non-answer first.
    pub r: [&'static str; 5],
    pub subjects: &'static [Subject],
}

const fn s(name: &'static str, attribute: &'static str, s0: &'static str, s1: &'static str) -> Subject {
    Subject {
        name,
        attribute,
        s_minus_a: [s0, s1],
    }
}

pub const RELATIONS: [Relation; 3] = [
    Relation {
        id: "PLAYS_SPORT",
        text: " plays the sport of",
        key_token: " sport",
        generic: "players",
        r: ["soccer", "basketball", "tennis", "football", "golf"],
        subjects: &[
            s("Michael Jordan", "basketball", "Bulls", "Chicago"),
            s("Kobe Bryant", "basketball", "Lakers", "USA"),
            s("Serena Williams", "tennis", "USA", "Wimbledon"),
            s("Roger Federer", "tennis", "Swiss", "Wimbledon"),
            s("Tom Brady", "football", "Patriots", "USA"),
            s("Tiger Woods", "golf", "USA", "Masters"),
            s("Phil Mickelson", "golf", "Masters", "USA"),
        ],
    },
    Relation {
        id: "IN_COUNTRY",
        text: " is in the country of",
        key_token: " country",
        generic: "nation",
        r: ["China", "France", "Italy", "Japan", "Egypt"],
        subjects: &[
            s("The Colosseum", "Italy", "Rome", "Roman"),
            s("Pompeii", "Italy", "Roman", "volcano"),
            s("The Louvre", "France", "Paris", "museum"),
            s("Versailles", "France", "Paris", "palace"),
            s("Mount Fuji", "Japan", "volcano", "Tokyo"),
            s("The Pyramids", "Egypt", "Cairo", "desert"),
            s("The Sphinx", "Egypt", "desert", "Cairo"),
        ],
    },
    Relation {
        id: "HAS_CAPITAL",
        text: " has the capital of",
        key_token: " capital",
        generic: "city",
        r: ["London", "Paris", "Rome", "Tokyo", "Berlin"],
        subjects: &[
            s("France", "Paris", "French", "wine"),
            s("Italy", "Rome", "Italian", "Roman"),
            s("Japan", "Tokyo", "Japanese", "sushi"),
            s("Germany", "Berlin", "German", "BMW"),
            s("Prussia", "Berlin", "German", "Kaiser"),
            s("Nippon", "Tokyo", "Japanese", "sushi"),
        ],
    },
];

const FILLER: [&str; 21] = [
    " a",
    " an",
    " and",
    " or",
    " was",
    " born",
    " known",
    " for",
    " at",
    " on",
    " to",
    " with",
    " by",
    " from",
    " as",
    " famous",
    " team",
    " river",
    " king",
    " language",
    " red",
];

/// Subject words: the first without a leading space, the rest with one.
pub fn subject_words(name: &str) -> Vec<String> {
    name.split(' ')
        .enumerate()
        .map(|(i, w)| if i == 0 { w.to_string() } else { format!(" {w}") })
        .collect()
}

fn relation_words(text: &str) -> Vec<String> {
    text.split(' ').skip(1).map(|w| format!(" {w}")).collect()
}

/// Attribute strings in their leading-space token form.
pub fn attr_token(attr: &str) -> String {
    format!(" {attr}")
}

/// Every vocab string in canonical (pre-shuffle) order.
pub fn token_strings() -> Vec<String> {
    let mut out: Vec<String> = vec![PREFIX.to_string()];
    let mut push = |t: String| {
        if !out.contains(&t) {
            out.push(t);
        }
    };
    for rel in &RELATIONS {
        for w in relation_words(rel.text) {
            push(w);
        }
        for subj in rel.subjects {
            for w in subject_words(subj.name) {
                push(w);
            }
        }
    }
    for rel in &RELATIONS {
        for a in rel.r.iter().chain([&rel.generic]) {
            push(attr_token(a));
        }
        for subj in rel.subjects {
            for a in subj.s_minus_a {
                push(attr_token(a));
            }
        }
    }
    for f in FILLER {
        push(f.to_string());
    }
    out
}

/// The world vocab with ids shuffled by `seed`.
pub fn vocab(seed: u64) -> Vocab {
    let mut toks = token_strings();
    toks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_70c5));
    Vocab::new(toks).expect("world tokens are unique")
}

/// All twenty entries, grouped by relation in declaration order.
pub fn entries(vocab: &Vocab) -> Result<Vec<FactEntry>> {
    let mut out = Vec::new();
    for rel in &RELATIONS {
        for subj in rel.subjects {
            let r_minus_a = rel
                .r
                .iter()
                .filter(|&&x| x != subj.attribute)
                .map(|x| x.to_string())
                .collect();
            out.push(FactEntry::from_text(
                vocab,
                PREFIX,
                subj.name,
                rel.id,
                rel.text,
                subj.attribute,
                subj.s_minus_a.iter().map(|x| x.to_string()).collect(),
                r_minus_a,
            )?);
        }
    }
    Ok(out)
}

pub fn relation(id: &str) -> Option<&'static Relation> {
    RELATIONS.iter().find(|r| r.id == id)
}

/// Token id of the final word of a subject.
pub fn subject_final_token(vocab: &Vocab, name: &str) -> TokenId {
    let words = subject_words(name);
    vocab
        .id(words.last().expect("non-empty"))
        .expect("subject word in vocab")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_shape() {
        let toks = token_strings();
        assert_eq!(toks.len(), 100);
        let v = vocab(0);
        let e = entries(&v).unwrap();
        assert_eq!(e.len(), 20);
        assert_eq!(e[0].prompt, "Fact: Michael Jordan plays the sport of");
        assert_eq!(e[0].spans.prefix, 0..1);
        assert_eq!(e[0].spans.subject, 1..3);
        assert_eq!(e[0].spans.relation, 3..6);
        assert_eq!(v.token(e[0].prompt_tokens[5]), Some(" sport"));
        assert_eq!(v.token(e[0].prompt_tokens[6]), Some(END_TOKEN));
        // Subject final words are unique.
        let mut finals: Vec<_> = RELATIONS
            .iter()
            .flat_map(|r| r.subjects.iter().map(|s| subject_final_token(&v, s.name)))
            .collect();
        finals.sort();
        finals.dedup();
        assert_eq!(finals.len(), 20);
    }

    #[test]
    fn shuffle_depends_on_seed() {
        assert_ne!(vocab(1).tokens(), vocab(2).tokens());
        assert_eq!(vocab(3), vocab(3));
    }
}
