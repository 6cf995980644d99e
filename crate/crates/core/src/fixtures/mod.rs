// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-built models with known behaviour.
//!
//! Four fixtures share a small fact world (three relations, twenty
//! subjects): a pure subject head, a pure relation head, a two-layer
//! subject→relation propagation circuit, and a composite model in which no
//! single mechanism ranks the answer first but their sum does. A fifth,
//! `div6`, realizes the divisible-by-six toy: two attention components
//! each add +1 to " true" (for divisibility by 2 and by 3) against a +1.5
//! bias on " false".
//!
//! Every fixture carries a closed-form table of the DLA each planted
//! component should have on each relevant token, computed from the plan
//! rather than from the weight matrices.

mod builders;
mod plan;
mod random;
pub mod world;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::ComponentId;
use crate::dataset::{save_dataset, FactEntry};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelPaths};

pub use plan::ExpectedDla;
pub use random::{numbered_vocab, random_bundle, RandomDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    SubjectHead,
    RelationHead,
    Propagation,
    Composite,
    Div6,
}

impl FixtureKind {
    pub const ALL: [FixtureKind; 5] = [
        FixtureKind::SubjectHead,
        FixtureKind::RelationHead,
        FixtureKind::Propagation,
        FixtureKind::Composite,
        FixtureKind::Div6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FixtureKind::SubjectHead => "subject_head",
            FixtureKind::RelationHead => "relation_head",
            FixtureKind::Propagation => "propagation",
            FixtureKind::Composite => "composite",
            FixtureKind::Div6 => "div6",
        }
    }

    /// Smallest `d_model` the fixture accepts.
    pub fn min_d_model(self) -> usize {
        builders::min_d_model(self)
    }
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        FixtureKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown fixture `{s}` (expected one of subject_head, relation_head, propagation, composite, div6)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    pub seed: u64,
    /// Residual width; the fixture default when `None`.
    pub d_model: Option<usize>,
}

impl FixtureSpec {
    pub fn new(kind: FixtureKind, seed: u64) -> Self {
        FixtureSpec {
            kind,
            seed,
            d_model: None,
        }
    }
}

/// What a planted component is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Reads the subject, writes its attribute.
    Subject,
    /// Reads the relation, writes every plausible attribute equally.
    Relation,
    /// Reads both.
    Mixed,
    /// Boosts the relation's attributes from a relation signal.
    Mlp,
    /// Copies subject identity onto the relation position.
    Carry,
    /// Reads carried subject information from the relation position.
    Propagate,
    EvenCircuit,
    TripleCircuit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    pub component: ComponentId,
    pub role: Role,
}

/// Ground truth about a fixture beyond the DLA table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub kind: FixtureKind,
    pub seed: u64,
    pub planted: Vec<Planted>,
    /// Subject → attribute.
    pub planted_facts: BTreeMap<String, String>,
    /// Relation id → its attribute set `R`.
    pub planted_r: BTreeMap<String, Vec<String>>,
}

impl Truth {
    pub fn component(&self, role: Role) -> Option<ComponentId> {
        self.planted.iter().find(|p| p.role == role).map(|p| p.component)
    }

    pub fn components(&self) -> Vec<ComponentId> {
        self.planted.iter().map(|p| p.component).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub seed: u64,
    pub model: ModelBundle,
    pub entries: Vec<FactEntry>,
    pub expected: Vec<ExpectedDla>,
    pub truth: Truth,
}

/// Files written by [`Fixture::emit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixturePaths {
    pub model: ModelPaths,
    pub dataset: PathBuf,
    pub expected: PathBuf,
    pub truth: PathBuf,
}

impl Fixture {
    /// Writes model files, `dataset.jsonl`, `expected.csv` and `truth.json`.
    pub fn emit(&self, dir: &Path) -> Result<FixturePaths> {
        let model = self.model.save(dir)?;
        let dataset = dir.join("dataset.jsonl");
        save_dataset(&dataset, &self.entries)?;

        let expected = dir.join("expected.csv");
        let mut w = csv::Writer::from_path(&expected).map_err(crate::trace::csv_err)?;
        w.write_record(["entry", "component", "group", "token_id", "token", "value"])
            .map_err(crate::trace::csv_err)?;
        for row in &self.expected {
            w.write_record([
                row.entry.to_string(),
                row.component.to_string(),
                row.group.map_or("all", |g| g.as_str()).to_string(),
                row.token.to_string(),
                self.model.vocab.token(row.token).unwrap_or("").to_string(),
                format!("{:e}", row.value),
            ])
            .map_err(crate::trace::csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&expected, e))?;

        let truth = dir.join("truth.json");
        let text = serde_json::to_string_pretty(&self.truth)?;
        std::fs::write(&truth, text + "\n").map_err(|e| Error::io(&truth, e))?;
        Ok(FixturePaths {
            model,
            dataset,
            expected,
            truth,
        })
    }

    /// Expected rows for one entry, component and group.
    pub fn expected_for(
        &self,
        entry: usize,
        component: ComponentId,
        group: Option<crate::dataset::TokenGroup>,
    ) -> impl Iterator<Item = &ExpectedDla> {
        self.expected
            .iter()
            .filter(move |r| r.entry == entry && r.component == component && r.group == group)
    }
}

/// Builds a fixture. Deterministic in `spec`.
pub fn build_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    builders::build(spec)
}
