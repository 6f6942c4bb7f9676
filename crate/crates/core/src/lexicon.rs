//! Identity lexicons: marginalized and dominant term sets per identity axis.
//!
//! The lexicon file is TOML with one table per axis:
//!
//! ```toml
//! [gender-identity]
//! marginalized = ["non-binary", "enby"]
//! dominant = ["cis", "cisgender"]
//!
//! [sexual-orientation]
//! marginalized = ["queer", "gay"]
//! dominant = ["straight"]
//! ```

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The two identity axes the benchmark covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AxisKind {
    #[serde(rename = "gender-identity")]
    GenderIdentity,
    #[serde(rename = "sexual-orientation")]
    SexualOrientation,
}

impl AxisKind {
    pub const ALL: [AxisKind; 2] = [AxisKind::GenderIdentity, AxisKind::SexualOrientation];

    pub fn as_str(self) -> &'static str {
        match self {
            AxisKind::GenderIdentity => "gender-identity",
            AxisKind::SexualOrientation => "sexual-orientation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gender-identity" => Ok(AxisKind::GenderIdentity),
            "sexual-orientation" => Ok(AxisKind::SexualOrientation),
            other => Err(Error::Lexicon(format!("unknown axis {other:?}"))),
        }
    }
}

impl fmt::Display for AxisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Term sets for one axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub kind: AxisKind,
    pub marginalized: Vec<String>,
    pub dominant: Vec<String>,
}

/// Validated collection of identity axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityLexicon {
    axes: Vec<Axis>,
}

#[derive(Deserialize)]
struct AxisFile {
    marginalized: Vec<String>,
    dominant: Vec<String>,
}

impl IdentityLexicon {
    /// Build a lexicon, normalizing terms to lowercase and enforcing the
    /// invariants: every axis non-empty on both sides, no duplicate term
    /// within an axis.
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::Lexicon("lexicon has no axes".into()));
        }
        let mut seen_axes = HashSet::new();
        let mut normalized = Vec::with_capacity(axes.len());
        for axis in axes {
            if !seen_axes.insert(axis.kind) {
                return Err(Error::Lexicon(format!("axis {} appears twice", axis.kind)));
            }
            let marginalized = normalize_terms(axis.kind, &axis.marginalized, "marginalized")?;
            let dominant = normalize_terms(axis.kind, &axis.dominant, "dominant")?;
            let mut all = HashSet::new();
            for term in marginalized.iter().chain(&dominant) {
                if !all.insert(term.clone()) {
                    return Err(Error::Lexicon(format!(
                        "term {:?} appears in more than one set of axis {}",
                        term, axis.kind
                    )));
                }
            }
            normalized.push(Axis {
                kind: axis.kind,
                marginalized,
                dominant,
            });
        }
        Ok(Self { axes: normalized })
    }

    /// The built-in default term sets.
    pub fn default_terms() -> Self {
        let gender = Axis {
            kind: AxisKind::GenderIdentity,
            marginalized: vec![
                "non-binary".into(),
                "enby".into(),
                "gender-fluid".into(),
                "transgender".into(),
                "trans*".into(),
                "intersex".into(),
                "inter*".into(),
            ],
            dominant: vec!["cis".into(), "cisgender".into()],
        };
        let orientation = Axis {
            kind: AxisKind::SexualOrientation,
            marginalized: vec![
                "queer".into(),
                "bisexual".into(),
                "bi".into(),
                "homosexual".into(),
                "homo".into(),
                "gay".into(),
                "lesbian".into(),
                "sapphic".into(),
                "asexual".into(),
                "ace".into(),
                "pansexual".into(),
                "pan".into(),
                "demisexual".into(),
                "demi".into(),
            ],
            dominant: vec!["heterosexual".into(), "hetero".into(), "straight".into()],
        };
        Self::new(vec![gender, orientation]).expect("default lexicon is valid")
    }

    /// Load and validate a lexicon from a TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let tables: BTreeMap<String, AxisFile> =
            toml::from_str(text).map_err(|e| Error::Parse {
                path: origin.to_string(),
                message: e.to_string(),
            })?;
        let mut axes = Vec::new();
        for (name, table) in tables {
            axes.push(Axis {
                kind: AxisKind::parse(&name)?,
                marginalized: table.marginalized,
                dominant: table.dominant,
            });
        }
        Self::new(axes)
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = String::new();
        for axis in &self.axes {
            out.push_str(&format!("[{}]\n", axis.kind));
            out.push_str(&format!(
                "marginalized = [{}]\n",
                quote_list(&axis.marginalized)
            ));
            out.push_str(&format!("dominant = [{}]\n\n", quote_list(&axis.dominant)));
        }
        out
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, kind: AxisKind) -> Option<&Axis> {
        self.axes.iter().find(|a| a.kind == kind)
    }

    /// Marginalized terms across all axes, in lexicon order.
    pub fn marginalized_terms(&self) -> impl Iterator<Item = (AxisKind, &str)> {
        self.axes.iter().flat_map(|axis| {
            axis.marginalized
                .iter()
                .map(move |t| (axis.kind, t.as_str()))
        })
    }
}

fn normalize_terms(kind: AxisKind, terms: &[String], side: &str) -> Result<Vec<String>> {
    if terms.is_empty() {
        return Err(Error::Lexicon(format!(
            "axis {kind} has an empty {side} set"
        )));
    }
    terms
        .iter()
        .map(|t| {
            let t = t.trim().to_lowercase();
            if t.is_empty() {
                Err(Error::Lexicon(format!("axis {kind} has an empty term")))
            } else {
                Ok(t)
            }
        })
        .collect()
}

fn quote_list(items: &[String]) -> String {
    items
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}
