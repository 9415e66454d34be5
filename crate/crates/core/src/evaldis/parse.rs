use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{GrammarSpec, Role, WordClass};

/// Predicate-argument roles of the first predicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OieRole {
    #[serde(rename = "ARG0")]
    Arg0,
    V,
    #[serde(rename = "ARG1")]
    Arg1,
    #[serde(rename = "ARG2")]
    Arg2,
}

impl OieRole {
    pub const ALL: [OieRole; 4] = [OieRole::Arg0, OieRole::V, OieRole::Arg1, OieRole::Arg2];

    pub fn name(self) -> &'static str {
        match self {
            OieRole::Arg0 => "ARG0",
            OieRole::V => "V",
            OieRole::Arg1 => "ARG1",
            OieRole::Arg2 => "ARG2",
        }
    }

    pub fn from_role(role: Role) -> Option<Self> {
        match role {
            Role::Subject => Some(OieRole::Arg0),
            Role::Verb => Some(OieRole::V),
            Role::Dobj => Some(OieRole::Arg1),
            Role::Pobj => Some(OieRole::Arg2),
            Role::None => None,
        }
    }
}

impl fmt::Display for OieRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every dependency label the oracle emits, in column order.
pub const DEP_LABELS: [&str; 8] = ["aux", "amod", "det", "dobj", "nsubj", "pobj", "prep", "root"];
/// Labels that attach directly to the root.
pub const ROOT_CHILD_LABELS: [&str; 4] = ["aux", "dobj", "nsubj", "prep"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ParseStatus {
    Parsed,
    Unparsed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleParse {
    pub status: ParseStatus,
    /// Word class of the verb, e.g. `VERB-TRANS`.
    #[serde(default)]
    pub root_label: Option<String>,
    #[serde(default)]
    pub root_children: BTreeSet<String>,
    /// Dependency label of every token, in order.
    #[serde(default)]
    pub all_labels: Vec<String>,
    #[serde(default)]
    pub role_spans: BTreeMap<OieRole, (usize, usize)>,
}

impl RoleParse {
    pub fn unparsed() -> Self {
        Self {
            status: ParseStatus::Unparsed,
            root_label: None,
            root_children: BTreeSet::new(),
            all_labels: Vec::new(),
            role_spans: BTreeMap::new(),
        }
    }

    pub fn is_parsed(&self) -> bool {
        self.status == ParseStatus::Parsed
    }

    /// Structural consistency of an externally produced parse.
    pub fn is_well_formed(&self) -> bool {
        match self.status {
            ParseStatus::Unparsed => true,
            ParseStatus::Parsed => {
                let mut spans: Vec<(usize, usize)> = self.role_spans.values().copied().collect();
                spans.sort_unstable();
                self.root_label.is_some()
                    && self.role_spans.contains_key(&OieRole::V)
                    && spans.iter().all(|&(s, e)| s < e)
                    && spans.windows(2).all(|w| w[0].1 <= w[1].0)
            }
        }
    }
}

fn label(class: WordClass, role: Role) -> &'static str {
    match class {
        WordClass::Det => "det",
        WordClass::Adj => "amod",
        WordClass::Aux => "aux",
        WordClass::VerbTrans | WordClass::VerbIntrans => "root",
        WordClass::Prep => "prep",
        WordClass::NounSubj | WordClass::NounObj | WordClass::NounLoc => match role {
            Role::Subject => "nsubj",
            Role::Dobj => "dobj",
            Role::Pobj => "pobj",
            Role::Verb | Role::None => "dep",
        },
    }
}

/// Index of the template whose class sequence matches the whole sentence.
pub fn match_template(tokens: &[impl AsRef<str>], spec: &GrammarSpec) -> Option<usize> {
    let classes: Option<Vec<WordClass>> = tokens.iter().map(|t| spec.class_of(t.as_ref())).collect();
    let classes = classes?;
    spec.templates()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() == classes.len() && t.iter().zip(&classes).all(|((c, _), w)| c == w))
        .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)))
        .map(|(i, _)| i)
}

/// Oracle parse of a sentence against the grammar's templates.
pub fn parse_roles(tokens: &[impl AsRef<str>], spec: &GrammarSpec) -> RoleParse {
    let Some(t) = match_template(tokens, spec) else {
        return RoleParse::unparsed();
    };
    let skeleton = &spec.templates()[t];
    let all_labels: Vec<String> = skeleton.iter().map(|&(c, r)| label(c, r).to_string()).collect();
    let root_children = all_labels
        .iter()
        .filter(|l| ROOT_CHILD_LABELS.contains(&l.as_str()))
        .cloned()
        .collect();
    let root_label = skeleton.iter().find(|(c, _)| c.is_verb()).map(|(c, _)| c.name().to_string());
    let role_spans = crate::corpus::role_spans_of(skeleton)
        .into_iter()
        .filter_map(|(r, s)| OieRole::from_role(r).map(|o| (o, s)))
        .collect();
    RoleParse {
        status: ParseStatus::Parsed,
        root_label,
        root_children,
        all_labels,
        role_spans,
    }
}
