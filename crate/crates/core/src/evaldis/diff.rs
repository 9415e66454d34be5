use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::parse::{OieRole, RoleParse};

/// The five comparison metrics between an original and a modified sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    RootDepAppear,
    DepAppear,
    OieAppear,
    DepAlter,
    OieAlter,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::RootDepAppear,
        Metric::DepAppear,
        Metric::OieAppear,
        Metric::DepAlter,
        Metric::OieAlter,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            Metric::RootDepAppear => "root_dep_appear",
            Metric::DepAppear => "dep_appear",
            Metric::OieAppear => "oie_appear",
            Metric::DepAlter => "dep_alter",
            Metric::OieAlter => "oie_alter",
        }
    }

    pub fn is_alter(self) -> bool {
        matches!(self, Metric::DepAlter | Metric::OieAlter)
    }
}

/// Payload of an ALTER metric: the labels whose spans changed, or an
/// abstention when the guard (equal length / equal structure) fails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlterPayload {
    Labels(Vec<String>),
    Abstain(AbstainTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbstainTag {
    #[serde(rename = "ABSTAIN")]
    Abstain,
}

impl AlterPayload {
    pub const ABSTAIN: AlterPayload = AlterPayload::Abstain(AbstainTag::Abstain);

    pub fn labels(&self) -> Option<&[String]> {
        match self {
            AlterPayload::Labels(l) => Some(l),
            AlterPayload::Abstain(_) => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, AlterPayload::Abstain(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub couple_id: u64,
    pub lv_index: usize,
    pub root_dep_appear: BTreeSet<String>,
    pub dep_appear: BTreeSet<String>,
    pub oie_appear: BTreeSet<String>,
    pub dep_alter: AlterPayload,
    pub oie_alter: AlterPayload,
    pub structure_broken: bool,
    #[serde(default)]
    pub original: String,
    #[serde(default)]
    pub modified: String,
}

impl DiffRecord {
    /// Labels counted for `metric`, or `None` when the metric abstained.
    pub fn payload(&self, metric: Metric) -> Option<Vec<&str>> {
        fn set(s: &BTreeSet<String>) -> Option<Vec<&str>> {
            Some(s.iter().map(String::as_str).collect())
        }
        match metric {
            Metric::RootDepAppear => set(&self.root_dep_appear),
            Metric::DepAppear => set(&self.dep_appear),
            Metric::OieAppear => set(&self.oie_appear),
            Metric::DepAlter => self.dep_alter.labels().map(|l| l.iter().map(String::as_str).collect()),
            Metric::OieAlter => self.oie_alter.labels().map(|l| l.iter().map(String::as_str).collect()),
        }
    }
}

fn sym_diff<'a>(a: impl IntoIterator<Item = &'a String>, b: impl IntoIterator<Item = &'a String>) -> BTreeSet<String> {
    let a: BTreeSet<&String> = a.into_iter().collect();
    let b: BTreeSet<&String> = b.into_iter().collect();
    a.symmetric_difference(&b).map(|s| (*s).clone()).collect()
}

/// Occurrences `(position, word)` of every label, in sentence order.
fn label_positions<'a>(parse: &'a RoleParse, tokens: &'a [String]) -> BTreeMap<&'a str, Vec<(usize, &'a str)>> {
    let mut out: BTreeMap<&str, Vec<(usize, &str)>> = BTreeMap::new();
    for (i, l) in parse.all_labels.iter().enumerate() {
        let w = tokens.get(i).map_or("", String::as_str);
        out.entry(l.as_str()).or_default().push((i, w));
    }
    out
}

fn span_text(tokens: &[String], (s, e): (usize, usize)) -> &[String] {
    let e = e.min(tokens.len());
    &tokens[s.min(e)..e]
}

/// Compare two parsed sentences under the five metrics.
pub fn diff_statistics(
    original: &RoleParse,
    modified: &RoleParse,
    orig_tokens: &[String],
    mod_tokens: &[String],
) -> DiffRecord {
    let mut rec = DiffRecord {
        couple_id: 0,
        lv_index: 0,
        root_dep_appear: BTreeSet::new(),
        dep_appear: BTreeSet::new(),
        oie_appear: BTreeSet::new(),
        dep_alter: AlterPayload::ABSTAIN,
        oie_alter: AlterPayload::ABSTAIN,
        structure_broken: false,
        original: orig_tokens.join(" "),
        modified: mod_tokens.join(" "),
    };
    if !original.is_parsed() || !modified.is_parsed() {
        rec.structure_broken = true;
        return rec;
    }
    rec.root_dep_appear = sym_diff(&original.root_children, &modified.root_children);
    rec.dep_appear = sym_diff(&original.all_labels, &modified.all_labels);
    let roles = |p: &RoleParse| p.role_spans.keys().map(|r| r.name().to_string()).collect::<Vec<_>>();
    let (ra, rb) = (roles(original), roles(modified));
    rec.oie_appear = sym_diff(&ra, &rb);

    if orig_tokens.len() == mod_tokens.len() {
        let (a, b) = (label_positions(original, orig_tokens), label_positions(modified, mod_tokens));
        let labels: BTreeSet<&str> = a.keys().chain(b.keys()).copied().collect();
        let changed = labels
            .into_iter()
            .filter(|l| a.get(l) != b.get(l))
            .map(str::to_string)
            .collect();
        rec.dep_alter = AlterPayload::Labels(changed);
    }
    if ra == rb {
        let changed = OieRole::ALL
            .iter()
            .filter(|r| match (original.role_spans.get(r), modified.role_spans.get(r)) {
                (Some(&sa), Some(&sb)) => span_text(orig_tokens, sa) != span_text(mod_tokens, sb),
                _ => false,
            })
            .map(|r| r.name().to_string())
            .collect();
        rec.oie_alter = AlterPayload::Labels(changed);
    }
    rec
}
