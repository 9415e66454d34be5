//! Role-annotated template grammars.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The grammar shipped with the crate.
pub const DEFAULT_GRAMMAR_JSON: &str = include_str!("../../data/default_grammar.json");

/// Word classes understood by the role parser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WordClass {
    Det,
    NounSubj,
    NounObj,
    NounLoc,
    Aux,
    VerbTrans,
    VerbIntrans,
    Prep,
    Adj,
}

impl WordClass {
    pub const ALL: [WordClass; 9] = [
        WordClass::Det,
        WordClass::NounSubj,
        WordClass::NounObj,
        WordClass::NounLoc,
        WordClass::Aux,
        WordClass::VerbTrans,
        WordClass::VerbIntrans,
        WordClass::Prep,
        WordClass::Adj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WordClass::Det => "DET",
            WordClass::NounSubj => "NOUN-SUBJ",
            WordClass::NounObj => "NOUN-OBJ",
            WordClass::NounLoc => "NOUN-LOC",
            WordClass::Aux => "AUX",
            WordClass::VerbTrans => "VERB-TRANS",
            WordClass::VerbIntrans => "VERB-INTRANS",
            WordClass::Prep => "PREP",
            WordClass::Adj => "ADJ",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn is_noun(self) -> bool {
        matches!(self, WordClass::NounSubj | WordClass::NounObj | WordClass::NounLoc)
    }

    pub fn is_verb(self) -> bool {
        matches!(self, WordClass::VerbTrans | WordClass::VerbIntrans)
    }
}

impl fmt::Display for WordClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Semantic role carried by a template slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Verb,
    Dobj,
    Pobj,
    None,
}

impl Role {
    pub const ANNOTATED: [Role; 4] = [Role::Subject, Role::Verb, Role::Dobj, Role::Pobj];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slot {
    pub class: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarFile {
    lexicon: BTreeMap<String, Vec<String>>,
    templates: Vec<Vec<Slot>>,
    weights: Vec<f64>,
}

/// A validated template grammar. Every token of a template belongs to one
/// word class; every annotated role covers one contiguous span.
#[derive(Clone, Debug, PartialEq)]
pub struct GrammarSpec {
    lexicon: BTreeMap<WordClass, Vec<String>>,
    templates: Vec<Vec<(WordClass, Role)>>,
    weights: Vec<f64>,
    word_class: HashMap<String, WordClass>,
}

fn invalid(rule: &'static str, detail: impl Into<String>) -> Error {
    Error::GrammarValidation {
        rule,
        detail: detail.into(),
    }
}

/// Contiguous `(start, end)` span of every annotated role in a skeleton.
pub(crate) fn role_spans_of(skeleton: &[(WordClass, Role)]) -> BTreeMap<Role, (usize, usize)> {
    let mut spans = BTreeMap::new();
    for (i, &(_, role)) in skeleton.iter().enumerate() {
        if role == Role::None {
            continue;
        }
        spans
            .entry(role)
            .and_modify(|s: &mut (usize, usize)| s.1 = i + 1)
            .or_insert((i, i + 1));
    }
    spans
}

impl GrammarSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: GrammarFile = serde_json::from_str(text).map_err(|e| Error::parse_json(&e, 0))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn default_grammar() -> Self {
        Self::from_json_str(DEFAULT_GRAMMAR_JSON).expect("shipped grammar is valid")
    }

    fn from_file(file: GrammarFile) -> Result<Self> {
        if file.templates.is_empty() {
            return Err(invalid("no-templates", "grammar defines no templates"));
        }
        for (t, template) in file.templates.iter().enumerate() {
            for slot in template {
                if !file.lexicon.contains_key(&slot.class) {
                    return Err(invalid(
                        "missing-class",
                        format!("template {t} references class {:?} absent from the lexicon", slot.class),
                    ));
                }
            }
        }
        let mut lexicon = BTreeMap::new();
        let mut word_class = HashMap::new();
        for (name, words) in &file.lexicon {
            let class = WordClass::from_name(name)
                .ok_or_else(|| invalid("unknown-word-class", format!("lexicon class {name:?} is not a known word class")))?;
            if words.is_empty() {
                return Err(invalid("empty-class", format!("class {name} has no words")));
            }
            for w in words {
                if w.is_empty() || w.chars().any(char::is_whitespace) {
                    return Err(invalid("bad-word", format!("class {name} has word {w:?}")));
                }
                if let Some(prev) = word_class.insert(w.clone(), class) {
                    if prev != class {
                        return Err(invalid(
                            "overlapping-classes",
                            format!("word {w:?} belongs to both {prev} and {class}"),
                        ));
                    }
                    return Err(invalid("duplicate-word", format!("word {w:?} repeated in {class}")));
                }
            }
            lexicon.insert(class, words.clone());
        }
        let templates: Vec<Vec<(WordClass, Role)>> = file
            .templates
            .iter()
            .map(|t| {
                t.iter()
                    .map(|s| (WordClass::from_name(&s.class).expect("checked above"), s.role))
                    .collect()
            })
            .collect();
        let mut skeletons = HashSet::new();
        for (t, template) in templates.iter().enumerate() {
            Self::validate_template(t, template)?;
            let classes: Vec<WordClass> = template.iter().map(|s| s.0).collect();
            if !skeletons.insert(classes) {
                return Err(invalid(
                    "ambiguous-templates",
                    format!("template {t} repeats the class sequence of an earlier template"),
                ));
            }
        }
        if file.weights.len() != templates.len() {
            return Err(invalid(
                "weights-length",
                format!("{} weights for {} templates", file.weights.len(), templates.len()),
            ));
        }
        if file.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights-nonnegative", "template weights must be finite and >= 0"));
        }
        let total: f64 = file.weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid("weights-normalized", format!("template weights sum to {total}, expected 1")));
        }
        Ok(Self {
            lexicon,
            templates,
            weights: file.weights,
            word_class,
        })
    }

    fn validate_template(t: usize, template: &[(WordClass, Role)]) -> Result<()> {
        if template.is_empty() {
            return Err(invalid("empty-template", format!("template {t} is empty")));
        }
        for role in Role::ANNOTATED {
            let positions: Vec<usize> = template
                .iter()
                .enumerate()
                .filter(|(_, s)| s.1 == role)
                .map(|(i, _)| i)
                .collect();
            let required = matches!(role, Role::Subject | Role::Verb);
            if positions.is_empty() {
                if required {
                    return Err(invalid("role-count", format!("template {t} has no {role:?} role")));
                }
                continue;
            }
            if positions.last().unwrap() - positions[0] + 1 != positions.len() {
                return Err(invalid(
                    "role-count",
                    format!("template {t}: role {role:?} appears more than once (non-contiguous)"),
                ));
            }
        }
        let verbs = template.iter().filter(|s| s.0.is_verb()).count();
        if verbs != 1 {
            return Err(invalid("verb-count", format!("template {t} has {verbs} verb-class slots")));
        }
        for (i, &(class, role)) in template.iter().enumerate() {
            if class.is_verb() && role != Role::Verb {
                return Err(invalid("verb-role", format!("template {t} slot {i}: verb outside the verb role")));
            }
            if class.is_noun() && !matches!(role, Role::Subject | Role::Dobj | Role::Pobj) {
                return Err(invalid("noun-role", format!("template {t} slot {i}: noun without an argument role")));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        let file = GrammarFile {
            lexicon: self
                .lexicon
                .iter()
                .map(|(c, w)| (c.name().to_string(), w.clone()))
                .collect(),
            templates: self
                .templates
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|&(c, role)| Slot {
                            class: c.name().to_string(),
                            role,
                        })
                        .collect()
                })
                .collect(),
            weights: self.weights.clone(),
        };
        serde_json::to_string_pretty(&file).expect("grammar serializes")
    }

    pub fn lexicon(&self) -> &BTreeMap<WordClass, Vec<String>> {
        &self.lexicon
    }

    pub fn words(&self, class: WordClass) -> &[String] {
        self.lexicon.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn templates(&self) -> &[Vec<(WordClass, Role)>] {
        &self.templates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn class_of(&self, word: &str) -> Option<WordClass> {
        self.word_class.get(word).copied()
    }

    pub fn num_classes(&self) -> usize {
        self.lexicon.len()
    }
}
