use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diff::Metric;
use super::influence::{aggregate_influence, run_influence_experiment, LatentGenerator};
use super::parse::OieRole;
use crate::corpus::{GrammarSpec, Role, WordClass};
use crate::error::{Error, Result};
use crate::manipulate::{LatentAssignment, Provenance};
use crate::model::NoiseSource;

/// Planted LV for each role in the self-test.
pub const DEFAULT_WIRING: [(OieRole, usize); 4] = [(OieRole::Arg0, 2), (OieRole::V, 9), (OieRole::Arg1, 20), (OieRole::Arg2, 33)];

/// A non-neural generator over a fixed transitive+prepositional template.
/// The wired LVs pick the content word of their role: the first coordinate
/// is mapped through the standard normal CDF and binned over the word list.
/// Every other LV is inert.
pub struct WiredGenerator {
    pub levels: [usize; 3],
    pub z_size: usize,
    wiring: BTreeMap<OieRole, usize>,
    skeleton: Vec<(WordClass, Role)>,
    spec: GrammarSpec,
}

impl WiredGenerator {
    pub fn new(spec: &GrammarSpec, levels: [usize; 3], z_size: usize, wiring: &[(OieRole, usize)]) -> Result<Self> {
        let total: usize = levels.iter().sum();
        for &(_, lv) in wiring {
            if lv >= total {
                return Err(Error::Index {
                    what: "wired latent variable",
                    index: lv,
                    limit: total,
                });
            }
        }
        let skeleton = spec
            .templates()
            .iter()
            .find(|t| {
                let has = |c| t.iter().any(|&(x, _)| x == c);
                has(WordClass::VerbTrans) && has(WordClass::NounObj) && has(WordClass::NounLoc) && !has(WordClass::Adj)
            })
            .cloned()
            .ok_or_else(|| Error::Domain("grammar has no transitive+prepositional template without adjectives".into()))?;
        Ok(Self {
            levels,
            z_size,
            wiring: wiring.iter().copied().collect(),
            skeleton,
            spec: spec.clone(),
        })
    }

    fn content_role(class: WordClass, role: Role) -> Option<OieRole> {
        (class.is_noun() || class.is_verb()).then(|| OieRole::from_role(role)).flatten()
    }

    /// Word index chosen by a value's first coordinate among `k` words.
    pub fn bin(value: f64, k: usize) -> usize {
        let u = 0.5 * (1.0 + libm::erf(value / std::f64::consts::SQRT_2));
        ((u * k as f64) as usize).min(k - 1)
    }

    pub fn sentence(&self, latents: &LatentAssignment) -> Vec<String> {
        self.skeleton
            .iter()
            .map(|&(class, role)| {
                let words = self.spec.words(class);
                let idx = Self::content_role(class, role)
                    .and_then(|r| self.wiring.get(&r))
                    .map_or(0, |&lv| Self::bin(latents.lv(lv)[0], words.len()));
                words[idx].clone()
            })
            .collect()
    }

    fn fresh(&self, rng: &mut ChaCha8Rng) -> Result<LatentAssignment> {
        let n: usize = self.levels.iter().sum();
        LatentAssignment::new(
            self.levels,
            self.z_size,
            rng.standard_normal(n * self.z_size),
            vec![Provenance::PriorSampled; n],
        )
    }
}

impl LatentGenerator for WiredGenerator {
    fn num_lvs(&self) -> usize {
        self.levels.iter().sum()
    }

    fn sample_base(&self, rng: &mut ChaCha8Rng) -> Result<LatentAssignment> {
        self.fresh(rng)
    }

    fn resample_many(&self, base: &LatentAssignment, requests: Vec<(usize, ChaCha8Rng)>) -> Result<Vec<LatentAssignment>> {
        requests
            .into_iter()
            .map(|(lv, mut rng)| {
                let mut out = base.clone();
                let v = rng.standard_normal(self.z_size);
                out.lv_mut(lv).copy_from_slice(&v);
                out.provenance[lv] = Provenance::Resampled;
                Ok(out)
            })
            .collect()
    }

    fn generate(&self, latents: &[&LatentAssignment]) -> Result<Vec<Vec<String>>> {
        Ok(latents.iter().map(|a| self.sentence(a)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleRecovery {
    pub role: OieRole,
    pub planted_lv: Option<usize>,
    pub top_lv: usize,
    pub probability: f64,
    pub recovered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WiredReport {
    pub roles: Vec<RoleRecovery>,
    /// Largest OIE_ALTER cell of any LV that is not wired to any role.
    pub max_inert_probability: f64,
    pub min_planted_probability: f64,
    pub records: usize,
    pub passed: bool,
}

/// Thresholds used by the self-test verdict.
pub const WIRED_MIN_PLANTED: f64 = 0.9;
pub const WIRED_MAX_INERT: f64 = 0.1;

/// Run the influence protocol against the wired generator and check that
/// OIE_ALTER recovers the planted role → LV mapping.
pub fn wired_decoder_check(
    spec: &GrammarSpec,
    levels: [usize; 3],
    wiring: &[(OieRole, usize)],
    base_count: usize,
    resamples: usize,
    seed: u64,
) -> Result<WiredReport> {
    let generator = WiredGenerator::new(spec, levels, 8, wiring)?;
    let records = run_influence_experiment(&generator, spec, base_count, resamples, seed)?;
    let matrices = aggregate_influence(&records, generator.num_lvs());
    let m = matrices
        .iter()
        .find(|m| m.metric == Metric::OieAlter)
        .expect("every metric is aggregated");
    let wired: BTreeMap<OieRole, usize> = wiring.iter().copied().collect();
    let mut roles = Vec::new();
    let mut min_planted = f64::INFINITY;
    for role in OieRole::ALL {
        let li = m.label_index(role.name()).expect("role column");
        let mut top = 0;
        for lv in 1..m.num_lvs() {
            if m.probability(lv, li) > m.probability(top, li) {
                top = lv;
            }
        }
        let planted = wired.get(&role).copied();
        let p = m.probability(top, li);
        if let Some(lv) = planted {
            min_planted = min_planted.min(m.probability(lv, li));
        }
        roles.push(RoleRecovery {
            role,
            planted_lv: planted,
            top_lv: top,
            probability: p,
            recovered: planted.map_or(true, |lv| lv == top && p >= WIRED_MIN_PLANTED),
        });
    }
    let mut max_inert: f64 = 0.0;
    for lv in (0..m.num_lvs()).filter(|lv| !wired.values().any(|w| w == lv)) {
        for li in 0..m.labels.len() {
            max_inert = max_inert.max(m.probability(lv, li));
        }
    }
    let passed = roles.iter().all(|r| r.recovered) && max_inert <= WIRED_MAX_INERT;
    Ok(WiredReport {
        roles,
        max_inert_probability: max_inert,
        min_planted_probability: if min_planted.is_finite() { min_planted } else { 0.0 },
        records: records.len(),
        passed,
    })
}
