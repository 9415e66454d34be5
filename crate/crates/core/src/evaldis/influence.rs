use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diff::{diff_statistics, DiffRecord, Metric};
use super::parse::{parse_roles, RoleParse, DEP_LABELS, OieRole, ROOT_CHILD_LABELS};
use crate::corpus::{detokenize, GrammarSpec, Vocab};
use crate::error::{Error, Result};
use crate::manipulate::{conditional_priors, generate_batch, resample_with_priors, sample_prior_chain, Decoding, LatentAssignment};
use crate::model::HierarchicalVae;
use crate::params::ParameterStore;

/// Anything that maps latent assignments to sentences and knows how to draw
/// and resample them.
pub trait LatentGenerator: Sync {
    fn num_lvs(&self) -> usize;
    fn sample_base(&self, rng: &mut ChaCha8Rng) -> Result<LatentAssignment>;
    /// One resampled copy of `base` per `(lv, rng)` request.
    fn resample_many(&self, base: &LatentAssignment, requests: Vec<(usize, ChaCha8Rng)>) -> Result<Vec<LatentAssignment>>;
    fn generate(&self, latents: &[&LatentAssignment]) -> Result<Vec<Vec<String>>>;
}

/// The trained model driven greedily.
pub struct NeuralGenerator<'a> {
    pub model: &'a HierarchicalVae,
    pub params: &'a ParameterStore<f32>,
    pub vocab: &'a Vocab,
    pub max_len: usize,
}

impl LatentGenerator for NeuralGenerator<'_> {
    fn num_lvs(&self) -> usize {
        self.model.config().total_lvs()
    }

    fn sample_base(&self, rng: &mut ChaCha8Rng) -> Result<LatentAssignment> {
        sample_prior_chain(self.model, self.params, rng)
    }

    fn resample_many(&self, base: &LatentAssignment, requests: Vec<(usize, ChaCha8Rng)>) -> Result<Vec<LatentAssignment>> {
        let priors = conditional_priors(self.model, self.params, base)?;
        requests
            .into_iter()
            .map(|(lv, mut rng)| resample_with_priors(base, &priors, lv, &mut rng))
            .collect()
    }

    fn generate(&self, latents: &[&LatentAssignment]) -> Result<Vec<Vec<String>>> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = generate_batch(self.model, self.params, latents, self.max_len, Decoding::Greedy, &mut unused)?;
        Ok(out.iter().map(|g| detokenize(&g.tokens, self.vocab)).collect())
    }
}

const BASE_DOMAIN: u64 = 1 << 56;
const TRIAL_DOMAIN: u64 = 2 << 56;

/// An independent ChaCha stream per (domain, index).
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain | index);
    rng
}

/// Couples for every base sentence, LV and trial, ordered by
/// `couple_id = (base·N + lv)·resamples + trial`. Each base runs on its own
/// task; all randomness comes from per-base and per-triple streams.
pub fn run_influence_experiment(
    generator: &dyn LatentGenerator,
    spec: &GrammarSpec,
    base_count: usize,
    resamples_per_lv: usize,
    seed: u64,
) -> Result<Vec<DiffRecord>> {
    let n = generator.num_lvs();
    let per_base = n * resamples_per_lv;
    let chunks: Vec<Result<Vec<DiffRecord>>> = (0..base_count)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, BASE_DOMAIN, b as u64);
            let base = generator.sample_base(&mut rng)?;
            let requests: Vec<(usize, ChaCha8Rng)> = (0..per_base)
                .map(|j| {
                    let id = (b * per_base + j) as u64;
                    (j / resamples_per_lv, stream_rng(seed, TRIAL_DOMAIN, id))
                })
                .collect();
            let variants = generator.resample_many(&base, requests)?;
            let mut all: Vec<&LatentAssignment> = Vec::with_capacity(per_base + 1);
            all.push(&base);
            all.extend(variants.iter());
            let sentences = generator.generate(&all)?;
            let orig = &sentences[0];
            let orig_parse = parse_roles(orig, spec);
            Ok(sentences[1..]
                .iter()
                .enumerate()
                .map(|(j, modified)| {
                    let mut rec = diff_statistics(&orig_parse, &parse_roles(modified, spec), orig, modified);
                    rec.couple_id = (b * per_base + j) as u64;
                    rec.lv_index = j / resamples_per_lv;
                    rec
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(base_count * per_base);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Column labels of a metric's matrix.
pub fn metric_labels(metric: Metric) -> Vec<String> {
    match metric {
        Metric::RootDepAppear => ROOT_CHILD_LABELS.iter().map(|s| s.to_string()).collect(),
        Metric::DepAppear | Metric::DepAlter => DEP_LABELS.iter().map(|s| s.to_string()).collect(),
        Metric::OieAppear | Metric::OieAlter => OieRole::ALL.iter().map(|r| r.name().to_string()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub metric: Metric,
    pub labels: Vec<String>,
    /// `hits[lv][label]`: trials whose payload contains the label.
    pub hits: Vec<Vec<u64>>,
    /// All trials per LV.
    pub trials: Vec<u64>,
    /// Trials counted in the denominator: all trials for APPEAR metrics,
    /// non-abstaining ones for ALTER metrics.
    pub valid: Vec<u64>,
}

impl InfluenceMatrix {
    pub fn num_lvs(&self) -> usize {
        self.trials.len()
    }

    pub fn probability(&self, lv: usize, label: usize) -> f64 {
        match self.valid[lv] {
            0 => 0.0,
            v => self.hits[lv][label] as f64 / v as f64,
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// LVs whose denominator is empty (every trial abstained).
    pub fn flagged(&self) -> Vec<usize> {
        (0..self.num_lvs()).filter(|&lv| self.valid[lv] == 0).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["lv".to_string()];
        header.extend(self.labels.iter().cloned());
        header.push("valid_trials".into());
        w.write_record(&header)?;
        for lv in 0..self.num_lvs() {
            let mut row = vec![lv.to_string()];
            row.extend((0..self.labels.len()).map(|l| self.probability(lv, l).to_string()));
            row.push(self.valid[lv].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<influence csv>", e))?;
        Ok(())
    }
}

/// One influence matrix per metric, rows `0..num_lvs`. Labels outside the
/// metric's column set are ignored.
pub fn aggregate_influence(records: &[DiffRecord], num_lvs: usize) -> Vec<InfluenceMatrix> {
    Metric::ALL
        .iter()
        .map(|&metric| {
            let labels = metric_labels(metric);
            let mut m = InfluenceMatrix {
                metric,
                hits: vec![vec![0; labels.len()]; num_lvs],
                trials: vec![0; num_lvs],
                valid: vec![0; num_lvs],
                labels,
            };
            for r in records.iter().filter(|r| r.lv_index < num_lvs) {
                m.trials[r.lv_index] += 1;
                let payload = r.payload(metric);
                if metric.is_alter() && payload.is_none() {
                    continue;
                }
                m.valid[r.lv_index] += 1;
                for l in payload.unwrap_or_default() {
                    if let Some(i) = m.label_index(l) {
                        m.hits[r.lv_index][i] += 1;
                    }
                }
            }
            m
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopInfluencer {
    pub metric: Metric,
    pub label: String,
    pub lv: usize,
    pub probability: f64,
    pub valid_trials: u64,
}

/// Arg-max LV of every label; ties go to the lowest LV index.
pub fn top_influencers(matrices: &[InfluenceMatrix]) -> Vec<TopInfluencer> {
    let mut out = Vec::new();
    for m in matrices {
        for (li, label) in m.labels.iter().enumerate() {
            let mut best = 0;
            for lv in 1..m.num_lvs() {
                if m.probability(lv, li) > m.probability(best, li) {
                    best = lv;
                }
            }
            if m.num_lvs() > 0 {
                out.push(TopInfluencer {
                    metric: m.metric,
                    label: label.clone(),
                    lv: best,
                    probability: m.probability(best, li),
                    valid_trials: m.valid[best],
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSummary {
    pub records: usize,
    pub structure_broken: usize,
    pub structure_broken_rate: f64,
    pub top_influencers: Vec<TopInfluencer>,
    /// Metric → LVs whose every trial abstained.
    pub flagged: BTreeMap<String, Vec<usize>>,
}

pub fn summarize(records: &[DiffRecord], matrices: &[InfluenceMatrix]) -> InfluenceSummary {
    let broken = records.iter().filter(|r| r.structure_broken).count();
    InfluenceSummary {
        records: records.len(),
        structure_broken: broken,
        structure_broken_rate: if records.is_empty() { 0.0 } else { broken as f64 / records.len() as f64 },
        top_influencers: top_influencers(matrices),
        flagged: matrices
            .iter()
            .map(|m| (m.metric.file_stem().to_string(), m.flagged()))
            .filter(|(_, f)| !f.is_empty())
            .collect(),
    }
}

/// A couple parsed by an external system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCouple {
    pub couple_id: u64,
    pub lv_index: usize,
    pub original_tokens: Vec<String>,
    pub modified_tokens: Vec<String>,
    pub original: RoleParse,
    pub modified: RoleParse,
}

/// Read JSON-lines couples; blank lines are skipped.
pub fn read_external_couples<R: BufRead>(reader: R) -> Result<Vec<ExternalCouple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<external parses>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: ExternalCouple = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        for (side, p) in [("original", &c.original), ("modified", &c.modified)] {
            if !p.is_well_formed() {
                return Err(Error::Parse {
                    line: i + 1,
                    column: 0,
                    message: format!("{side} parse is inconsistent (missing root or V span, or overlapping spans)"),
                });
            }
        }
        out.push(c);
    }
    Ok(out)
}

pub fn diff_external(couples: &[ExternalCouple]) -> Vec<DiffRecord> {
    couples
        .iter()
        .map(|c| {
            let mut r = diff_statistics(&c.original, &c.modified, &c.original_tokens, &c.modified_tokens);
            r.couple_id = c.couple_id;
            r.lv_index = c.lv_index;
            r
        })
        .collect()
}
