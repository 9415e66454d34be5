//! Prior sampling, generation, single-LV resampling and LV swaps.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{TokenSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{GaussianParams, HierarchicalVae, ModelConfig, NoiseSource, ZeroNoise};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    PriorSampled,
    PosteriorEncoded,
    Resampled,
    Swapped,
}

/// Values of all LVs in global order, `[n1+n2+n3, z_size]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentAssignment {
    pub levels: [usize; 3],
    pub z_size: usize,
    pub values: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl LatentAssignment {
    pub fn new(levels: [usize; 3], z_size: usize, values: Vec<f64>, provenance: Vec<Provenance>) -> Result<Self> {
        let a = Self {
            levels,
            z_size,
            values,
            provenance,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.z_size == 0 || self.levels.contains(&0) {
            return Err(Error::Domain("latent levels and z_size must be positive".into()));
        }
        if self.values.len() != n * self.z_size || self.provenance.len() != n {
            return Err(Error::Domain(format!(
                "assignment holds {} values and {} provenance tags for {n} LVs of size {}",
                self.values.len(),
                self.provenance.len(),
                self.z_size
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("latent values must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::parse_json(&e, 0))?;
        a.validate()?;
        Ok(a)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("assignment serializes")
    }

    pub fn len(&self) -> usize {
        self.levels.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.levels == config.counts() && self.z_size == config.z_size
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if !self.matches(config) {
            return Err(Error::Domain(format!(
                "assignment layout {:?}×{} does not match the model's {:?}×{}",
                self.levels,
                self.z_size,
                config.counts(),
                config.z_size
            )));
        }
        Ok(())
    }

    fn check_lv(&self, lv: usize) -> Result<()> {
        if lv >= self.len() {
            return Err(Error::Index {
                what: "latent variable",
                index: lv,
                limit: self.len(),
            });
        }
        Ok(())
    }

    pub fn lv(&self, lv: usize) -> &[f64] {
        &self.values[lv * self.z_size..(lv + 1) * self.z_size]
    }

    pub fn lv_mut(&mut self, lv: usize) -> &mut [f64] {
        &mut self.values[lv * self.z_size..(lv + 1) * self.z_size]
    }

    /// `(level index 0..3, index within level)`.
    pub fn locate(&self, lv: usize) -> Result<(usize, usize)> {
        self.check_lv(lv)?;
        let mut start = 0;
        for (k, &n) in self.levels.iter().enumerate() {
            if lv < start + n {
                return Ok((k, lv - start));
            }
            start += n;
        }
        unreachable!("checked above")
    }

    fn level_start(&self, k: usize) -> usize {
        self.levels[..k].iter().sum()
    }

    pub fn level_tensor<T: Scalar>(&self, k: usize) -> Tensor<T> {
        let s = self.level_start(k) * self.z_size;
        let e = s + self.levels[k] * self.z_size;
        Tensor::from_f64(self.levels[k], self.z_size, &self.values[s..e])
    }

    fn level_tensors<T: Scalar>(&self) -> [Tensor<T>; 3] {
        std::array::from_fn(|k| self.level_tensor(k))
    }
}

fn draw(params: &GaussianParams<impl Scalar>, row: usize, eps: &[f64]) -> Vec<f64> {
    params
        .means
        .row(row)
        .iter()
        .zip(params.stds.row(row))
        .zip(eps)
        .map(|((&m, &s), &e)| m.to_f64() + s.to_f64() * e)
        .collect()
}

fn draw_all<T: Scalar>(params: &GaussianParams<T>, noise: &mut dyn NoiseSource) -> Vec<f64> {
    let z = params.means.cols();
    let eps = noise.standard_normal(params.means.len());
    (0..params.means.rows())
        .flat_map(|r| draw(params, r, &eps[r * z..(r + 1) * z]))
        .collect()
}

/// z1 ~ N(0, I), z2 ~ p(z2 | z1), z3 ~ p(z3 | z1, z2).
pub fn sample_prior_chain<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    noise: &mut dyn NoiseSource,
) -> Result<LatentAssignment> {
    let c = model.config();
    let z = c.z_size;
    let z1 = noise.standard_normal(c.n1 * z);
    let t1 = Tensor::<T>::from_f64(c.n1, z, &z1);
    let p2 = model.prior_params(params, 2, &[&t1])?;
    let z2 = draw_all(&p2, noise);
    let t2 = Tensor::<T>::from_f64(c.n2, z, &z2);
    let p3 = model.prior_params(params, 3, &[&t1, &t2])?;
    let z3 = draw_all(&p3, noise);
    let values = [z1, z2, z3].concat();
    LatentAssignment::new(c.counts(), z, values, vec![Provenance::PriorSampled; c.total_lvs()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    Mean,
    Sample,
}

/// Posterior means, or reparameterized draws, of a sentence.
pub fn encode_sentence_latents<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    x: &TokenSequence,
    mode: EncodeMode,
    noise: &mut dyn NoiseSource,
) -> Result<LatentAssignment> {
    let c = model.config();
    let (h, _) = match mode {
        EncodeMode::Mean => model.infer_posteriors(params, x, &mut ZeroNoise)?,
        EncodeMode::Sample => model.infer_posteriors(params, x, noise)?,
    };
    let values = h
        .levels
        .iter()
        .flat_map(|l| match mode {
            EncodeMode::Mean => l.posterior.means.to_f64_vec(),
            EncodeMode::Sample => l.values.to_f64_vec(),
        })
        .collect();
    LatentAssignment::new(c.counts(), c.z_size, values, vec![Provenance::PosteriorEncoded; c.total_lvs()])
}

/// Priors of levels 2 and 3 given a base assignment's shallower values.
#[derive(Clone, Debug)]
pub struct ConditionalPriors<T> {
    pub level2: GaussianParams<T>,
    pub level3: GaussianParams<T>,
}

pub fn conditional_priors<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    base: &LatentAssignment,
) -> Result<ConditionalPriors<T>> {
    base.check(model.config())?;
    let [t1, t2, _] = base.level_tensors::<T>();
    Ok(ConditionalPriors {
        level2: model.prior_params(params, 2, &[&t1])?,
        level3: model.prior_params(params, 3, &[&t1, &t2])?,
    })
}

/// Redraw one LV from its conditional prior given `priors` (computed from
/// the base). Every other LV is left untouched.
pub fn resample_with_priors<T: Scalar>(
    base: &LatentAssignment,
    priors: &ConditionalPriors<T>,
    lv: usize,
    noise: &mut dyn NoiseSource,
) -> Result<LatentAssignment> {
    let (k, i) = base.locate(lv)?;
    let eps = noise.standard_normal(base.z_size);
    let value = match k {
        0 => eps,
        1 => draw(&priors.level2, i, &eps),
        _ => draw(&priors.level3, i, &eps),
    };
    let mut out = base.clone();
    out.lv_mut(lv).copy_from_slice(&value);
    out.provenance[lv] = Provenance::Resampled;
    Ok(out)
}

/// Redraw LV `lv` from its conditional prior. With `repropagate`, every
/// level deeper than the LV's own is then redrawn from its prior given the
/// updated values.
pub fn resample_single_lv<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    base: &LatentAssignment,
    lv: usize,
    noise: &mut dyn NoiseSource,
    repropagate: bool,
) -> Result<LatentAssignment> {
    base.check(model.config())?;
    let (k, i) = base.locate(lv)?;
    let [t1, t2, _] = base.level_tensors::<T>();
    let eps = noise.standard_normal(base.z_size);
    let value = match k {
        0 => eps,
        1 => draw(&model.prior_params(params, 2, &[&t1])?, i, &eps),
        _ => draw(&model.prior_params(params, 3, &[&t1, &t2])?, i, &eps),
    };
    let mut out = base.clone();
    out.lv_mut(lv).copy_from_slice(&value);
    out.provenance[lv] = Provenance::Resampled;
    if repropagate && k < 2 {
        let z = out.z_size;
        let t1 = out.level_tensor::<T>(0);
        if k == 0 {
            let p2 = model.prior_params(params, 2, &[&t1])?;
            let v2 = draw_all(&p2, noise);
            let s = out.level_start(1) * z;
            out.values[s..s + v2.len()].copy_from_slice(&v2);
        }
        let t2 = out.level_tensor::<T>(1);
        let p3 = model.prior_params(params, 3, &[&t1, &t2])?;
        let v3 = draw_all(&p3, noise);
        let s = out.level_start(2) * z;
        out.values[s..s + v3.len()].copy_from_slice(&v3);
        let from = out.level_start(k + 1);
        for p in &mut out.provenance[from..] {
            *p = Provenance::Resampled;
        }
    }
    Ok(out)
}

/// Exchange the value of one LV between two assignments.
pub fn swap_lv(a: &LatentAssignment, b: &LatentAssignment, lv: usize) -> Result<(LatentAssignment, LatentAssignment)> {
    if a.levels != b.levels || a.z_size != b.z_size {
        return Err(Error::Domain("swapped assignments must share a layout".into()));
    }
    a.check_lv(lv)?;
    let (mut a2, mut b2) = (a.clone(), b.clone());
    a2.lv_mut(lv).copy_from_slice(b.lv(lv));
    b2.lv_mut(lv).copy_from_slice(a.lv(lv));
    if a.lv(lv) != b.lv(lv) {
        a2.provenance[lv] = Provenance::Swapped;
        b2.provenance[lv] = Provenance::Swapped;
    }
    Ok((a2, b2))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub tokens: TokenSequence,
    /// No EOS was produced before `max_len`; one was appended.
    pub truncated: bool,
}

/// How the next token is chosen from the logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Ancestral { temperature: f64 },
}

fn pick_greedy<T: Scalar>(row: &[T]) -> u32 {
    let mut best = None;
    for (i, &v) in row.iter().enumerate() {
        if i as u32 == PAD || i as u32 == BOS {
            continue;
        }
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(EOS, |(i, _)| i as u32)
}

fn pick_sampled<T: Scalar, R: Rng + ?Sized>(row: &[T], temperature: f64, rng: &mut R) -> u32 {
    let allowed = |i: usize| i as u32 != PAD && i as u32 != BOS;
    let max = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, v)| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, v)| if allowed(i) { ((v.to_f64() - max) / temperature).exp() } else { 0.0 })
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(d) => d.sample(rng) as u32,
        Err(_) => pick_greedy(row),
    }
}

/// Decode many assignments in lockstep. Each sequence stops at EOS or is
/// closed with EOS (and flagged) when it reaches `max_len`.
pub fn generate_batch<T: Scalar, R: Rng + ?Sized>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    latents: &[&LatentAssignment],
    max_len: usize,
    decoding: Decoding,
    rng: &mut R,
) -> Result<Vec<Generated>> {
    let c = model.config();
    let max_len = max_len.min(c.max_len);
    if max_len < 2 {
        return Err(Error::Domain(format!("max_len {max_len} leaves no room for BOS and EOS")));
    }
    if let Decoding::Ancestral { temperature } = decoding {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!("temperature {temperature} must be nonnegative")));
        }
    }
    for a in latents {
        a.check(c)?;
    }
    let batch = latents.len();
    if batch == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::inference(params);
    let per_level: [Tensor<T>; 3] = std::array::from_fn(|k| {
        let rows: Vec<f64> = latents.iter().flat_map(|a| a.level_tensor::<f64>(k).into_data()).collect();
        Tensor::from_f64(batch * c.counts()[k], c.z_size, &rows)
    });
    let vars = per_level.map(|t| g.constant(t));
    let source = model.identify_g(&mut g, vars, batch);
    let memory = model.encode_source_g(&mut g, source, batch);
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; batch];
    let mut done = vec![false; batch];
    let mut truncated = vec![false; batch];
    while done.iter().any(|d| !d) {
        let len = seqs[0].len();
        if len + 1 >= max_len {
            for b in 0..batch {
                if !done[b] {
                    seqs[b].push(EOS);
                    truncated[b] = true;
                    done[b] = true;
                }
            }
            break;
        }
        let prefixes: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = model.decode_with_memory_g(&mut g, memory, &prefixes)?;
        let lv = g.value(logits);
        let mut next = Vec::with_capacity(batch);
        for b in 0..batch {
            if done[b] {
                next.push(PAD);
                continue;
            }
            let row = lv.row(b * len + len - 1);
            let tok = match decoding {
                Decoding::Greedy => pick_greedy(row),
                Decoding::Ancestral { temperature } if temperature == 0.0 => pick_greedy(row),
                Decoding::Ancestral { temperature } => pick_sampled(row, temperature, rng),
            };
            next.push(tok);
        }
        for b in 0..batch {
            if !done[b] {
                seqs[b].push(next[b]);
                done[b] = next[b] == EOS;
            } else {
                seqs[b].push(PAD);
            }
        }
    }
    seqs.into_iter()
        .zip(truncated)
        .map(|(mut s, t)| {
            if let Some(end) = s.iter().position(|&i| i == EOS) {
                s.truncate(end + 1);
            }
            Ok(Generated {
                tokens: TokenSequence::new(s)?,
                truncated: t,
            })
        })
        .collect()
}

pub fn greedy_generate<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    latents: &LatentAssignment,
    max_len: usize,
) -> Result<Generated> {
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let mut out = generate_batch(model, params, &[latents], max_len, Decoding::Greedy, &mut unused)?;
    Ok(out.remove(0))
}

pub fn ancestral_generate<T: Scalar, R: Rng + ?Sized>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    latents: &LatentAssignment,
    max_len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Generated> {
    let mut out = generate_batch(model, params, &[latents], max_len, Decoding::Ancestral { temperature }, rng)?;
    Ok(out.remove(0))
}
