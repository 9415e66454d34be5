#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sentvae::autograd::Graph;
use sentvae::corpus::TokenSequence;
use sentvae::model::{HierarchicalVae, ModelConfig, NoiseSource, SeededNoise};
use sentvae::objective::{total_loss_g, LossBreakdown, ObjectiveVariant};
use sentvae::params::{GradStore, ParameterStore};

/// vocab 20, width 8, 2 heads, two LVs of size 2 per level, one layer each.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { seed, ..ModelConfig::tiny(20) }
}

/// Four LVs per level at the default width, as used for desk training.
pub fn small_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n1: 4,
        n2: 4,
        n3: 4,
        vocab_size,
        seed,
        ..ModelConfig::default()
    }
}

/// A sentence of `words` random non-reserved ids.
pub fn random_sentence(rng: &mut ChaCha8Rng, vocab_size: usize, words: usize) -> TokenSequence {
    let ids: Vec<u32> = (0..words).map(|_| rng.gen_range(4..vocab_size as u32)).collect();
    TokenSequence::from_word_ids(&ids).unwrap()
}

/// Batch objective and its analytic gradient. The noise is re-seeded on
/// every call so repeated evaluations see the same ε.
pub fn loss_and_grad(
    model: &HierarchicalVae,
    params: &ParameterStore<f64>,
    batch: &[&TokenSequence],
    alpha: f64,
    beta: f64,
    variant: ObjectiveVariant,
    noise_seed: u64,
) -> (f64, Vec<LossBreakdown>, GradStore<f64>) {
    let mut grads = GradStore::zeros_like(params);
    let mut g = Graph::new(params);
    let terms = model.elbo_terms_g(&mut g, batch, &mut SeededNoise::new(noise_seed)).unwrap();
    let (total, rows) = total_loss_g(&mut g, &terms, alpha, beta, variant).unwrap();
    let value = g.value(total).item();
    g.backward(total, &mut grads);
    (value, rows, grads)
}

pub fn loss_value(
    model: &HierarchicalVae,
    params: &ParameterStore<f64>,
    batch: &[&TokenSequence],
    alpha: f64,
    beta: f64,
    variant: ObjectiveVariant,
    noise_seed: u64,
) -> f64 {
    let mut g = Graph::inference(params);
    let terms = model.elbo_terms_g(&mut g, batch, &mut SeededNoise::new(noise_seed)).unwrap();
    let (total, _) = total_loss_g(&mut g, &terms, alpha, beta, variant).unwrap();
    g.value(total).item()
}

/// Gradients smaller than this are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `h`, over every scalar parameter.
pub fn max_gradcheck_error(
    model: &HierarchicalVae,
    params: &ParameterStore<f64>,
    batch: &[&TokenSequence],
    alpha: f64,
    beta: f64,
    variant: ObjectiveVariant,
    h: f64,
) -> (f64, String) {
    let (_, _, grads) = loss_and_grad(model, params, batch, alpha, beta, variant, 11);
    let mut probe = params.clone();
    let mut worst = (0.0, String::new());
    for id in params.ids() {
        let n = params.get(id).len();
        for i in 0..n {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = loss_value(model, &probe, batch, alpha, beta, variant, 11);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = loss_value(model, &probe, batch, alpha, beta, variant, 11);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[i];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(GRADCHECK_FLOOR);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: analytic {analytic:e}, numeric {numeric:e}", params.path(id)));
            }
        }
    }
    worst
}

/// ε ≡ c.
pub struct ConstNoise(pub f64);

impl NoiseSource for ConstNoise {
    fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        vec![self.0; n]
    }
}

/// Monte-Carlo estimate of KL(q || p) for diagonal Gaussians as the sample
/// mean of `log q(x) − log p(x)` with `x ~ q`, and its standard error.
pub fn monte_carlo_kl(qm: &[f64], qs: &[f64], pm: &[f64], ps: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    use rand_distr::StandardNormal;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut log_ratio = 0.0;
        for d in 0..qm.len() {
            let eps: f64 = rng.sample(StandardNormal);
            let x = qm[d] + qs[d] * eps;
            let zp = (x - pm[d]) / ps[d];
            log_ratio += (ps[d] / qs[d]).ln() - 0.5 * eps * eps + 0.5 * zp * zp;
        }
        sum += log_ratio;
        sum_sq += log_ratio * log_ratio;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Grammar sentences tokenized with a vocabulary built from them.
pub fn grammar_corpus(count: usize, seed: u64) -> (sentvae::corpus::Vocab, Vec<sentvae::corpus::TokenSequence>) {
    use sentvae::corpus::{generate_corpus, tokenize, GrammarSpec, Vocab, DEFAULT_MAX_LEN};
    let corpus = generate_corpus(&GrammarSpec::default_grammar(), count, seed, DEFAULT_MAX_LEN).unwrap();
    let vocab = Vocab::build(corpus.iter().map(|s| &s.tokens));
    let seqs = corpus.iter().map(|s| tokenize(&s.tokens, &vocab)).collect();
    (vocab, seqs)
}
