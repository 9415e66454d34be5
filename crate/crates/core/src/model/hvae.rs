use crate::autograd::{Graph, Var};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

use super::attention::{AttentionRecord, LevelAttention};
use super::layers::{
    positional_encoding, DecoderStack, EncoderStack, Init, LatentProjection, Linear, QueryNetwork,
};
use super::{GaussianParams, LatentHierarchy, LatentLevel, ModelConfig, NoiseSource};

/// Parameter handles of the whole model. Inference-network parameters live
/// under `inf.`, generative ones under `gen.`.
#[derive(Clone, Debug)]
pub struct HierarchicalVae {
    config: ModelConfig,
    inf_embed: crate::params::ParamId,
    encoders: [EncoderStack; 3],
    posteriors: [QueryNetwork; 3],
    priors: [QueryNetwork; 2],
    dec_embed: crate::params::ParamId,
    ident: LatentProjection,
    src: EncoderStack,
    tgt: DecoderStack,
    out: Linear,
}

/// Graph nodes of the posterior pass over a packed batch. Latent tensors are
/// example-major: rows `b·n_k .. (b+1)·n_k` belong to example `b`.
#[derive(Clone, Debug)]
pub struct PosteriorGraph {
    pub batch: usize,
    pub token_lens: Vec<usize>,
    pub means: [Var; 3],
    pub stds: [Var; 3],
    pub values: [Var; 3],
    /// Cross-attention node of every query-decoder layer, per level.
    pub cross_attention: [Vec<Var>; 3],
}

/// Per-example loss ingredients, each `[batch, 1]`.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub recon: Var,
    pub kl: [Var; 3],
    /// Predicted tokens per example (sequence length minus BOS).
    pub token_counts: Vec<usize>,
    pub posterior: PosteriorGraph,
    pub prior_means: [Var; 2],
    pub prior_stds: [Var; 2],
}

/// Reassemble example-major blocks from several packed tensors: the output
/// holds, for each example in turn, its block from every part in order.
fn interleave<T: Scalar>(g: &mut Graph<T>, parts: &[(Var, Vec<usize>)]) -> (Var, Vec<usize>) {
    let batch = parts[0].1.len();
    let mut bases = Vec::with_capacity(parts.len());
    let mut starts: Vec<Vec<usize>> = Vec::with_capacity(parts.len());
    let mut base = 0;
    for (_, segs) in parts {
        assert_eq!(segs.len(), batch);
        bases.push(base);
        let mut acc = 0;
        starts.push(
            segs.iter()
                .map(|&l| {
                    let s = acc;
                    acc += l;
                    s
                })
                .collect(),
        );
        base += acc;
    }
    let mut idx = Vec::with_capacity(base);
    let mut segs = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut len = 0;
        for (p, (_, s)) in parts.iter().enumerate() {
            let start = bases[p] + starts[p][b];
            idx.extend(start..start + s[b]);
            len += s[b];
        }
        segs.push(len);
    }
    let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
    let cat = if vars.len() == 1 { vars[0] } else { g.concat_rows(&vars) };
    (g.select_rows(cat, idx), segs)
}

impl HierarchicalVae {
    pub fn build<T: Scalar>(config: &ModelConfig) -> Result<(Self, ParameterStore<T>)> {
        config.validate()?;
        let c = config;
        let (d, h, z) = (c.d_model, c.heads, c.z_size);
        let [n1, n2, n3] = c.counts();
        let mut store = ParameterStore::new();
        let mut init = Init::new(&mut store, c.seed, c.init_std);
        let inf_embed = init.weight("inf.embed", c.vocab_size, d)?;
        let encoders = [
            EncoderStack::new(&mut init, "inf.enc1", c.enc_layers, d, h)?,
            EncoderStack::new(&mut init, "inf.enc2", c.enc_layers, d, h)?,
            EncoderStack::new(&mut init, "inf.enc3", c.enc_layers, d, h)?,
        ];
        let posteriors = [
            QueryNetwork::new(&mut init, "inf.post1", n1, n2 + n3, c.dec_layers, d, h, z)?,
            QueryNetwork::new(&mut init, "inf.post2", n2, n3, c.dec_layers, d, h, z)?,
            QueryNetwork::new(&mut init, "inf.post3", n3, 0, c.dec_layers, d, h, z)?,
        ];
        let priors = [
            QueryNetwork::new(&mut init, "gen.prior2", n2, n1, c.dec_layers, d, h, z)?,
            QueryNetwork::new(&mut init, "gen.prior3", n3, n1 + n2, c.dec_layers, d, h, z)?,
        ];
        let ident = LatentProjection::new(&mut init, "gen.dec.ident", n1 + n2 + n3, d, z)?;
        let src = EncoderStack::new(&mut init, "gen.dec.src", c.dec_layers, d, h)?;
        let dec_embed = init.weight("gen.dec.embed", c.vocab_size, d)?;
        let tgt = DecoderStack::new(&mut init, "gen.dec.tgt", c.dec_layers, d, h)?;
        let out = Linear::new(&mut init, "gen.dec.out", d, c.vocab_size)?;
        Ok((
            Self {
                config: c.clone(),
                inf_embed,
                encoders,
                posteriors,
                priors,
                dec_embed,
                ident,
                src,
                tgt,
                out,
            },
            store,
        ))
    }

    /// Handles for an already populated store (e.g. from a checkpoint).
    /// Fails if any path or shape disagrees with the configuration.
    pub fn for_store<T: Scalar>(config: &ModelConfig, store: &ParameterStore<T>) -> Result<Self> {
        let (model, fresh) = Self::build::<T>(config)?;
        if fresh.len() != store.len() {
            return Err(Error::Corrupt(format!(
                "store holds {} tensors, configuration needs {}",
                store.len(),
                fresh.len()
            )));
        }
        for (id, path, t) in fresh.iter() {
            match store.by_path(path) {
                Some(other) if store.id(path) == Some(id) && other.shape() == t.shape() => {}
                _ => return Err(Error::Corrupt(format!("parameter {path} missing or misshapen"))),
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Scaled token embedding plus positional encoding for packed segments.
    fn embed<T: Scalar>(&self, g: &mut Graph<T>, table: crate::params::ParamId, seqs: &[&[u32]]) -> Var {
        let d = self.config.d_model;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let segs: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let w = g.param(table);
        let e = g.select_rows(w, ids);
        let e = g.scale(e, T::from_f64((d as f64).sqrt()));
        let pe = g.constant(positional_encoding(&segs, d));
        g.add(e, pe)
    }

    /// Level-`level` token encoding of a packed batch.
    pub fn encode_g<T: Scalar>(&self, g: &mut Graph<T>, seqs: &[&[u32]], level: usize) -> Result<Var> {
        if !(1..=3).contains(&level) {
            return Err(Error::Index {
                what: "level",
                index: level,
                limit: 4,
            });
        }
        for s in seqs {
            self.check_tokens(s)?;
        }
        let segs: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let x = self.embed(g, self.inf_embed, seqs);
        Ok(self.encoders[level - 1].forward(g, x, &segs))
    }

    /// Posterior pass z3 → z2 → z1. Noise is drawn in that order, `n_k·z`
    /// values per example and level.
    pub fn infer_g<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        seqs: &[&[u32]],
        noise: &mut dyn NoiseSource,
    ) -> Result<PosteriorGraph> {
        let batch = seqs.len();
        let token_lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let counts = self.config.counts();
        let z = self.config.z_size;
        let mut means = [None; 3];
        let mut stds = [None; 3];
        let mut values: [Option<Var>; 3] = [None; 3];
        let mut cross: [Vec<Var>; 3] = Default::default();
        for level in [3usize, 2, 1] {
            let k = level - 1;
            let h = self.encode_g(g, seqs, level)?;
            let net = &self.posteriors[k];
            let mut parts = vec![(h, token_lens.clone())];
            if let Some(cond) = &net.cond {
                let deeper: Vec<(Var, Vec<usize>)> = (level..3)
                    .map(|j| (values[j].expect("deeper level sampled"), vec![counts[j]; batch]))
                    .collect();
                let (cv, _) = interleave(g, &deeper);
                let slots = cond.forward(g, cv, batch);
                parts.push((slots, vec![cond.slots(); batch]));
            }
            let (memory, mem_segs) = interleave(g, &parts);
            let outq = net.forward(g, batch, memory, &mem_segs);
            let eps = noise.standard_normal(batch * counts[k] * z);
            let eps = g.constant(Tensor::from_f64(batch * counts[k], z, &eps));
            let spread = g.mul(outq.std, eps);
            values[k] = Some(g.add(outq.mean, spread));
            means[k] = Some(outq.mean);
            stds[k] = Some(outq.std);
            cross[k] = outq.cross_attention;
        }
        Ok(PosteriorGraph {
            batch,
            token_lens,
            means: means.map(Option::unwrap),
            stds: stds.map(Option::unwrap),
            values: values.map(Option::unwrap),
            cross_attention: cross,
        })
    }

    /// Prior of level 2 or 3 given the shallower levels' values, each an
    /// example-major `[batch·n_j, z]` node. Returns `(means, stds)`.
    pub fn prior_g<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        level: usize,
        conditioned: &[Var],
        batch: usize,
    ) -> Result<(Var, Var)> {
        let counts = self.config.counts();
        if !(2..=3).contains(&level) {
            return Err(Error::Domain(format!(
                "level {level} has no prior network; the level-1 prior is the standard normal"
            )));
        }
        if conditioned.len() != level - 1 {
            return Err(Error::Domain(format!(
                "level-{level} prior conditions on {} levels, got {}",
                level - 1,
                conditioned.len()
            )));
        }
        for (j, &v) in conditioned.iter().enumerate() {
            let want = [batch * counts[j], self.config.z_size];
            if g.value(v).shape() != want {
                return Err(Error::Domain(format!(
                    "conditioning level {} has shape {:?}, expected {want:?}",
                    j + 1,
                    g.value(v).shape()
                )));
            }
        }
        let parts: Vec<(Var, Vec<usize>)> = conditioned
            .iter()
            .enumerate()
            .map(|(j, &v)| (v, vec![counts[j]; batch]))
            .collect();
        let (cv, _) = interleave(g, &parts);
        let net = &self.priors[level - 2];
        let cond = net.cond.as_ref().expect("prior networks are conditioned");
        let memory = cond.forward(g, cv, batch);
        let outq = net.forward(g, batch, memory, &vec![cond.slots(); batch]);
        Ok((outq.mean, outq.std))
    }

    /// Decoder source rows for example-major latent values of all levels.
    pub fn identify_g<T: Scalar>(&self, g: &mut Graph<T>, values: [Var; 3], batch: usize) -> Var {
        let counts = self.config.counts();
        let parts: Vec<(Var, Vec<usize>)> = (0..3).map(|k| (values[k], vec![counts[k]; batch])).collect();
        let (cv, _) = interleave(g, &parts);
        self.ident.forward(g, cv, batch)
    }

    /// Bidirectional encoding of identified latents (`[batch·N, d]`).
    pub fn encode_source_g<T: Scalar>(&self, g: &mut Graph<T>, source: Var, batch: usize) -> Var {
        let n = self.config.total_lvs();
        self.src.forward(g, source, &vec![n; batch])
    }

    /// Causal next-token logits for packed target prefixes against an
    /// encoded source memory.
    pub fn decode_with_memory_g<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        memory: Var,
        prefixes: &[&[u32]],
    ) -> Result<Var> {
        for p in prefixes {
            self.check_tokens(p)?;
        }
        let n = self.config.total_lvs();
        let segs: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let x = self.embed(g, self.dec_embed, prefixes);
        let (h, _) = self.tgt.forward(g, x, &segs, memory, &vec![n; prefixes.len()], true);
        Ok(self.out.forward(g, h))
    }

    /// Full ELBO ingredients for a batch with one reparameterized sample.
    pub fn elbo_terms_g<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        batch: &[&TokenSequence],
        noise: &mut dyn NoiseSource,
    ) -> Result<ElboTerms> {
        let seqs: Vec<&[u32]> = batch.iter().map(|s| s.ids()).collect();
        let b = seqs.len();
        let counts = self.config.counts();
        let post = self.infer_g(g, &seqs, noise)?;
        let [v1, v2, v3] = post.values;
        let (pm2, ps2) = self.prior_g(g, 2, &[v1], b)?;
        let (pm3, ps3) = self.prior_g(g, 3, &[v1, v2], b)?;
        let kl1 = g.kl_diag(post.means[0], post.stds[0], None);
        let kl2 = g.kl_diag(post.means[1], post.stds[1], Some((pm2, ps2)));
        let kl3 = g.kl_diag(post.means[2], post.stds[2], Some((pm3, ps3)));
        let kl = [
            g.segment_sum(kl1, &vec![counts[0]; b]),
            g.segment_sum(kl2, &vec![counts[1]; b]),
            g.segment_sum(kl3, &vec![counts[2]; b]),
        ];
        let source = self.identify_g(g, [v1, v2, v3], b);
        let memory = self.encode_source_g(g, source, b);
        let prefixes: Vec<&[u32]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
        let logits = self.decode_with_memory_g(g, memory, &prefixes)?;
        let targets: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s[1..].iter().map(|&t| t as usize))
            .collect();
        let token_counts: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let recon = g.cross_entropy(logits, &targets, &token_counts);
        Ok(ElboTerms {
            recon,
            kl,
            token_counts,
            posterior: post,
            prior_means: [pm2, pm3],
            prior_stds: [ps2, ps3],
        })
    }

    // Single-example conveniences over the graph functions.

    pub fn encode_tokens<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &TokenSequence,
        level: usize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference(params);
        let h = self.encode_g(&mut g, &[x.ids()], level)?;
        Ok(g.value(h).clone())
    }

    /// Posterior side of the hierarchy (priors left empty) and the
    /// cross-attention of every posterior query decoder.
    pub fn infer_posteriors<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        x: &TokenSequence,
        noise: &mut dyn NoiseSource,
    ) -> Result<(LatentHierarchy<T>, AttentionRecord)> {
        let mut g = Graph::inference(params);
        let post = self.infer_g(&mut g, &[x.ids()], noise)?;
        let level = |k: usize| LatentLevel {
            posterior: GaussianParams {
                means: g.value(post.means[k]).clone(),
                stds: g.value(post.stds[k]).clone(),
            },
            prior: None,
            values: g.value(post.values[k]).clone(),
        };
        let hierarchy = LatentHierarchy {
            levels: [level(0), level(1), level(2)],
        };
        let record = self.attention_record(&g, &post, 0);
        Ok((hierarchy, record))
    }

    /// Cross-attention weights of example `b` of a posterior pass.
    pub fn attention_record<T: Scalar>(&self, g: &Graph<T>, post: &PosteriorGraph, b: usize) -> AttentionRecord {
        let heads = self.config.heads;
        let tokens = post.token_lens[b];
        let levels = std::array::from_fn(|k| {
            let slots = self.posteriors[k].cond.as_ref().map_or(0, |c| c.slots());
            let layers = post.cross_attention[k]
                .iter()
                .map(|&node| {
                    (0..heads)
                        .map(|h| {
                            let (lq, lk, p) = g.attention_probs(node, b, h);
                            Tensor::from_vec(lq, lk, p.iter().map(|v| v.to_f64()).collect())
                        })
                        .collect()
                })
                .collect();
            LevelAttention { tokens, slots, layers }
        });
        AttentionRecord { levels }
    }

    /// Fill in the priors conditioned on the hierarchy's current values.
    pub fn attach_priors<T: Scalar>(&self, params: &ParameterStore<T>, h: &mut LatentHierarchy<T>) -> Result<()> {
        h.levels[0].prior = Some(GaussianParams::standard(self.config.n1, self.config.z_size));
        let z1 = h.levels[0].values.clone();
        let z2 = h.levels[1].values.clone();
        h.levels[1].prior = Some(self.prior_params(params, 2, &[&z1])?);
        h.levels[2].prior = Some(self.prior_params(params, 3, &[&z1, &z2])?);
        Ok(())
    }

    /// Prior of level 2 (given z1) or level 3 (given z1 and z2).
    pub fn prior_params<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        level: usize,
        conditioned: &[&Tensor<T>],
    ) -> Result<GaussianParams<T>> {
        let mut g = Graph::inference(params);
        let vars: Vec<Var> = conditioned.iter().map(|t| g.constant((*t).clone())).collect();
        let (m, s) = self.prior_g(&mut g, level, &vars, 1)?;
        Ok(GaussianParams {
            means: g.value(m).clone(),
            stds: g.value(s).clone(),
        })
    }

    /// Decoder source rows `[n1+n2+n3, d_model]` in global LV order.
    pub fn identify_latents<T: Scalar>(&self, params: &ParameterStore<T>, values: [&Tensor<T>; 3]) -> Result<Tensor<T>> {
        self.check_values(values)?;
        let mut g = Graph::inference(params);
        let vars = values.map(|t| g.constant(t.clone()));
        let s = self.identify_g(&mut g, vars, 1);
        Ok(g.value(s).clone())
    }

    fn check_values<T: Scalar>(&self, values: [&Tensor<T>; 3]) -> Result<()> {
        let counts = self.config.counts();
        for (k, t) in values.iter().enumerate() {
            if t.shape() != [counts[k], self.config.z_size] {
                return Err(Error::Domain(format!(
                    "level-{} values have shape {:?}, expected {:?}",
                    k + 1,
                    t.shape(),
                    [counts[k], self.config.z_size]
                )));
            }
        }
        Ok(())
    }

    /// Next-token logits `[len(prefix), vocab]` given identified latents.
    pub fn decode_logits<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        source: &Tensor<T>,
        prefix: &[u32],
    ) -> Result<Tensor<T>> {
        let want = [self.config.total_lvs(), self.config.d_model];
        if source.shape() != want {
            return Err(Error::Domain(format!(
                "source has shape {:?}, expected {want:?}",
                source.shape()
            )));
        }
        if prefix.first() != Some(&crate::corpus::BOS) {
            return Err(Error::Domain("decoder targets must begin with BOS".into()));
        }
        let mut g = Graph::inference(params);
        let s = g.constant(source.clone());
        let memory = self.encode_source_g(&mut g, s, 1);
        let logits = self.decode_with_memory_g(&mut g, memory, &[prefix])?;
        Ok(g.value(logits).clone())
    }

    /// Logits for latent values directly (identify, then decode).
    pub fn decode_values<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        values: [&Tensor<T>; 3],
        prefix: &[u32],
    ) -> Result<Tensor<T>> {
        let source = self.identify_latents(params, values)?;
        self.decode_logits(params, &source, prefix)
    }

    pub fn ident_param(&self) -> crate::params::ParamId {
        self.ident.id_param()
    }
}
