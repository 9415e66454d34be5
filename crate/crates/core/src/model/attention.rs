use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cross-attention of one posterior query decoder for a single sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAttention {
    /// Token positions (BOS and EOS included) at the start of every row.
    pub tokens: usize,
    /// Conditioned latent slots following the tokens.
    pub slots: usize,
    /// `layers[l][h]` is `[n_k, tokens + slots]`, row-stochastic.
    pub layers: Vec<Vec<Tensor<f64>>>,
}

impl LevelAttention {
    pub fn lvs(&self) -> usize {
        self.layers.first().and_then(|l| l.first()).map_or(0, |t| t.rows())
    }
}

/// Attention of every level, `levels[0]` is the z1 decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub levels: [LevelAttention; 3],
}

/// Attention of one LV over token positions, with all conditioned-latent
/// slots summed into `latent`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAttention {
    pub lv: usize,
    pub level: usize,
    pub layer: usize,
    pub tokens: Vec<f64>,
    pub latent: f64,
}

impl ExtractedAttention {
    pub fn total(&self) -> f64 {
        self.tokens.iter().sum::<f64>() + self.latent
    }
}

/// Head-averaged attention row of global LV `lv` at `layer` of its level.
pub fn extract_attention(record: &AttentionRecord, lv: usize, layer: usize) -> Result<ExtractedAttention> {
    let total: usize = record.levels.iter().map(LevelAttention::lvs).sum();
    let mut offset = 0;
    let mut found = None;
    for (k, level) in record.levels.iter().enumerate() {
        let n = level.lvs();
        if lv < offset + n {
            found = Some((k, lv - offset));
            break;
        }
        offset += n;
    }
    let (k, row) = found.ok_or(Error::Index {
        what: "latent variable",
        index: lv,
        limit: total,
    })?;
    let level = &record.levels[k];
    let heads = level.layers.get(layer).ok_or(Error::Index {
        what: "layer",
        index: layer,
        limit: level.layers.len(),
    })?;
    let width = level.tokens + level.slots;
    let mut avg = vec![0.0; width];
    for h in heads {
        if h.cols() != width {
            return Err(Error::Domain(format!(
                "attention matrix has {} columns, expected {width}",
                h.cols()
            )));
        }
        for (a, &v) in avg.iter_mut().zip(h.row(row)) {
            *a += v / heads.len() as f64;
        }
    }
    let latent = avg[level.tokens..].iter().sum();
    avg.truncate(level.tokens);
    Ok(ExtractedAttention {
        lv,
        level: k + 1,
        layer,
        tokens: avg,
        latent,
    })
}
