use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub z_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Standard deviation of the truncated-normal weight initialization.
    pub init_std: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n1: 16,
            n2: 16,
            n3: 16,
            z_size: 8,
            d_model: 48,
            heads: 4,
            enc_layers: 2,
            dec_layers: 3,
            vocab_size: 0,
            max_len: DEFAULT_MAX_LEN,
            seed: 0,
            init_std: 0.02,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration worth running: used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n1: 2,
            n2: 2,
            n3: 2,
            z_size: 2,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            vocab_size,
            precision: Precision::F64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("n1", self.n1),
            ("n2", self.n2),
            ("n3", self.n3),
            ("z_size", self.z_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} is too short", self.max_len));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.n1, self.n2, self.n3]
    }

    pub fn total_lvs(&self) -> usize {
        self.n1 + self.n2 + self.n3
    }

    /// First global LV index of each level.
    pub fn level_offsets(&self) -> [usize; 3] {
        [0, self.n1, self.n1 + self.n2]
    }

    /// `(level 1..=3, index within the level)` of a global LV index.
    pub fn locate(&self, lv: usize) -> Result<(usize, usize)> {
        let [a, b, c] = self.counts();
        match lv {
            i if i < a => Ok((1, i)),
            i if i < a + b => Ok((2, i - a)),
            i if i < a + b + c => Ok((3, i - a - b)),
            _ => Err(Error::Index {
                what: "latent variable",
                index: lv,
                limit: a + b + c,
            }),
        }
    }
}
