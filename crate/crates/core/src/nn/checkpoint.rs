//! Structured-text checkpoints.
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every `f64` bit for bit. Non-finite values cannot be
//! represented and are refused on save.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::AdamW;
use super::ParamSet;

pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("parameter {0} holds a non-finite value")]
    NonFinite(String),
    #[error("unsupported checkpoint version {0:?}")]
    Version(String),
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<P, C> {
    pub v: String,
    pub config: C,
    pub params: P,
    #[serde(default = "none")]
    pub optimizer: Option<AdamW<P>>,
}

fn none<T>() -> Option<T> {
    None
}

impl<P, C> Checkpoint<P, C>
where
    P: ParamSet + Serialize + DeserializeOwned,
    C: Serialize + DeserializeOwned,
{
    pub fn new(config: C, params: P, optimizer: Option<AdamW<P>>) -> Self {
        Self {
            v: CHECKPOINT_VERSION.to_string(),
            config,
            params,
            optimizer,
        }
    }

    pub fn to_text(&self) -> Result<String, CheckpointError> {
        let mut sets = vec![("", &self.params)];
        if let Some(opt) = &self.optimizer {
            sets.push(("adam.m.", &opt.m));
            sets.push(("adam.v.", &opt.v));
        }
        for (prefix, set) in sets {
            for (name, t) in set.named() {
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(CheckpointError::NonFinite(format!("{prefix}{name}")));
                }
            }
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.v != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ck.v));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::AdamWConfig;
    use crate::nn::{GruCell, Mlp2};
    use rand::Rng;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Net {
        mlp: Mlp2,
        gru: GruCell,
    }

    impl ParamSet for Net {
        fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a [f64])>) {
            self.mlp.collect(&format!("{p}.mlp"), out);
            self.gru.collect(&format!("{p}.gru"), out);
        }
        fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut [f64])>) {
            self.mlp.collect_mut(&format!("{p}.mlp"), out);
            self.gru.collect_mut(&format!("{p}.gru"), out);
        }
    }

    fn random_net() -> Net {
        let mut rng = crate::rng::seeded(3);
        let mut n = Net {
            mlp: Mlp2::zeros(5, 4, 3),
            gru: GruCell::zeros(3, 3),
        };
        for (_, t) in n.named_mut() {
            // awkward magnitudes on purpose
            t.iter_mut()
                .for_each(|v| *v = rng.random::<f64>().powi(7) * 10f64.powi(rng.random_range(-30..30)));
        }
        n
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = random_net();
        let mut opt = AdamW::new(AdamWConfig::default(), &net);
        let mut p = net.clone();
        let mut g = net.clone();
        g.fill(1e-3);
        opt.step(&mut p, &g).unwrap();
        let ck = Checkpoint::new("cfg".to_string(), p, Some(opt));
        let back: Checkpoint<Net, String> = Checkpoint::from_text(&ck.to_text().unwrap()).unwrap();
        for ((_, a), (_, b)) in ck.params.named().into_iter().zip(back.params.named()) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(ck, back);
    }

    #[test]
    fn non_finite_and_version_errors() {
        let mut net = random_net();
        net.gru.b_r[1] = f64::NAN;
        let err = Checkpoint::new((), net, None).to_text().unwrap_err();
        assert!(err.to_string().contains("gru.b_r"), "{err}");
        let text = Checkpoint::new((), random_net(), None).to_text().unwrap().replace("\"v1\"", "\"v0\"");
        assert!(matches!(
            Checkpoint::<Net, ()>::from_text(&text),
            Err(CheckpointError::Version(_))
        ));
    }
}
