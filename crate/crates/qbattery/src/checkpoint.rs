//! Versioned agent checkpoints. Every float array is stored as base64 of its
//! little-endian bytes, so a save/load cycle is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use qbattery_core::approx::{AdamState, Mlp};
use qbattery_core::hilbert::ModelConfig;
use qbattery_core::rl::{AgentState, EpisodeSpec, RngState, SacHyperparams};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

pub const FORMAT: &str = "qbattery-agent";
pub const VERSION: u32 = 1;

pub fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("{} bytes is not a whole number of f64", bytes.len()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDoc {
    pub widths: Vec<usize>,
    pub params: String,
}

impl NetDoc {
    pub fn from_mlp(m: &Mlp) -> Self {
        NetDoc { widths: m.widths().to_vec(), params: encode_f64s(m.params()) }
    }

    pub fn to_mlp(&self) -> std::result::Result<Mlp, String> {
        Mlp::from_params(&self.widths, decode_f64s(&self.params)?).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamDoc {
    /// `lr, beta1, beta2, eps`.
    pub hyper: String,
    pub step: u64,
    pub m: String,
    pub v: String,
}

impl AdamDoc {
    pub fn from_adam(a: &AdamState) -> Self {
        AdamDoc { hyper: encode_f64s(&[a.lr, a.beta1, a.beta2, a.eps]), step: a.step, m: encode_f64s(&a.m), v: encode_f64s(&a.v) }
    }

    pub fn to_adam(&self) -> std::result::Result<AdamState, String> {
        let h = decode_f64s(&self.hyper)?;
        if h.len() != 4 {
            return Err("Adam hyperparameters need four values".into());
        }
        let (m, v) = (decode_f64s(&self.m)?, decode_f64s(&self.v)?);
        if m.len() != v.len() {
            return Err("Adam moment lengths differ".into());
        }
        Ok(AdamState { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step: self.step, m, v })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngDoc {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128`.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDoc {
    pub policy: NetDoc,
    pub q1: NetDoc,
    pub q2: NetDoc,
    pub q1_target: NetDoc,
    pub q2_target: NetDoc,
    pub log_alpha: String,
    pub policy_opt: AdamDoc,
    pub q1_opt: AdamDoc,
    pub q2_opt: AdamDoc,
    pub alpha_opt: AdamDoc,
    pub step: u64,
    pub updates: u64,
    pub rng: RngDoc,
}

/// Agent plus the run metadata needed to resume or evaluate it; the replay
/// buffer is not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub episode: EpisodeSpec,
    pub sac: SacHyperparams,
    pub obs_dim: usize,
    pub episodes: u64,
    pub agent: AgentDoc,
    /// Policy behind the best greedy evaluation so far, and its episode.
    pub best_policy: Option<NetDoc>,
    pub best_episode: Option<u64>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture(
        agent: &AgentState,
        seed: u64,
        model: &ModelConfig,
        episode: &EpisodeSpec,
        sac: &SacHyperparams,
        episodes: u64,
        best: Option<(u64, &Mlp)>,
    ) -> Self {
        let rng = agent.rng_state();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            seed,
            model: model.clone(),
            episode: episode.clone(),
            sac: sac.clone(),
            obs_dim: agent.obs_dim(),
            episodes,
            agent: AgentDoc {
                policy: NetDoc::from_mlp(&agent.policy),
                q1: NetDoc::from_mlp(&agent.q1),
                q2: NetDoc::from_mlp(&agent.q2),
                q1_target: NetDoc::from_mlp(&agent.q1_target),
                q2_target: NetDoc::from_mlp(&agent.q2_target),
                log_alpha: encode_f64s(&[agent.log_alpha]),
                policy_opt: AdamDoc::from_adam(&agent.policy_opt),
                q1_opt: AdamDoc::from_adam(&agent.q1_opt),
                q2_opt: AdamDoc::from_adam(&agent.q2_opt),
                alpha_opt: AdamDoc::from_adam(&agent.alpha_opt),
                step: agent.step,
                updates: agent.updates,
                rng: RngDoc { seed: STANDARD.encode(rng.seed), stream: rng.stream, word_pos: rng.word_pos.to_string() },
            },
            best_policy: best.map(|(_, m)| NetDoc::from_mlp(m)),
            best_episode: best.map(|(e, _)| e),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::output::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::checkpoint(path, e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| RunError::checkpoint(path, e.to_string()))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(RunError::checkpoint(
                path,
                format!("unsupported format {} v{} (expected {FORMAT} v{VERSION})", ck.format, ck.version),
            ));
        }
        Ok(ck)
    }

    /// Rebuild the agent; `hp` supplies the shapes it must match.
    pub fn restore_agent(&self, hp: &SacHyperparams, obs_dim: usize, path: &Path) -> Result<AgentState> {
        let bad = |r: String| RunError::checkpoint(path, r);
        if self.obs_dim != obs_dim {
            return Err(bad(format!("observation size {} does not match the configured model ({obs_dim})", self.obs_dim)));
        }
        let mut agent = AgentState::new(obs_dim, hp, 0).map_err(|e| bad(e.to_string()))?;
        let net = |doc: &NetDoc, like: &Mlp, name: &str| -> Result<Mlp> {
            let m = doc.to_mlp().map_err(|e| bad(format!("{name}: {e}")))?;
            if m.widths() != like.widths() {
                return Err(bad(format!("{name} widths {:?} do not match {:?}", m.widths(), like.widths())));
            }
            Ok(m)
        };
        let a = &self.agent;
        agent.policy = net(&a.policy, &agent.policy, "policy")?;
        agent.q1 = net(&a.q1, &agent.q1, "q1")?;
        agent.q2 = net(&a.q2, &agent.q2, "q2")?;
        agent.q1_target = net(&a.q1_target, &agent.q1, "q1_target")?;
        agent.q2_target = net(&a.q2_target, &agent.q2, "q2_target")?;
        let adam = |doc: &AdamDoc, n: usize, name: &str| -> Result<AdamState> {
            let s = doc.to_adam().map_err(|e| bad(format!("{name}: {e}")))?;
            if s.m.len() != n {
                return Err(bad(format!("{name} holds {} moments for {n} parameters", s.m.len())));
            }
            Ok(s)
        };
        agent.policy_opt = adam(&a.policy_opt, agent.policy.params().len(), "policy_opt")?;
        agent.q1_opt = adam(&a.q1_opt, agent.q1.params().len(), "q1_opt")?;
        agent.q2_opt = adam(&a.q2_opt, agent.q2.params().len(), "q2_opt")?;
        agent.alpha_opt = adam(&a.alpha_opt, 1, "alpha_opt")?;
        let la = decode_f64s(&a.log_alpha).map_err(bad)?;
        if la.len() != 1 {
            return Err(bad("log_alpha must hold one value".into()));
        }
        agent.log_alpha = la[0];
        agent.step = a.step;
        agent.updates = a.updates;
        let seed: [u8; 32] = STANDARD
            .decode(&a.rng.seed)
            .map_err(|e| bad(e.to_string()))?
            .try_into()
            .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = a.rng.word_pos.parse().map_err(|_| bad("bad rng word position".into()))?;
        agent.set_rng_state(RngState { seed, stream: a.rng.stream, word_pos });
        Ok(agent)
    }

    pub fn best_policy(&self, path: &Path) -> Result<Option<(u64, Mlp)>> {
        match (&self.best_policy, self.best_episode) {
            (Some(doc), Some(ep)) => {
                Ok(Some((ep, doc.to_mlp().map_err(|e| RunError::checkpoint(path, format!("best_policy: {e}")))?)))
            }
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qbattery_core::hilbert::Spin;
    use rand::Rng;

    #[test]
    fn float_arrays_are_bit_exact() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e-310, f64::MAX, std::f64::consts::PI, f64::NEG_INFINITY];
        let back = decode_f64s(&encode_f64s(&v)).unwrap();
        assert!(v.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_f64s("AAAA").is_err());
    }

    #[test]
    fn agent_round_trip() {
        let hp = SacHyperparams { hidden: vec![8, 4], ..SacHyperparams::default() };
        let mut agent = AgentState::new(3, &hp, 42).unwrap();
        agent.log_alpha = -0.3;
        agent.step = 777;
        let _: u64 = agent.rng_mut().random();
        let model = ModelConfig::new(Spin::HALF, 2, 1.0);
        let ck = Checkpoint::capture(&agent, 42, &model, &EpisodeSpec::closed(), &hp, 5, Some((3, &agent.policy)));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert_eq!(loaded, ck);
        let mut back = loaded.restore_agent(&hp, 3, &p).unwrap();
        assert_eq!(back.policy, agent.policy);
        assert_eq!(back.q2_target, agent.q2_target);
        assert_eq!(back.log_alpha.to_bits(), agent.log_alpha.to_bits());
        assert_eq!(back.step, 777);
        assert_eq!(back.rng_mut().random::<u64>(), agent.rng_mut().random::<u64>());
        let err = loaded.restore_agent(&hp, 4, &p).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let other = SacHyperparams { hidden: vec![8, 5], ..hp };
        assert_eq!(loaded.restore_agent(&other, 3, &p).unwrap_err().exit_code(), 4);
    }
}
