//! Self-describing model checkpoints.
//!
//! A checkpoint is one JSON document: vocabulary hash, hyperparameters,
//! frozen flag, combine mode, and every parameter tensor with its name and
//! shape. f64 values are printed in shortest round-trip form, so
//! load(save(m)) is bit-exact and rewriting the same model yields identical
//! bytes.

use crate::layers::Parameters;
use crate::models::{BaseModel, Combine, MoeModel, RmoeModel};
use crate::tensor::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(String),
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HyperDoc {
    n_events: usize,
    n_targets: usize,
    emb_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_experts: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expert_hidden: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    model_kind: String,
    vocab_hash: String,
    hyper: HyperDoc,
    frozen: bool,
    #[serde(default)]
    combine: Combine,
    tensors: Vec<TensorDoc>,
}

/// Any trained model the CLI can evaluate.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Base(BaseModel),
    Moe(MoeModel),
    Rmoe(RmoeModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Base(_) => "base",
            AnyModel::Moe(_) => "moe",
            AnyModel::Rmoe(_) => "rmoe",
        }
    }

    pub fn n_events(&self) -> usize {
        match self {
            AnyModel::Base(m) => m.emb.n_events(),
            AnyModel::Moe(m) => m.emb.n_events(),
            AnyModel::Rmoe(m) => m.base.emb.n_events(),
        }
    }

    pub fn n_targets(&self) -> usize {
        match self {
            AnyModel::Base(m) => m.n_targets(),
            AnyModel::Moe(m) => m.moe.n_targets(),
            AnyModel::Rmoe(m) => m.base.n_targets(),
        }
    }

    /// Per-step predictions, one vector over E′ per t = 1..T−1.
    pub fn predict(&self, seq: &crate::data::WindowedSequence) -> Vec<Vec<f64>> {
        match self {
            AnyModel::Base(m) => m.forward(seq),
            AnyModel::Moe(m) => m.predict(seq),
            AnyModel::Rmoe(m) => m.predict(seq),
        }
    }
}

/// A model paired with the hash of the vocabulary it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vocab_hash: u64,
    pub model: AnyModel,
}

fn collect_tensors<P: Parameters + ?Sized>(p: &P) -> Vec<TensorDoc> {
    let mut out = Vec::new();
    p.visit(&mut |name, (rows, cols), data| {
        out.push(TensorDoc {
            name: name.to_string(),
            rows,
            cols,
            data: data.to_vec(),
        });
    });
    out
}

fn fill_tensors<P: Parameters + ?Sized>(
    p: &mut P,
    tensors: Vec<TensorDoc>,
) -> Result<(), CheckpointError> {
    let mut map: BTreeMap<String, TensorDoc> = BTreeMap::new();
    for t in tensors {
        let expect = t
            .rows
            .checked_mul(t.cols)
            .ok_or_else(|| CheckpointError::Invalid(format!("tensor {} shape overflows", t.name)))?;
        if t.data.len() != expect {
            return Err(CheckpointError::Invalid(format!(
                "tensor {} has {} values but shape {}x{}",
                t.name,
                t.data.len(),
                t.rows,
                t.cols
            )));
        }
        if !t.data.iter().all(|v| v.is_finite()) {
            return Err(CheckpointError::Invalid(format!(
                "tensor {} has non-finite entries",
                t.name
            )));
        }
        if map.insert(t.name.clone(), t).is_some() {
            return Err(CheckpointError::Invalid("duplicate tensor name".into()));
        }
    }
    let mut err: Option<CheckpointError> = None;
    p.visit_mut(&mut |name, (rows, cols), data| {
        if err.is_some() {
            return;
        }
        match map.remove(name) {
            Some(t) if (t.rows, t.cols) == (rows, cols) => data.copy_from_slice(&t.data),
            Some(t) => {
                err = Some(CheckpointError::Invalid(format!(
                    "tensor {name} has shape {}x{}, expected {rows}x{cols}",
                    t.rows, t.cols
                )))
            }
            None => err = Some(CheckpointError::Invalid(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = map.keys().next() {
        return Err(CheckpointError::Invalid(format!("unexpected tensor {name}")));
    }
    Ok(())
}

pub fn checkpoint_to_json(ck: &Checkpoint) -> String {
    let doc = match &ck.model {
        AnyModel::Base(m) => CheckpointDoc {
            format_version: 1,
            model_kind: "base".into(),
            vocab_hash: format!("{:016x}", ck.vocab_hash),
            hyper: HyperDoc {
                n_events: m.emb.n_events(),
                n_targets: m.n_targets(),
                emb_dim: m.emb.dim(),
                hidden_dim: Some(m.gru.hidden_dim()),
                n_experts: None,
                expert_hidden: None,
            },
            frozen: false,
            combine: Combine::ProbSum,
            tensors: collect_tensors(m),
        },
        AnyModel::Moe(m) => CheckpointDoc {
            format_version: 1,
            model_kind: "moe".into(),
            vocab_hash: format!("{:016x}", ck.vocab_hash),
            hyper: HyperDoc {
                n_events: m.emb.n_events(),
                n_targets: m.moe.n_targets(),
                emb_dim: m.emb.dim(),
                hidden_dim: None,
                n_experts: Some(m.moe.n_experts()),
                expert_hidden: Some(m.moe.experts[0].gru.hidden_dim()),
            },
            frozen: false,
            combine: Combine::ProbSum,
            tensors: collect_tensors(m),
        },
        AnyModel::Rmoe(m) => CheckpointDoc {
            format_version: 1,
            model_kind: "rmoe".into(),
            vocab_hash: format!("{:016x}", ck.vocab_hash),
            hyper: HyperDoc {
                n_events: m.base.emb.n_events(),
                n_targets: m.base.n_targets(),
                emb_dim: m.base.emb.dim(),
                hidden_dim: Some(m.base.gru.hidden_dim()),
                n_experts: Some(m.moe.n_experts()),
                expert_hidden: Some(m.moe.experts[0].gru.hidden_dim()),
            },
            frozen: m.frozen,
            combine: m.combine,
            tensors: collect_tensors(m),
        },
    };
    serde_json::to_string(&doc).expect("checkpoint serializes")
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint, CheckpointError> {
    let doc: CheckpointDoc =
        serde_json::from_str(text).map_err(|e| CheckpointError::Parse(e.to_string()))?;
    if doc.format_version != 1 {
        return Err(CheckpointError::Invalid(format!(
            "unsupported format_version {}",
            doc.format_version
        )));
    }
    let vocab_hash = u64::from_str_radix(&doc.vocab_hash, 16)
        .map_err(|_| CheckpointError::Invalid(format!("bad vocab_hash {:?}", doc.vocab_hash)))?;
    let h = &doc.hyper;
    if h.n_events == 0 || h.n_targets == 0 || h.emb_dim == 0 {
        return Err(CheckpointError::Invalid("zero-sized model dimensions".into()));
    }
    let dim_guard = |name: &str, v: Option<usize>| -> Result<usize, CheckpointError> {
        match v {
            Some(x) if x > 0 => Ok(x),
            _ => Err(CheckpointError::Invalid(format!("missing or zero {name}"))),
        }
    };
    // Cap total parameter count so a hostile header cannot request huge
    // allocations before tensor validation runs.
    const BUDGET: usize = 1 << 26; // 64M f64 parameters
    let gru_params = |d: usize, input: usize| -> usize {
        3usize
            .saturating_mul(d.saturating_mul(input).saturating_add(d.saturating_mul(d)))
            .saturating_add(3 * d)
    };
    let d = h.hidden_dim.unwrap_or(1);
    let n = h.n_experts.unwrap_or(1);
    let dh = h.expert_hidden.unwrap_or(1);
    let base_count = h
        .n_events
        .saturating_mul(h.emb_dim)
        .saturating_add(gru_params(d, h.emb_dim))
        .saturating_add(h.n_targets.saturating_mul(d.saturating_add(1)));
    let expert_count = gru_params(dh, h.emb_dim)
        .saturating_add(h.n_targets.saturating_mul(dh.saturating_add(1)));
    let moe_count = n
        .saturating_mul(expert_count)
        .saturating_add(gru_params(dh, h.emb_dim))
        .saturating_add(n.saturating_mul(dh.saturating_add(1)));
    if base_count.saturating_add(moe_count) > BUDGET {
        return Err(CheckpointError::Invalid("model dimensions too large".into()));
    }

    let mut rng = Rng::new(0);
    let model = match doc.model_kind.as_str() {
        "base" => {
            let d = dim_guard("hidden_dim", h.hidden_dim)?;
            let mut m = BaseModel::new(h.n_events, h.n_targets, h.emb_dim, d, &mut rng);
            fill_tensors(&mut m, doc.tensors)?;
            AnyModel::Base(m)
        }
        "moe" => {
            let n = dim_guard("n_experts", h.n_experts)?;
            let dh = dim_guard("expert_hidden", h.expert_hidden)?;
            let mut m = MoeModel::new(h.n_events, h.n_targets, h.emb_dim, n, dh, &mut rng);
            fill_tensors(&mut m, doc.tensors)?;
            AnyModel::Moe(m)
        }
        "rmoe" => {
            let d = dim_guard("hidden_dim", h.hidden_dim)?;
            let n = dim_guard("n_experts", h.n_experts)?;
            let dh = dim_guard("expert_hidden", h.expert_hidden)?;
            let base = BaseModel::new(h.n_events, h.n_targets, h.emb_dim, d, &mut rng);
            let mut m = RmoeModel::new(base, n, dh, &mut rng);
            m.frozen = doc.frozen;
            m.combine = doc.combine;
            fill_tensors(&mut m, doc.tensors)?;
            AnyModel::Rmoe(m)
        }
        other => {
            return Err(CheckpointError::Invalid(format!(
                "unknown model_kind {other:?}"
            )))
        }
    };
    Ok(Checkpoint { vocab_hash, model })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_to_json(ck)).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::param_hash;

    fn bits<P: Parameters>(p: &P) -> Vec<u64> {
        p.flatten().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn base_roundtrip_bit_exact() {
        let mut rng = Rng::new(44);
        let m = BaseModel::new(6, 4, 3, 5, &mut rng);
        let ck = Checkpoint {
            vocab_hash: 0xdead_beef_0123_4567,
            model: AnyModel::Base(m.clone()),
        };
        let text = checkpoint_to_json(&ck);
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back.vocab_hash, ck.vocab_hash);
        match back.model {
            AnyModel::Base(b) => assert_eq!(bits(&b), bits(&m)),
            _ => panic!("wrong kind"),
        }
        // serialization is deterministic
        assert_eq!(text, checkpoint_to_json(&ck));
    }

    #[test]
    fn rmoe_roundtrip_preserves_flags() {
        let mut rng = Rng::new(45);
        let base = BaseModel::new(5, 5, 3, 4, &mut rng);
        let mut m = RmoeModel::new(base, 3, 2, &mut rng);
        m.freeze_base();
        m.combine = Combine::LogitSum;
        let h = param_hash(&m);
        let ck = Checkpoint {
            vocab_hash: 7,
            model: AnyModel::Rmoe(m),
        };
        let back = parse_checkpoint(&checkpoint_to_json(&ck)).unwrap();
        match back.model {
            AnyModel::Rmoe(r) => {
                assert!(r.frozen);
                assert_eq!(r.combine, Combine::LogitSum);
                assert_eq!(param_hash(&r), h);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn moe_roundtrip() {
        let mut rng = Rng::new(46);
        let m = MoeModel::new(5, 5, 3, 2, 3, &mut rng);
        let ck = Checkpoint {
            vocab_hash: 1,
            model: AnyModel::Moe(m.clone()),
        };
        let back = parse_checkpoint(&checkpoint_to_json(&ck)).unwrap();
        match back.model {
            AnyModel::Moe(b) => assert_eq!(bits(&b), bits(&m)),
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn rejects_malformed_documents() {
        assert!(parse_checkpoint("").is_err());
        assert!(parse_checkpoint("{}").is_err());
        assert!(parse_checkpoint("{\"format_version\":9}").is_err());

        // tamper with a valid document: drop a tensor
        let mut rng = Rng::new(47);
        let m = BaseModel::new(3, 3, 2, 2, &mut rng);
        let ck = Checkpoint {
            vocab_hash: 0,
            model: AnyModel::Base(m),
        };
        let text = checkpoint_to_json(&ck);
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        let tensors = doc["tensors"].as_array_mut().unwrap();
        tensors.pop();
        let err = parse_checkpoint(&doc.to_string()).unwrap_err();
        assert!(matches!(err, CheckpointError::Invalid(_)), "{err}");

        // tamper: wrong shape
        let mut doc2: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc2["tensors"][0]["rows"] = serde_json::json!(999);
        assert!(parse_checkpoint(&doc2.to_string()).is_err());
    }
}
