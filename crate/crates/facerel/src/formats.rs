//! Binary containers for checkpoints and template banks.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u32` LE header length, a
//! JSON header, then the payload as little-endian `f64` arrays whose lengths
//! are listed in the header. Values are stored bit-for-bit.

use facerel_core::attribute::AttributeNet;
use facerel_core::bridge::{BridgeConfig, ClusterNode, ClusterTree, TopNode};
use facerel_core::network::NetworkSpec;
use facerel_core::params::{ParamKind, ParameterSet};
use facerel_core::relation::{RelationConfig, RelationModel};
use facerel_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRELCKPT";
pub const BANK_MAGIC: &[u8; 8] = b"FRELBANK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    header: H,
    arrays: Vec<usize>,
}

fn write_container<H: Serialize>(magic: &[u8; 8], header: H, arrays: &[&[f64]]) -> Vec<u8> {
    let env = Envelope {
        header,
        arrays: arrays.iter().map(|a| a.len()).collect(),
    };
    let json = serde_json::to_vec(&env).expect("headers are plain data");
    let payload: usize = arrays.iter().map(|a| a.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_container<H: DeserializeOwned>(magic: &[u8; 8], what: &str, bytes: &[u8]) -> RunResult<(H, Vec<Vec<f64>>)> {
    let bad = |m: String| RunError::validation(format!("{what}: {m}"));
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad("bad magic; not a file of this kind".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version} unsupported (expected {FORMAT_VERSION})")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let env: Envelope<H> = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let mut payload = &body[hlen..];
    let expected: usize = env.arrays.iter().map(|n| n * 8).sum();
    if payload.len() != expected {
        return Err(bad(format!("payload holds {} bytes, header describes {expected}", payload.len())));
    }
    let arrays = env
        .arrays
        .iter()
        .map(|&n| {
            let (head, rest) = payload.split_at(n * 8);
            payload = rest;
            head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        })
        .collect();
    Ok((env.header, arrays))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
enum ModelHeader {
    Attribute { network: NetworkSpec },
    Relation { config: RelationConfig },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    #[serde(flatten)]
    model: ModelHeader,
    params: Vec<ParamEntry>,
}

/// A trained network as stored on disk.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Attribute(AttributeNet),
    Relation(RelationModel),
}

impl Checkpoint {
    pub fn params(&self) -> &ParameterSet {
        match self {
            Checkpoint::Attribute(n) => &n.params,
            Checkpoint::Relation(m) => &m.params,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Attribute(_) => "attribute",
            Checkpoint::Relation(_) => "relation",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let model = match self {
            Checkpoint::Attribute(n) => ModelHeader::Attribute { network: n.spec.clone() },
            Checkpoint::Relation(m) => ModelHeader::Relation { config: m.config.clone() },
        };
        let params = self.params();
        let header = CheckpointHeader {
            model,
            params: params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let arrays: Vec<&[f64]> = params.iter().map(|p| p.tensor.data()).collect();
        write_container(CHECKPOINT_MAGIC, header, &arrays)
    }

    pub fn decode(bytes: &[u8]) -> RunResult<Self> {
        let (header, arrays): (CheckpointHeader, _) = read_container(CHECKPOINT_MAGIC, "checkpoint", bytes)?;
        if header.params.len() != arrays.len() {
            return Err(RunError::validation("checkpoint: parameter table and payload disagree"));
        }
        let mut params = ParameterSet::new();
        for (entry, data) in header.params.into_iter().zip(arrays) {
            let t = Tensor::new(entry.shape, data).map_err(|e| RunError::validation(format!("checkpoint parameter `{}`: {e}", entry.name)))?;
            params.insert(&entry.name, entry.kind, t)?;
        }
        Ok(match header.model {
            ModelHeader::Attribute { network } => Checkpoint::Attribute(AttributeNet::from_params(network, params)?),
            ModelHeader::Relation { config } => Checkpoint::Relation(RelationModel::from_params(config, params)?),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeShape {
    members: usize,
    upper: Vec<usize>,
    lower: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BankHeader {
    config: BridgeConfig,
    image_dims: (usize, usize),
    hog_dim: usize,
    sentinel: f64,
    nodes: Vec<NodeShape>,
}

/// Serializes a template bank: header, standardization statistics, then the
/// centroid and template of every node in descriptor order.
pub fn encode_bank(tree: &ClusterTree) -> Vec<u8> {
    let header = BankHeader {
        config: tree.config,
        image_dims: tree.image_dims,
        hog_dim: tree.hog_dim,
        sentinel: tree.sentinel,
        nodes: tree
            .nodes
            .iter()
            .map(|n| NodeShape {
                members: n.node.members,
                upper: n.upper.iter().map(|c| c.members).collect(),
                lower: n.lower.iter().map(|c| c.members).collect(),
            })
            .collect(),
    };
    let mut arrays: Vec<&[f64]> = vec![&tree.mean, &tree.std];
    for n in &tree.nodes {
        for c in std::iter::once(&n.node).chain(&n.upper).chain(&n.lower) {
            arrays.push(&c.centroid);
            arrays.push(&c.template);
        }
    }
    write_container(BANK_MAGIC, header, &arrays)
}

pub fn decode_bank(bytes: &[u8]) -> RunResult<ClusterTree> {
    let (header, arrays): (BankHeader, Vec<Vec<f64>>) = read_container(BANK_MAGIC, "template bank", bytes)?;
    let expected = 2 + header.nodes.iter().map(|n| 2 * (1 + n.upper.len() + n.lower.len())).sum::<usize>();
    if arrays.len() != expected {
        return Err(RunError::validation(format!(
            "template bank: {} arrays, node table needs {expected}",
            arrays.len()
        )));
    }
    let mut it = arrays.into_iter();
    let mean = it.next().unwrap();
    let std = it.next().unwrap();
    let mut node = |members| ClusterNode {
        centroid: it.next().unwrap(),
        template: it.next().unwrap(),
        members,
    };
    let nodes = header
        .nodes
        .iter()
        .map(|n| TopNode {
            node: node(n.members),
            upper: n.upper.iter().map(|&m| node(m)).collect(),
            lower: n.lower.iter().map(|&m| node(m)).collect(),
        })
        .collect();
    let tree = ClusterTree {
        config: header.config,
        image_dims: header.image_dims,
        hog_dim: header.hog_dim,
        nodes,
        sentinel: header.sentinel,
        mean,
        std,
    };
    let len = tree.descriptor_len();
    if tree.mean.len() != len || tree.std.len() != len {
        return Err(RunError::validation("template bank: standardization statistics do not match the descriptor length"));
    }
    if tree.templates().flatten().any(|t| t.len() != tree.hog_dim) {
        return Err(RunError::validation("template bank: template length differs from the HOG dimension"));
    }
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facerel_core::network::Profile;
    use facerel_core::relation::RelationSwitches;

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let p = Profile::by_name("desk-small", 5).unwrap();
        let net = AttributeNet::new(p.network.clone(), 3).unwrap();
        let ck = Checkpoint::Attribute(net.clone());
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        let Checkpoint::Attribute(b) = back else { panic!("kind changed") };
        assert_eq!(b.spec, net.spec);
        for (x, y) in b.params.iter().zip(net.params.iter()) {
            assert_eq!(x.name, y.name);
            assert!(x.tensor.data().iter().zip(y.tensor.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let cfg = RelationConfig {
            network: p.network,
            projection_dim: 4,
            switches: RelationSwitches { bridge: false, spatial: true },
        };
        let rel = Checkpoint::Relation(RelationModel::new(cfg, 9).unwrap());
        let bytes = rel.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = Profile::by_name("desk-small", 0).unwrap();
        let bytes = Checkpoint::Attribute(AttributeNet::new(p.network, 1).unwrap()).encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Checkpoint::decode(&wrong).is_err());
        assert!(decode_bank(&bytes).is_err());
    }
}
