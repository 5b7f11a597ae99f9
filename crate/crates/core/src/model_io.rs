//! `.tlmodel.json` checkpoints.
//!
//! The file is a JSON object `{checksum, payload}`. Every float is stored as
//! the hex of its IEEE-754 bit pattern, so a round trip is bit-exact, and the
//! checksum is the SHA-256 of the payload's serialized form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{Activation, Dense, Mlp};
use crate::midpoint::{GammaShape, LearnedMidpoint, TimeEncoding};
use crate::tensor::Tensor;

pub const FORMAT: &str = "tlode-model";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "tlmodel.json";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("checksum failure: {0}")]
    Checksum(String),
    #[error("unsupported model version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("topology mismatch in {what}: expected {expected}, found {actual}")]
    Topology {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("malformed model: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// What the networks in a file are for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// A midpoint network Γ̄_φ.
    Midpoint,
    /// A HyperEuler residual network.
    Residual,
    /// Dynamics network f_θ, optionally with its midpoint network.
    Node,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelMetadata {
    pub kind: ModelKind,
    pub n: usize,
    pub p: usize,
    pub dt: f64,
    pub output_shape: Option<GammaShape>,
    pub encoding: TimeEncoding,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub metadata: ModelMetadata,
    /// Networks by role (`"dynamics"`, `"midpoint"`, `"residual"`).
    pub networks: Vec<(String, Mlp)>,
}

impl ModelFile {
    pub fn network(&self, role: &str) -> Option<&Mlp> {
        self.networks.iter().find(|(r, _)| r == role).map(|(_, m)| m)
    }

    pub fn midpoint(&self) -> Result<LearnedMidpoint, ModelError> {
        let net = self
            .network("midpoint")
            .ok_or_else(|| ModelError::Format("no midpoint network".into()))?;
        let shape = self
            .metadata
            .output_shape
            .ok_or_else(|| ModelError::Format("midpoint output shape missing".into()))?;
        LearnedMidpoint::new(net.clone(), shape, self.metadata.encoding).map_err(|e| ModelError::Format(e.to_string()))
    }

    /// Checks every network against the state dimension `n`.
    pub fn check_topology(&self, n: usize) -> Result<(), ModelError> {
        let mismatch = |what: &str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(ModelError::Topology {
                    what: what.to_string(),
                    expected,
                    actual,
                })
            }
        };
        mismatch("state dimension", n, self.metadata.n)?;
        for (role, net) in &self.networks {
            match role.as_str() {
                "dynamics" => {
                    mismatch("dynamics input", n, net.input_dim())?;
                    mismatch("dynamics output", n, net.output_dim())?;
                }
                "midpoint" => {
                    mismatch("midpoint input", n + 1, net.input_dim())?;
                    let shape = self.metadata.output_shape.unwrap_or(GammaShape::Full);
                    mismatch("midpoint output", shape.outputs(n), net.output_dim())?;
                }
                "residual" => {
                    mismatch("residual input", n + 1, net.input_dim())?;
                    mismatch("residual output", n, net.output_dim())?;
                }
                other => return Err(ModelError::Format(format!("unknown network role `{other}`"))),
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    checksum: String,
    payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    format: String,
    version: u32,
    metadata: MetadataRecord,
    networks: Vec<NetworkRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataRecord {
    kind: ModelKind,
    n: usize,
    p: usize,
    dt: String,
    output_shape: Option<GammaShape>,
    encoding: TimeEncoding,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkRecord {
    role: String,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weight: Vec<String>,
    bias: Option<Vec<String>>,
}

fn hex_of(v: f64) -> String {
    format!("0x{}", hex::encode(v.to_bits().to_be_bytes()))
}

fn from_hex(s: &str) -> Result<f64, ModelError> {
    let digits = s
        .strip_prefix("0x")
        .ok_or_else(|| ModelError::Format(format!("float `{s}` lacks 0x prefix")))?;
    let bytes: [u8; 8] = hex::decode(digits)
        .map_err(|e| ModelError::Format(format!("float `{s}`: {e}")))?
        .try_into()
        .map_err(|_| ModelError::Format(format!("float `{s}` is not 8 bytes")))?;
    Ok(f64::from_bits(u64::from_be_bytes(bytes)))
}

fn floats(v: &[String]) -> Result<Vec<f64>, ModelError> {
    v.iter().map(|s| from_hex(s)).collect()
}

fn checksum(payload: &Payload) -> Result<String, ModelError> {
    let bytes = serde_json::to_vec(payload).map_err(|e| ModelError::Format(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn to_payload(model: &ModelFile) -> Payload {
    let m = &model.metadata;
    Payload {
        format: FORMAT.into(),
        version: VERSION,
        metadata: MetadataRecord {
            kind: m.kind,
            n: m.n,
            p: m.p,
            dt: hex_of(m.dt),
            output_shape: m.output_shape,
            encoding: m.encoding,
            seed: m.seed,
        },
        networks: model
            .networks
            .iter()
            .map(|(role, net)| NetworkRecord {
                role: role.clone(),
                layers: net
                    .layers()
                    .iter()
                    .map(|l| LayerRecord {
                        inputs: l.inputs(),
                        outputs: l.outputs(),
                        activation: l.activation,
                        weight: l.weight.data().iter().map(|&v| hex_of(v)).collect(),
                        bias: l.bias.as_ref().map(|b| b.data().iter().map(|&v| hex_of(v)).collect()),
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn from_payload(p: Payload) -> Result<ModelFile, ModelError> {
    if p.format != FORMAT {
        return Err(ModelError::Format(format!("unknown format `{}`", p.format)));
    }
    if p.version != VERSION {
        return Err(ModelError::Version {
            found: p.version,
            expected: VERSION,
        });
    }
    let mut networks = Vec::new();
    for net in p.networks {
        let mut layers = Vec::new();
        for (i, l) in net.layers.into_iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs {
                return Err(ModelError::Topology {
                    what: format!("{} layer {i} weight entries", net.role),
                    expected: l.inputs * l.outputs,
                    actual: l.weight.len(),
                });
            }
            let weight = Tensor::new(vec![l.inputs, l.outputs], floats(&l.weight)?)
                .map_err(|e| ModelError::Format(e.to_string()))?;
            let bias = match l.bias {
                Some(b) => {
                    if b.len() != l.outputs {
                        return Err(ModelError::Topology {
                            what: format!("{} layer {i} bias entries", net.role),
                            expected: l.outputs,
                            actual: b.len(),
                        });
                    }
                    Some(Tensor::vector(floats(&b)?))
                }
                None => None,
            };
            layers.push(Dense {
                weight,
                bias,
                activation: l.activation,
            });
        }
        let mlp = Mlp::new(layers).map_err(|e| ModelError::Format(format!("{}: {e}", net.role)))?;
        networks.push((net.role, mlp));
    }
    let m = p.metadata;
    Ok(ModelFile {
        metadata: ModelMetadata {
            kind: m.kind,
            n: m.n,
            p: m.p,
            dt: from_hex(&m.dt)?,
            output_shape: m.output_shape,
            encoding: m.encoding,
            seed: m.seed,
        },
        networks,
    })
}

pub fn to_json(model: &ModelFile) -> Result<String, ModelError> {
    let payload = to_payload(model);
    let envelope = Envelope {
        checksum: checksum(&payload)?,
        payload,
    };
    serde_json::to_string_pretty(&envelope).map_err(|e| ModelError::Format(e.to_string()))
}

/// Parses and verifies a model document. Text that is not a complete
/// document (for example a truncated file) fails the checksum stage.
pub fn from_json(text: &str) -> Result<ModelFile, ModelError> {
    let envelope: Envelope = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() || e.is_syntax() {
            ModelError::Checksum(format!("document incomplete or corrupt ({e})"))
        } else {
            ModelError::Format(e.to_string())
        }
    })?;
    let actual = checksum(&envelope.payload)?;
    if actual != envelope.checksum {
        return Err(ModelError::Checksum(format!(
            "stored {}, computed {actual}",
            envelope.checksum
        )));
    }
    from_payload(envelope.payload)
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<(), ModelError> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile, ModelError> {
    from_json(&std::fs::read_to_string(path)?)
}

/// Loads a model and checks it against the state dimension `n`.
pub fn load_model_for(path: &Path, n: usize) -> Result<ModelFile, ModelError> {
    let m = load_model(path)?;
    m.check_topology(n)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> ModelFile {
        let mut rng = Rng::new(42);
        let mid = LearnedMidpoint::random(2, 16, Activation::Relu, GammaShape::Full, &mut rng).unwrap();
        ModelFile {
            metadata: ModelMetadata {
                kind: ModelKind::Midpoint,
                n: 2,
                p: 1,
                dt: 0.3,
                output_shape: Some(GammaShape::Full),
                encoding: TimeEncoding::Raw,
                seed: 42,
            },
            networks: vec![("midpoint".into(), mid.net)],
        }
    }

    #[test]
    fn hex_round_trip() {
        for v in [0.0, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, -1e300, 5e-324] {
            assert_eq!(from_hex(&hex_of(v)).unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let back = from_json(&to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.midpoint().unwrap().net, m.networks[0].1);
    }

    #[test]
    fn truncated_text_is_checksum_error() {
        let text = to_json(&sample()).unwrap();
        let cut = &text[..text.len() / 2];
        assert!(matches!(from_json(cut), Err(ModelError::Checksum(_))));
    }

    #[test]
    fn tampered_payload_is_checksum_error() {
        let text = to_json(&sample()).unwrap();
        let tampered = text.replacen("\"seed\": 42", "\"seed\": 43", 1);
        assert_ne!(tampered, text);
        assert!(matches!(from_json(&tampered), Err(ModelError::Checksum(_))));
    }

    #[test]
    fn version_mismatch() {
        let m = sample();
        let mut payload = to_payload(&m);
        payload.version = 7;
        let env = Envelope {
            checksum: checksum(&payload).unwrap(),
            payload,
        };
        let text = serde_json::to_string(&env).unwrap();
        assert!(matches!(
            from_json(&text),
            Err(ModelError::Version { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn topology_names_dimensions() {
        let err = sample().check_topology(3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 3") && msg.contains("found 2"), "{msg}");
    }
}
