//! Binary posterior checkpoints.
//!
//! Layout: the 8-byte magic `BAYESCP\0`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then the payload as little-endian `f64`s.
//! The header records the network, the posterior kind, the lengths of the
//! payload segments and the training seed.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::PosteriorApproximation;
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, WeightVector};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BAYESCP\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub posterior: PosteriorApproximation,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: NetworkSpec,
    kind: String,
    /// Payload segment lengths, in order.
    shapes: Vec<usize>,
    seed: u64,
    payload_len: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.posterior.validate(&self.spec)?;
        let segments: Vec<&[f64]> = match &self.posterior {
            PosteriorApproximation::Point { weights } => vec![weights.as_slice()],
            PosteriorApproximation::Ensemble { members: ws } | PosteriorApproximation::SampleChain { samples: ws } => {
                ws.iter().map(|w| w.as_slice()).collect()
            }
            PosteriorApproximation::MeanField { means, log_sigmas } => {
                vec![means.as_slice(), log_sigmas.as_slice()]
            }
            PosteriorApproximation::LaplaceLastLayer {
                map_weights,
                last_layer_mean,
                last_layer_cov,
            } => vec![map_weights.as_slice(), last_layer_mean, last_layer_cov.as_slice()],
        };
        let shapes: Vec<usize> = segments.iter().map(|s| s.len()).collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            kind: self.posterior.kind_name().to_string(),
            payload_len: shapes.iter().sum(),
            shapes,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * header.payload_len);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for seg in segments {
            for v in seg {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(bad(format!("header length {header_len} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &body[header_len..];
        if payload.len() != 8 * header.payload_len || header.shapes.iter().sum::<usize>() != header.payload_len {
            return Err(bad(format!(
                "payload has {} bytes, header declares {} values",
                payload.len(),
                header.payload_len
            )));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut segs = Vec::with_capacity(header.shapes.len());
        let mut at = 0;
        for &len in &header.shapes {
            segs.push(values[at..at + len].to_vec());
            at += len;
        }
        let expect = |n: usize| -> Result<()> {
            if segs.len() == n {
                Ok(())
            } else {
                Err(bad(format!(
                    "{} posterior needs {n} segments, got {}",
                    header.kind,
                    segs.len()
                )))
            }
        };
        let posterior = match header.kind.as_str() {
            "point" => {
                expect(1)?;
                PosteriorApproximation::Point {
                    weights: WeightVector(segs.remove(0)),
                }
            }
            "ensemble" => PosteriorApproximation::Ensemble {
                members: segs.into_iter().map(WeightVector).collect(),
            },
            "sample_chain" => PosteriorApproximation::SampleChain {
                samples: segs.into_iter().map(WeightVector).collect(),
            },
            "mean_field" => {
                expect(2)?;
                let log_sigmas = WeightVector(segs.pop().expect("two"));
                let means = WeightVector(segs.pop().expect("two"));
                PosteriorApproximation::MeanField { means, log_sigmas }
            }
            "laplace_last_layer" => {
                expect(3)?;
                let cov = segs.pop().expect("three");
                let mean = segs.pop().expect("three");
                let map = segs.pop().expect("three");
                let l = mean.len();
                if cov.len() != l * l {
                    return Err(bad(format!("covariance has {} entries, expected {}", cov.len(), l * l)));
                }
                PosteriorApproximation::LaplaceLastLayer {
                    map_weights: WeightVector(map),
                    last_layer_mean: mean,
                    last_layer_cov: DMatrix::from_column_slice(l, l, &cov),
                }
            }
            other => return Err(bad(format!("unknown posterior kind {other:?}"))),
        };
        posterior.validate(&header.spec).map_err(|e| e.context("checkpoint"))?;
        Ok(Self {
            spec: header.spec,
            posterior,
            seed: header.seed,
        })
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, Activation, ScaleRule};
    use proptest::prelude::*;

    fn spec() -> NetworkSpec {
        NetworkSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap()
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    fn posterior_bits(p: &PosteriorApproximation) -> Vec<u64> {
        match p {
            PosteriorApproximation::Point { weights } => bits(weights.as_slice()),
            PosteriorApproximation::Ensemble { members: ws } | PosteriorApproximation::SampleChain { samples: ws } => {
                ws.iter().flat_map(|w| bits(w.as_slice())).collect()
            }
            PosteriorApproximation::MeanField { means, log_sigmas } => {
                [bits(means.as_slice()), bits(log_sigmas.as_slice())].concat()
            }
            PosteriorApproximation::LaplaceLastLayer {
                map_weights,
                last_layer_mean,
                last_layer_cov,
            } => [
                bits(map_weights.as_slice()),
                bits(last_layer_mean),
                bits(last_layer_cov.as_slice()),
            ]
            .concat(),
        }
    }

    fn arb_posterior() -> impl Strategy<Value = PosteriorApproximation> {
        let p = spec().num_params();
        let l = spec().output_layer().len();
        let w = || prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, p).prop_map(WeightVector);
        prop_oneof![
            w().prop_map(|weights| PosteriorApproximation::Point { weights }),
            prop::collection::vec(w(), 1..4).prop_map(|members| PosteriorApproximation::Ensemble { members }),
            prop::collection::vec(w(), 1..4).prop_map(|samples| PosteriorApproximation::SampleChain { samples }),
            (w(), prop::collection::vec(-10.0f64..3.0, p)).prop_map(|(means, mut ls)| {
                ls[0] = f64::NEG_INFINITY;
                PosteriorApproximation::MeanField {
                    means,
                    log_sigmas: WeightVector(ls),
                }
            }),
            (
                w(),
                prop::collection::vec(-1.0f64..1.0, l * l),
                prop::collection::vec(-5.0f64..5.0, l)
            )
                .prop_map(move |(map_weights, a, mean)| {
                    let a = DMatrix::from_vec(l, l, a);
                    let cov = &a * a.transpose();
                    PosteriorApproximation::LaplaceLastLayer {
                        map_weights,
                        last_layer_mean: mean,
                        last_layer_cov: cov,
                    }
                }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(post in arb_posterior(), seed in any::<u64>()) {
            let ck = Checkpoint { spec: spec(), posterior: post, seed };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back.spec, &ck.spec);
            prop_assert_eq!(back.seed, seed);
            prop_assert_eq!(back.posterior.kind_name(), ck.posterior.kind_name());
            prop_assert_eq!(posterior_bits(&back.posterior), posterior_bits(&ck.posterior));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            spec: spec(),
            posterior: PosteriorApproximation::Point {
                weights: init_weights(&spec(), 1, ScaleRule::FanIn),
            },
            seed: 42,
        };
        write_checkpoint(&path, &ck).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corrupt_input() {
        let ck = Checkpoint {
            spec: spec(),
            posterior: PosteriorApproximation::Point {
                weights: init_weights(&spec(), 1, ScaleRule::FanIn),
            },
            seed: 0,
        };
        let bytes = ck.to_bytes().unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        let bad = Checkpoint {
            spec: spec(),
            posterior: PosteriorApproximation::Point {
                weights: WeightVector(vec![0.0]),
            },
            seed: 0,
        };
        assert!(bad.to_bytes().is_err());
    }
}
