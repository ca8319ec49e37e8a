//! Model files: a JSON envelope with the hyperparameters, plus the per-round
//! statistics and weights as a checksummed base64 block of little-endian
//! binary, so reals survive bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BoosterModel, RoundModel};
use crate::error::{GbunError, Result};
use crate::forward::NormStats;
use crate::hashwgen::WeightMode;
use crate::matrix::Matrix;

pub const MODEL_FORMAT: &str = "gbun-model";
pub const MODEL_VERSION: u32 = 1;

const PAYLOAD_LAYOUT: &str = "little-endian, per round in order: u32 round_index, \
    f64[k] mean, f64[k] std, u64 count, f64[num_classes * k] weights (class-major)";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    objective: String,
    k: usize,
    eta: f64,
    lambda: f64,
    num_classes: usize,
    num_features: usize,
    mode: WeightMode,
    rounds: usize,
    payload_layout: String,
    payload_sha256: String,
    payload: String,
}

fn round_bytes(k: usize, c: usize) -> usize {
    4 + 8 * k + 8 * k + 8 + 8 * c * k
}

fn encode_rounds(model: &BoosterModel) -> Vec<u8> {
    let (k, c) = (model.k, model.num_classes);
    let mut out = Vec::with_capacity(model.rounds.len() * round_bytes(k, c));
    for r in &model.rounds {
        out.extend_from_slice(&r.round_index.to_le_bytes());
        for v in r.norm_stats.mean.iter().chain(&r.norm_stats.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.norm_stats.count.to_le_bytes());
        for v in r.weights.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(GbunError::model("payload truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_rounds(bytes: &[u8], rounds: usize, k: usize, c: usize) -> Result<Vec<RoundModel>> {
    let mut cur = Cursor { bytes };
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let round_index = cur.u32()?;
        let mean = cur.f64s(k)?;
        let std = cur.f64s(k)?;
        let count = cur.u64()?;
        let weights = cur.f64s(c * k)?;
        if weights.iter().chain(&mean).chain(&std).any(|v| !v.is_finite()) {
            return Err(GbunError::model(format!("round {round_index} holds non-finite values")));
        }
        out.push(RoundModel {
            round_index,
            norm_stats: NormStats { mean, std, count },
            weights: Matrix::from_vec(c, k, weights),
        });
    }
    if !cur.bytes.is_empty() {
        return Err(GbunError::model(format!(
            "{} unexpected bytes after the last round",
            cur.bytes.len()
        )));
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the canonical form of `model`: the same model always yields the
/// same bytes.
pub fn write_model<W: Write>(model: &BoosterModel, mut out: W) -> Result<()> {
    let payload = encode_rounds(model);
    let env = Envelope {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        objective: model.objective.clone(),
        k: model.k,
        eta: model.eta,
        lambda: model.lambda,
        num_classes: model.num_classes,
        num_features: model.num_features,
        mode: model.mode.clone(),
        rounds: model.rounds.len(),
        payload_layout: PAYLOAD_LAYOUT.to_string(),
        payload_sha256: hex(&Sha256::digest(&payload)),
        payload: BASE64.encode(&payload),
    };
    serde_json::to_writer_pretty(&mut out, &env)
        .map_err(|e| GbunError::model(format!("cannot serialize: {e}")))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<BoosterModel> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| GbunError::model(format!("unreadable: {e}")))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| GbunError::model(format!("not a model file (truncated or malformed): {e}")))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
        return Err(GbunError::model(format!("missing `format: {MODEL_FORMAT}` marker")));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| GbunError::model("missing version"))?;
    if version != MODEL_VERSION as u64 {
        return Err(GbunError::ModelVersion {
            found: version.min(u32::MAX as u64) as u32,
            expected: MODEL_VERSION,
        });
    }
    let env: Envelope =
        serde_json::from_value(raw).map_err(|e| GbunError::model(format!("bad field: {e}")))?;
    let payload = BASE64
        .decode(env.payload.as_bytes())
        .map_err(|e| GbunError::model(format!("payload is not base64: {e}")))?;
    if hex(&Sha256::digest(&payload)) != env.payload_sha256 {
        return Err(GbunError::model("payload checksum mismatch"));
    }
    if env.k < 2 || env.num_classes == 0 {
        return Err(GbunError::model("k must be at least 2 and num_classes positive"));
    }
    let rounds = decode_rounds(&payload, env.rounds, env.k, env.num_classes)?;
    let model = BoosterModel {
        objective: env.objective,
        k: env.k,
        eta: env.eta,
        lambda: env.lambda,
        num_classes: env.num_classes,
        num_features: env.num_features,
        mode: env.mode,
        rounds,
    };
    model.objective_impl()?;
    Ok(model)
}

pub fn save_model(model: &BoosterModel, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BoosterModel> {
    read_model(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> BoosterModel {
        let round = |t: u32, scale: f64| RoundModel {
            round_index: t,
            norm_stats: NormStats {
                mean: vec![0.1 * scale, -1.0 / 3.0],
                std: vec![1e-12, 2.5],
                count: 1000,
            },
            weights: Matrix::from_vec(2, 2, vec![f64::MIN_POSITIVE, -0.0, 1.0 / 7.0, 1e300]),
        };
        BoosterModel {
            objective: "multi:softmax".into(),
            k: 2,
            eta: 0.1,
            lambda: 1.0,
            num_classes: 2,
            num_features: 16,
            mode: WeightMode::dense(7, 0.9),
            rounds: vec![round(0, 1.0), round(1, std::f64::consts::PI)],
        }
    }

    fn bytes(model: &BoosterModel) -> Vec<u8> {
        let mut v = Vec::new();
        write_model(model, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bit_exact_and_canonical() {
        let model = sample_model();
        let first = bytes(&model);
        let back = read_model(&first[..]).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.rounds[0].weights.get(0, 1).to_bits(), (-0.0f64).to_bits());
        assert_eq!(bytes(&back), first);
    }

    #[test]
    fn unknown_version_is_explicit() {
        let text = String::from_utf8(bytes(&sample_model())).unwrap();
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(
            read_model(bumped.as_bytes()),
            Err(GbunError::ModelVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let full = bytes(&sample_model());
        assert!(matches!(read_model(&full[..full.len() / 2]), Err(GbunError::Model(_))));

        let text = String::from_utf8(full.clone()).unwrap();
        let env: serde_json::Value = serde_json::from_str(&text).unwrap();
        let payload = env["payload"].as_str().unwrap();
        let mut flipped = payload.as_bytes().to_vec();
        flipped[10] = if flipped[10] == b'A' { b'B' } else { b'A' };
        let corrupt = text.replace(payload, std::str::from_utf8(&flipped).unwrap());
        let err = read_model(corrupt.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        // consistent checksum but one round short of the declared count
        let mut short = sample_model();
        short.rounds.pop();
        let short_text = String::from_utf8(bytes(&short)).unwrap();
        let lying = short_text.replace("\"rounds\": 1", "\"rounds\": 2");
        let err = read_model(lying.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn empty_model_round_trips() {
        let mut model = sample_model();
        model.rounds.clear();
        model.mode = WeightMode::hashed();
        assert_eq!(read_model(&bytes(&model)[..]).unwrap(), model);
    }
}
