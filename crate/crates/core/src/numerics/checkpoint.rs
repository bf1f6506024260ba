//! Versioned JSON checkpoint format for network parameters.
//!
//! Layout: a header (layer widths, activations, init seed) followed by the
//! flat value array, matching the in-memory [`Params`] layout exactly.
//! JSON float serialization round-trips `f64` bit-for-bit, so load(save(p))
//! is the identity.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, ModelSpec, OutputActivation, Params};

pub const PARAMS_FORMAT: &str = "robsim-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamsDoc {
    format: String,
    version: u32,
    layer_widths: Vec<usize>,
    hidden: Activation,
    output: OutputActivation,
    seed: u64,
    values: Vec<f64>,
}

/// Serializes parameters to the versioned JSON document.
pub fn params_to_json(params: &Params) -> Result<String> {
    let doc = ParamsDoc {
        format: PARAMS_FORMAT.to_string(),
        version: PARAMS_VERSION,
        layer_widths: params.spec.layer_widths.clone(),
        hidden: params.spec.hidden,
        output: params.spec.output,
        seed: params.seed,
        values: params.values.clone(),
    };
    Ok(serde_json::to_string(&doc)?)
}

/// Parses the versioned JSON document back into parameters.
pub fn params_from_json(text: &str, origin: &str) -> Result<Params> {
    let doc: ParamsDoc = serde_json::from_str(text).map_err(|e| Error::BadArtifact {
        file: origin.to_string(),
        reason: e.to_string(),
    })?;
    if doc.format != PARAMS_FORMAT || doc.version != PARAMS_VERSION {
        return Err(Error::BadArtifact {
            file: origin.to_string(),
            reason: format!(
                "expected {PARAMS_FORMAT} v{PARAMS_VERSION}, got {} v{}",
                doc.format, doc.version
            ),
        });
    }
    let spec = ModelSpec::new(&doc.layer_widths, doc.hidden, doc.output);
    let mut params = Params::from_values(spec, doc.values).map_err(|e| Error::BadArtifact {
        file: origin.to_string(),
        reason: e.to_string(),
    })?;
    params.seed = doc.seed;
    Ok(params)
}

/// The document as a JSON value, for embedding in composite checkpoints.
pub fn params_to_value(params: &Params) -> Result<serde_json::Value> {
    Ok(serde_json::from_str(&params_to_json(params)?)?)
}

/// Parses an embedded document produced by [`params_to_value`].
pub fn params_from_value(value: &serde_json::Value, origin: &str) -> Result<Params> {
    params_from_json(&value.to_string(), origin)
}

pub fn save_params(path: &Path, params: &Params) -> Result<()> {
    fs::write(path, params_to_json(params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Params> {
    let text = fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    params_from_json(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::init_params;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = ModelSpec::new(&[3, 5, 2], Activation::Tanh, OutputActivation::Softmax);
        let params = init_params(&spec, 99).unwrap();
        let json = params_to_json(&params).unwrap();
        let back = params_from_json(&json, "mem").unwrap();
        assert_eq!(back.spec, params.spec);
        assert_eq!(back.seed, 99);
        assert_eq!(back.values.len(), params.values.len());
        for (a, b) in params.values.iter().zip(&back.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let params = init_params(&ModelSpec::linear(2, 2), 5).unwrap();
        save_params(&path, &params).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.values, params.values);
        assert!(matches!(
            load_params(&dir.path().join("absent.json")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn wrong_format_or_count_is_rejected() {
        let bad = r#"{"format":"other","version":1,"layer_widths":[1,1],"hidden":"identity","output":"identity","seed":0,"values":[0.0,0.0]}"#;
        assert!(params_from_json(bad, "mem").is_err());
        let short = r#"{"format":"robsim-params","version":1,"layer_widths":[1,1],"hidden":"identity","output":"identity","seed":0,"values":[0.0]}"#;
        assert!(params_from_json(short, "mem").is_err());
    }
}
