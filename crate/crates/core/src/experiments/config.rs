use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Which conformity score every scale uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// `1 - p_hat` from a softmax model trained on the scale's own feature.
    #[default]
    Logistic,
    /// `-P(y | x)` from the generator, identical at every scale.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationStrategy {
    #[default]
    Uniform,
    /// Equal-elasticity allocation from size curves estimated on the
    /// calibration split.
    Optimal,
}

/// Overlays `overrides` (a flat JSON object) on the serialized defaults of
/// `T` and deserializes the result. Keys unknown to `T` are rejected.
pub fn resolve_config<T>(overrides: &Value) -> Result<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let mut base = serde_json::to_value(T::default()).expect("config serializes");
    let (Some(base_map), Some(over)) = (base.as_object_mut(), overrides.as_object()) else {
        return Err(Error::config("config", "expected a JSON object"));
    };
    for (key, value) in over {
        if !base_map.contains_key(key) {
            let mut known: Vec<&String> = base_map.keys().collect();
            known.sort();
            return Err(Error::config(
                key.as_str(),
                format!(
                    "unknown key; expected one of {}",
                    known.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
                ),
            ));
        }
        base_map.insert(key.clone(), value.clone());
    }
    serde_json::from_value(base).map_err(|e| Error::config("config", e.to_string()))
}

/// Entries of an `alpha` list must lie in `(0, 1)`.
pub(crate) fn validate_alphas(field: &str, alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::config(field, "must not be empty"));
    }
    for (i, &a) in alphas.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::config(field, format!("entry {i} ({a}) is outside (0, 1)")));
        }
    }
    Ok(())
}

pub(crate) fn validate_replications(replications: usize) -> Result<()> {
    if replications == 0 {
        return Err(Error::config("replications", "must be at least 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;
    use serde_json::json;

    #[test]
    fn overrides_replace_defaults() {
        let c: SynthConfig = resolve_config(&json!({"n_points": 50, "seed": 9})).unwrap();
        assert_eq!(c.n_points, 50);
        assert_eq!(c.seed, 9);
        assert_eq!(c.n_classes, SynthConfig::default().n_classes);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = resolve_config::<SynthConfig>(&json!({"n_pints": 5})).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { ref field, .. } if field == "n_pints"));
    }

    #[test]
    fn alpha_lists() {
        assert!(validate_alphas("alphas", &[0.1, 0.2]).is_ok());
        let e = validate_alphas("alphas", &[0.1, 1.2]).unwrap_err();
        assert!(e.to_string().contains("1.2"), "{e}");
    }
}
