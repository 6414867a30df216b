//! Minimal JSON Schema validator covering the subset the shipped report
//! schemas use: type, properties, required, additionalProperties (boolean),
//! items, enum, minimum, maximum, minItems. Errors carry a JSON-pointer-ish
//! path to the offending value.

use anyhow::{bail, Result};
use serde_json::Value;

/// Schema for the per-seed metrics report.
pub const METRICS_SCHEMA: &str = include_str!("../schemas/metrics.schema.json");
/// Schema for the cross-seed aggregate report.
pub const AGGREGATE_SCHEMA: &str = include_str!("../schemas/aggregate.schema.json");
/// Schema for the pilot prune-and-re-evaluate report.
pub const PILOT_SCHEMA: &str = include_str!("../schemas/pilot.schema.json");

pub fn validate_str(schema: &str, instance: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(schema)?;
    validate(&schema, instance)
}

pub fn validate(schema: &Value, instance: &Value) -> Result<()> {
    check(schema, instance, "$")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                "integer"
            } else {
                "number"
            }
        }
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn matches_type(want: &str, v: &Value) -> bool {
    match want {
        // Integers are numbers too.
        "number" => matches!(v, Value::Number(_)),
        other => type_name(v) == other,
    }
}

fn check(schema: &Value, instance: &Value, path: &str) -> Result<()> {
    let obj = match schema.as_object() {
        Some(o) => o,
        None => bail!("schema at {path} is not an object"),
    };

    if let Some(ty) = obj.get("type") {
        let ok = match ty {
            Value::String(s) => matches_type(s, instance),
            Value::Array(alts) => alts
                .iter()
                .filter_map(|a| a.as_str())
                .any(|s| matches_type(s, instance)),
            _ => bail!("schema 'type' at {path} must be string or array"),
        };
        if !ok {
            bail!("{path}: expected type {ty}, got {}", type_name(instance));
        }
    }

    if let Some(allowed) = obj.get("enum").and_then(Value::as_array) {
        if !allowed.contains(instance) {
            bail!("{path}: value {instance} not in enum");
        }
    }

    if let Some(min) = obj.get("minimum").and_then(Value::as_f64) {
        let x = instance.as_f64().unwrap_or(f64::NAN);
        if !(x >= min) {
            bail!("{path}: {x} below minimum {min}");
        }
    }
    if let Some(max) = obj.get("maximum").and_then(Value::as_f64) {
        let x = instance.as_f64().unwrap_or(f64::NAN);
        if !(x <= max) {
            bail!("{path}: {x} above maximum {max}");
        }
    }

    if let Some(props) = obj.get("properties").and_then(Value::as_object) {
        let inst = match instance.as_object() {
            Some(m) => m,
            None => return Ok(()), // type check above already reported
        };
        if let Some(req) = obj.get("required").and_then(Value::as_array) {
            for name in req.iter().filter_map(Value::as_str) {
                if !inst.contains_key(name) {
                    bail!("{path}: missing required property '{name}'");
                }
            }
        }
        let closed = obj.get("additionalProperties") == Some(&Value::Bool(false));
        for (key, val) in inst {
            match props.get(key) {
                Some(sub) => check(sub, val, &format!("{path}.{key}"))?,
                None if closed => bail!("{path}: unexpected property '{key}'"),
                None => {}
            }
        }
    } else if let Some(req) = obj.get("required").and_then(Value::as_array) {
        let inst = instance.as_object();
        for name in req.iter().filter_map(Value::as_str) {
            if inst.map_or(true, |m| !m.contains_key(name)) {
                bail!("{path}: missing required property '{name}'");
            }
        }
    }

    if let Some(items) = obj.get("items") {
        if let Some(arr) = instance.as_array() {
            if let Some(min_items) = obj.get("minItems").and_then(Value::as_u64) {
                if (arr.len() as u64) < min_items {
                    bail!("{path}: {} items below minItems {min_items}", arr.len());
                }
            }
            for (i, item) in arr.iter().enumerate() {
                check(items, item, &format!("{path}[{i}]"))?;
            }
        }
    } else if let Some(min_items) = obj.get("minItems").and_then(Value::as_u64) {
        if let Some(arr) = instance.as_array() {
            if (arr.len() as u64) < min_items {
                bail!("{path}: {} items below minItems {min_items}", arr.len());
            }
        }
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn accepts_matching_object() {
        let schema = json!({
            "type": "object",
            "required": ["a", "b"],
            "additionalProperties": false,
            "properties": {
                "a": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                "b": {"type": "array", "items": {"type": "integer"}, "minItems": 1}
            }
        });
        assert!(validate(&schema, &json!({"a": 0.5, "b": [1, 2]})).is_ok());
    }

    #[test]
    fn rejects_violations_with_paths() {
        let schema = json!({
            "type": "object",
            "required": ["a"],
            "additionalProperties": false,
            "properties": {"a": {"type": "number", "minimum": 0.0}}
        });
        let missing = validate(&schema, &json!({})).unwrap_err().to_string();
        assert!(missing.contains("required property 'a'"));
        let below = validate(&schema, &json!({"a": -1.0})).unwrap_err().to_string();
        assert!(below.contains("below minimum"));
        let extra = validate(&schema, &json!({"a": 1.0, "z": 0})).unwrap_err().to_string();
        assert!(extra.contains("unexpected property 'z'"));
        let wrong = validate(&schema, &json!({"a": "x"})).unwrap_err().to_string();
        assert!(wrong.contains("expected type"));
    }

    #[test]
    fn integers_satisfy_number() {
        let schema = json!({"type": "number"});
        assert!(validate(&schema, &json!(3)).is_ok());
        let strict = json!({"type": "integer"});
        assert!(validate(&strict, &json!(3.5)).is_err());
    }

    #[test]
    fn enum_and_items() {
        let schema = json!({
            "type": "array",
            "items": {"type": "string", "enum": ["x", "y"]}
        });
        assert!(validate(&schema, &json!(["x", "y", "x"])).is_ok());
        assert!(validate(&schema, &json!(["x", "z"])).is_err());
    }

    #[test]
    fn shipped_schemas_parse() {
        for s in [METRICS_SCHEMA, AGGREGATE_SCHEMA, PILOT_SCHEMA] {
            let v: Value = serde_json::from_str(s).unwrap();
            assert!(v.is_object());
        }
    }
}
