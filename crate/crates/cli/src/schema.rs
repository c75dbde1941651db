//! JSON-schema-style document for the config, derived from the defaults plus
//! annotations for enumerations and optional keys.

use serde_json::{json, Map, Value};

use crate::config::{CheckName, ExperimentConfig, ENV_PREFIX};

const MODES: [&str; 5] = ["lp", "ft", "lora", "lp-ft", "lp-lora"];

fn annotation(path: &str) -> Option<Value> {
    let nullable_num = json!({ "type": ["number", "null"], "default": null });
    let nullable_str = json!({ "type": ["string", "null"], "default": null });
    let checks: Vec<&str> = CheckName::ALL.iter().map(|c| c.as_str()).collect();
    Some(match path {
        "data.path" | "model.path" | "kernel.train_kernel" | "kernel.test_kernel" | "calibration.logits" => nullable_str,
        "model.head_scale" | "training.lp_lambda" | "training.lp_learning_rate" | "checks.lora.variance" | "kernel.lambda" => {
            nullable_num
        }
        "model.arch" => json!({ "enum": ["linear", "mlp"] }),
        "model.head_init" => json!({ "enum": ["zeros", "gaussian"] }),
        "training.mode" => json!({ "enum": MODES }),
        "training.aggregation" => json!({ "enum": ["sum", "mean"] }),
        "training.lp_solver" => json!({ "enum": ["ridge", "gd"] }),
        "checks.suite" => json!({ "type": "array", "items": { "enum": checks } }),
        "kernel.components" => json!({ "type": "array", "items": { "enum": ["ntk", "pre_train", "ft"] } }),
        "reproduce.modes" | "reproduce.sweep_modes" => json!({ "type": "array", "items": { "enum": MODES } }),
        _ => return None,
    })
}

fn type_of(v: &Value) -> Value {
    match v {
        Value::Bool(_) => json!({ "type": "boolean" }),
        Value::Number(n) if n.is_u64() => json!({ "type": "integer", "minimum": 0 }),
        Value::Number(_) => json!({ "type": "number" }),
        Value::String(_) => json!({ "type": "string" }),
        Value::Array(items) => match items.first() {
            Some(first) => json!({ "type": "array", "items": type_of(first) }),
            None => json!({ "type": "array" }),
        },
        _ => json!({}),
    }
}

fn walk(prefix: &str, value: &Value) -> Value {
    match value {
        Value::Object(fields) => {
            let mut props = Map::new();
            for (k, v) in fields {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                props.insert(k.clone(), walk(&path, v));
            }
            json!({ "type": "object", "additionalProperties": false, "properties": props })
        }
        leaf => {
            let mut node = annotation(prefix).unwrap_or_else(|| type_of(leaf));
            if let Value::Object(m) = &mut node {
                m.entry("default").or_insert_with(|| leaf.clone());
            }
            node
        }
    }
}

pub fn schema() -> Value {
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut doc = walk("", &defaults);
    if let Value::Object(m) = &mut doc {
        m.insert("$schema".into(), json!("https://json-schema.org/draft/2020-12/schema"));
        m.insert("title".into(), json!("ntklab experiment config (TOML)"));
        m.insert(
            "description".into(),
            json!(format!(
                "Every key is optional. Overrides: environment variables {ENV_PREFIX}section__key=value, then --set section.key=value; values are TOML literals."
            )),
        );
    }
    doc
}
