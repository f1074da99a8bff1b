//! A small JSON Schema validator covering the keywords the shipped schemas
//! use: `type`, `enum`, `const`, `required`, `properties`,
//! `additionalProperties`, `items`, `minItems`, `minimum`, `maximum`,
//! `pattern` and local `$ref`s into `$defs`. Unknown keywords are rejected
//! when the schema is compiled, so a schema cannot silently go unchecked.

use regex::Regex;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const KEYWORDS: &[&str] = &[
    "$schema", "$id", "$defs", "$ref", "title", "description", "type", "enum", "const", "required",
    "properties", "additionalProperties", "items", "minItems", "minimum", "maximum", "pattern",
];

pub struct Validator {
    root: Value,
}

impl Validator {
    pub fn new(schema: Value) -> Result<Self> {
        check_schema(&schema, &schema, "#")?;
        Ok(Validator { root: schema })
    }

    /// Every violation, as `path: message`.
    pub fn errors(&self, instance: &Value) -> Vec<String> {
        let mut out = Vec::new();
        self.walk(&self.root, instance, "", &mut out);
        out
    }

    fn walk(&self, schema: &Value, v: &Value, at: &str, out: &mut Vec<String>) {
        let s = match schema {
            Value::Bool(true) => return,
            Value::Bool(false) => return out.push(format!("{}: not allowed", at)),
            Value::Object(s) => s,
            _ => return,
        };
        let mut fail = |m: String| out.push(format!("{}: {}", if at.is_empty() { "/" } else { at }, m));
        if let Some(Value::String(r)) = s.get("$ref") {
            let target = resolve(&self.root, r).expect("checked at compile time");
            self.walk(target, v, at, out);
            return;
        }
        if let Some(t) = s.get("type") {
            let ok = match t {
                Value::String(t) => has_type(v, t),
                Value::Array(ts) => ts.iter().any(|t| t.as_str().is_some_and(|t| has_type(v, t))),
                _ => true,
            };
            if !ok {
                fail(format!("expected type {}", t));
                return;
            }
        }
        if let Some(Value::Array(opts)) = s.get("enum") {
            if !opts.contains(v) {
                fail(format!("{} is not one of {}", v, Value::Array(opts.clone())));
            }
        }
        if let Some(c) = s.get("const") {
            if c != v {
                fail(format!("expected {}", c));
            }
        }
        if let Some(x) = v.as_f64() {
            if let Some(min) = s.get("minimum").and_then(Value::as_f64) {
                if x < min {
                    fail(format!("{} is below {}", x, min));
                }
            }
            if let Some(max) = s.get("maximum").and_then(Value::as_f64) {
                if x > max {
                    fail(format!("{} is above {}", x, max));
                }
            }
        }
        if let (Some(Value::String(p)), Value::String(text)) = (s.get("pattern"), v) {
            if !Regex::new(p).expect("checked at compile time").is_match(text) {
                fail(format!("{:?} does not match {}", text, p));
            }
        }
        if let Value::Array(items) = v {
            if let Some(min) = s.get("minItems").and_then(Value::as_u64) {
                if (items.len() as u64) < min {
                    fail(format!("expected at least {} items", min));
                }
            }
            if let Some(item) = s.get("items") {
                for (i, x) in items.iter().enumerate() {
                    self.walk(item, x, &format!("{}/{}", at, i), out);
                }
            }
        }
        if let Value::Object(obj) = v {
            self.object(s, obj, at, out);
        }
    }

    fn object(&self, s: &Map<String, Value>, obj: &Map<String, Value>, at: &str, out: &mut Vec<String>) {
        if let Some(Value::Array(req)) = s.get("required") {
            for k in req.iter().filter_map(Value::as_str) {
                if !obj.contains_key(k) {
                    out.push(format!("{}: missing required property {:?}", if at.is_empty() { "/" } else { at }, k));
                }
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        for (k, x) in obj {
            let path = format!("{}/{}", at, k);
            match props.and_then(|p| p.get(k)) {
                Some(sub) => self.walk(sub, x, &path, out),
                None => {
                    if let Some(extra) = s.get("additionalProperties") {
                        self.walk(extra, x, &path, out);
                    }
                }
            }
        }
    }
}

fn has_type(v: &Value, t: &str) -> bool {
    match t {
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_u64() || v.is_i64() || v.as_f64().is_some_and(|x| x.fract() == 0.0),
        _ => false,
    }
}

fn resolve<'a>(root: &'a Value, r: &str) -> Option<&'a Value> {
    let name = r.strip_prefix("#/$defs/")?;
    root.get("$defs")?.get(name)
}

fn check_schema(root: &Value, s: &Value, at: &str) -> Result<()> {
    let bad = |m: String| Err(Error::invalid(format!("schema {}: {}", at, m)));
    let s = match s {
        Value::Bool(_) => return Ok(()),
        Value::Object(s) => s,
        _ => return bad("must be an object or boolean".into()),
    };
    for (k, v) in s {
        if !KEYWORDS.contains(&k.as_str()) {
            return bad(format!("unsupported keyword {:?}", k));
        }
        let here = format!("{}/{}", at, k);
        match k.as_str() {
            "$ref" => {
                if resolve(root, v.as_str().unwrap_or_default()).is_none() {
                    return bad(format!("unresolvable reference {}", v));
                }
            }
            "pattern" => {
                if let Err(e) = Regex::new(v.as_str().unwrap_or_default()) {
                    return bad(format!("bad pattern: {}", e));
                }
            }
            "items" | "additionalProperties" => check_schema(root, v, &here)?,
            "properties" | "$defs" => {
                for (name, sub) in v.as_object().into_iter().flatten() {
                    check_schema(root, sub, &format!("{}/{}", here, name))?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> Validator {
        Validator::new(json!({
            "type": "object",
            "required": ["n", "tags"],
            "additionalProperties": false,
            "$defs": { "frac": { "type": "number", "minimum": 0, "maximum": 1 } },
            "properties": {
                "n": { "$ref": "#/$defs/frac" },
                "tags": { "type": "array", "minItems": 1, "items": { "enum": ["a", "b", null] } },
                "id": { "type": "string", "pattern": "^[0-9a-f]{4}$" },
                "v": { "const": 1 }
            }
        }))
        .unwrap()
    }

    #[test]
    fn accepts_conforming_documents() {
        let v = schema();
        assert!(v.errors(&json!({"n": 0.5, "tags": ["a", null], "id": "00ff", "v": 1})).is_empty());
    }

    #[test]
    fn reports_each_violation() {
        let v = schema();
        let e = v.errors(&json!({"n": 2, "tags": [], "id": "xyz", "v": 2, "extra": 0}));
        assert_eq!(e.len(), 5, "{:?}", e);
        assert_eq!(v.errors(&json!({"tags": ["c"]})).len(), 2);
        assert_eq!(v.errors(&json!([])).len(), 1);
    }

    #[test]
    fn unsupported_keywords_rejected() {
        assert!(Validator::new(json!({"oneOf": []})).is_err());
        assert!(Validator::new(json!({"$ref": "#/$defs/missing"})).is_err());
        assert!(Validator::new(json!({"pattern": "("})).is_err());
    }
}
