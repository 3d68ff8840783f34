//! Canonical JSON text: sorted keys, floats with exactly six decimals,
//! two-space indentation, LF line endings. Arrays that contain no objects
//! are written on one line.

use serde::Serialize;
use serde_json::{Number, Value};

pub fn format_float(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_owned()
    } else {
        s
    }
}

fn number(n: &Number) -> String {
    if n.is_f64() {
        format_float(n.as_f64().expect("f64 number"))
    } else {
        n.to_string()
    }
}

fn string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn has_object(v: &Value) -> bool {
    match v {
        Value::Object(_) => true,
        Value::Array(items) => items.iter().any(has_object),
        _ => false,
    }
}

fn write_compact(v: &Value, out: &mut String, sep: &str) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&number(n)),
        Value::String(s) => out.push_str(&string(s)),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                    out.push_str(sep);
                }
                write_compact(item, out, sep);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                    out.push_str(sep);
                }
                out.push_str(&string(k));
                out.push(':');
                out.push_str(sep);
                write_compact(item, out, sep);
            }
            out.push('}');
        }
    }
}

fn write_pretty(v: &Value, out: &mut String, depth: usize) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Object(map) if !map.is_empty() => {
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&string(k));
                out.push_str(": ");
                write_pretty(item, out, depth + 1);
                if i + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
        Value::Array(items) if has_object(v) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                write_pretty(item, out, depth + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        _ => write_compact(v, out, " "),
    }
}

fn value_of<T: Serialize + ?Sized>(v: &T) -> Value {
    // keys come out sorted because serde_json's map is ordered
    serde_json::to_value(v).expect("in-memory values serialize")
}

/// Multi-line canonical document, newline terminated.
pub fn to_pretty<T: Serialize + ?Sized>(v: &T) -> String {
    let mut out = String::new();
    write_pretty(&value_of(v), &mut out, 0);
    out.push('\n');
    out
}

/// Single-line canonical form (no trailing newline), for JSON lines.
pub fn to_line<T: Serialize + ?Sized>(v: &T) -> String {
    let mut out = String::new();
    write_compact(&value_of(v), &mut out, "");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn floats_have_six_decimals() {
        assert_eq!(format_float(5.0), "5.000000");
        assert_eq!(format_float(-0.0), "0.000000");
        assert_eq!(format_float(-1e-9), "0.000000");
        assert_eq!(format_float(0.015625), "0.015625");
        assert_eq!(to_line(&json!({"b": 1.5, "a": 2, "c": [1.0, -2.25]})), r#"{"a":2,"b":1.500000,"c":[1.000000,-2.250000]}"#);
    }

    #[test]
    fn pretty_layout() {
        let v = json!({"z": {"k": [[0.0, 1.0], [2.0, 3.0]]}, "a": [{"x": 1}], "e": {}});
        let want = "{\n  \"a\": [\n    {\n      \"x\": 1\n    }\n  ],\n  \"e\": {},\n  \"z\": {\n    \"k\": [[0.000000, 1.000000], [2.000000, 3.000000]]\n  }\n}\n";
        assert_eq!(to_pretty(&v), want);
    }

    #[test]
    fn output_parses_back() {
        let v = json!({"s": "quote\" and \\ slash", "n": null, "t": true, "u": 18446744073709551615u64});
        let back: Value = serde_json::from_str(&to_pretty(&v)).unwrap();
        assert_eq!(back, v);
    }
}
