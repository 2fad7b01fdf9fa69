//! Canonical JSON writer.
//!
//! Object keys are sorted bytewise at every level, there is no insignificant
//! whitespace, integers are written as-is and non-integer numbers always carry
//! exactly four decimals (round-half-even on the exact binary value).

use std::collections::BTreeMap;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub enum Canon {
    Null,
    Bool(bool),
    Int(i128),
    Fixed(f64),
    Str(String),
    Array(Vec<Canon>),
    Object(BTreeMap<String, Canon>),
}

/// Builder for canonical objects.
#[derive(Debug, Default)]
pub struct ObjectBuilder(BTreeMap<String, Canon>);

impl ObjectBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, key: &str, value: impl Into<Canon>) -> Self {
        self.0.insert(key.to_owned(), value.into());
        self
    }

    pub fn build(self) -> Canon {
        Canon::Object(self.0)
    }
}

impl From<bool> for Canon {
    fn from(v: bool) -> Self {
        Canon::Bool(v)
    }
}

macro_rules! int_into_canon {
    ($($t:ty),*) => {$(
        impl From<$t> for Canon {
            fn from(v: $t) -> Self {
                Canon::Int(v as i128)
            }
        }
    )*};
}
int_into_canon!(u8, u32, u64, i64, usize);

impl From<f64> for Canon {
    fn from(v: f64) -> Self {
        Canon::Fixed(v)
    }
}

impl From<&str> for Canon {
    fn from(v: &str) -> Self {
        Canon::Str(v.to_owned())
    }
}

impl From<String> for Canon {
    fn from(v: String) -> Self {
        Canon::Str(v)
    }
}

impl<T: Into<Canon>> From<Option<T>> for Canon {
    fn from(v: Option<T>) -> Self {
        v.map_or(Canon::Null, Into::into)
    }
}

impl<T: Into<Canon>> From<Vec<T>> for Canon {
    fn from(v: Vec<T>) -> Self {
        Canon::Array(v.into_iter().map(Into::into).collect())
    }
}

/// Four-decimal rendering; negative zero prints as `0.0000`.
pub fn format_fixed(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".to_owned()
    } else {
        s
    }
}

/// Rounds to the value a four-decimal canonical encoding would decode to.
pub fn quantize(v: f64) -> f64 {
    if !v.is_finite() {
        return v;
    }
    format_fixed(v).parse().expect("formatted float parses")
}

impl Canon {
    /// Path of the first non-finite number, if any.
    pub fn find_non_finite(&self) -> Option<String> {
        match self {
            Canon::Fixed(v) if !v.is_finite() => Some(String::new()),
            Canon::Array(items) => items.iter().enumerate().find_map(|(i, item)| {
                item.find_non_finite().map(|p| join_path(&format!("[{i}]"), &p))
            }),
            Canon::Object(map) => map.iter().find_map(|(k, v)| {
                v.find_non_finite().map(|p| join_path(k, &p))
            }),
            _ => None,
        }
    }

    pub fn write_to(&self, out: &mut String) {
        match self {
            Canon::Null => out.push_str("null"),
            Canon::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Canon::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Canon::Fixed(v) => out.push_str(&format_fixed(*v)),
            Canon::Str(s) => write_string(s, out),
            Canon::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    item.write_to(out);
                }
                out.push(']');
            }
            Canon::Object(map) => {
                out.push('{');
                for (i, (k, v)) in map.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write_string(k, out);
                    out.push(':');
                    v.write_to(out);
                }
                out.push('}');
            }
        }
    }

    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        self.write_to(&mut out);
        out
    }
}

fn join_path(head: &str, rest: &str) -> String {
    if rest.is_empty() || rest.starts_with('[') {
        format!("{head}{rest}")
    } else {
        format!("{head}.{rest}")
    }
}

fn write_string(s: &str, out: &mut String) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_sorted_at_every_level() {
        let v = ObjectBuilder::new()
            .field("z", 1u32)
            .field("a", ObjectBuilder::new().field("c", true).field("b", Canon::Null).build())
            .build();
        assert_eq!(v.to_canonical_string(), r#"{"a":{"b":null,"c":true},"z":1}"#);
    }

    #[test]
    fn fixed_point_rounding_is_half_even() {
        // 1/32 and 3/32 sit exactly halfway at the fifth decimal
        assert_eq!(format_fixed(0.03125), "0.0312");
        assert_eq!(format_fixed(0.09375), "0.0938");
        assert_eq!(format_fixed(-0.03125), "-0.0312");
        assert_eq!(format_fixed(2.0), "2.0000");
        assert_eq!(format_fixed(-0.00001), "0.0000");
        assert_eq!(format_fixed(-0.0), "0.0000");
        assert_eq!(format_fixed(1234.56789), "1234.5679");
    }

    #[test]
    fn strings_are_escaped_utf8() {
        let v = Canon::Str("a\"b\\c\n✓".into());
        assert_eq!(v.to_canonical_string(), "\"a\\\"b\\\\c\\n✓\"");
    }

    #[test]
    fn non_finite_path() {
        let v = ObjectBuilder::new()
            .field("tracks", vec![ObjectBuilder::new().field("confidence", f64::NAN).build()])
            .build();
        assert_eq!(v.find_non_finite().as_deref(), Some("tracks[0].confidence"));
    }

    #[test]
    fn quantize_is_idempotent() {
        for x in [0.12345, -7.77777, 1e6 + 0.00005, 0.0] {
            let q = quantize(x);
            assert_eq!(quantize(q), q);
            assert_eq!(format_fixed(q), format_fixed(x));
        }
    }
}
