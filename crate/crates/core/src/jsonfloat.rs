//! Serde adapters that keep non-finite floats through JSON, which has no
//! literal for them. Finite values stay numbers; others become `"inf"`,
//! `"-inf"` or `"nan"`.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

fn to_repr(v: f64) -> Repr {
    if v.is_finite() {
        Repr::Num(v)
    } else if v.is_nan() {
        Repr::Text("nan".into())
    } else if v > 0.0 {
        Repr::Text("inf".into())
    } else {
        Repr::Text("-inf".into())
    }
}

fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
    match r {
        Repr::Num(v) => Ok(v),
        Repr::Text(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            _ => Err(E::custom(format!("expected a number, `inf`, `-inf` or `nan`, got `{s}`"))),
        },
    }
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    to_repr(*v).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    from_repr(Repr::deserialize(d)?)
}

pub mod map {
    use super::*;

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k, to_repr(*v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        BTreeMap::<String, Repr>::deserialize(d)?
            .into_iter()
            .map(|(k, r)| from_repr(r).map(|v| (k, v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Serialize, Deserialize)]
    struct Probe {
        #[serde(with = "super")]
        x: f64,
        #[serde(with = "super::map")]
        m: BTreeMap<String, f64>,
    }

    #[test]
    fn non_finite_values_round_trip() {
        let p = Probe {
            x: f64::INFINITY,
            m: BTreeMap::from([("a".into(), 1.5), ("b".into(), f64::NAN), ("c".into(), f64::NEG_INFINITY)]),
        };
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"x":"inf","m":{"a":1.5,"b":"nan","c":"-inf"}}"#);
        let back: Probe = serde_json::from_str(&text).unwrap();
        assert_eq!(back.x, f64::INFINITY);
        assert!(back.m["b"].is_nan());
        assert_eq!(back.m["c"], f64::NEG_INFINITY);
        assert!(serde_json::from_str::<Probe>(r#"{"x":"big","m":{}}"#).is_err());
    }
}
