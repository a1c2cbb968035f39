//! Protocol v1 messages: one JSON object per line.
//!
//! ```text
//! {"v":1,"id":7,"op":"detect","model":"m0","requests":[{"image":"a.jpg","expression":"car","category_id":1}]}
//! {"v":1,"id":7,"ok":true,"groups":[[{"bbox":[x,y,w,h],"score":0.9}]]}
//! {"v":1,"id":8,"op":"finetune","model":"m0","dataset":"iter_0/dataset.json","config":{"focal":1.0,"l1":5.0,"giou":2.0,"epochs":12}}
//! {"v":1,"id":8,"ok":true,"model":"m1"}
//! {"v":1,"id":9,"ok":false,"error":{"kind":"unknown_model","message":"..."}}
//! ```
//!
//! Boxes on the wire are COCO `[x, y, w, h]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::FinetuneConfig;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireQuery {
    pub image: String,
    pub expression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireFinetuneConfig {
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub epochs: u32,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl From<&FinetuneConfig> for WireFinetuneConfig {
    fn from(c: &FinetuneConfig) -> Self {
        Self {
            focal: c.focal_loss_weight,
            l1: c.box_l1_weight,
            giou: c.giou_weight,
            epochs: c.epochs,
            extra: c.extra.clone(),
        }
    }
}

impl From<WireFinetuneConfig> for FinetuneConfig {
    fn from(w: WireFinetuneConfig) -> Self {
        Self {
            focal_loss_weight: w.focal,
            box_l1_weight: w.l1,
            giou_weight: w.giou,
            epochs: w.epochs,
            extra: w.extra,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Operation {
    Detect {
        model: String,
        requests: Vec<WireQuery>,
    },
    Finetune {
        model: String,
        dataset: String,
        config: WireFinetuneConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub v: u64,
    pub id: u64,
    #[serde(flatten)]
    pub op: Operation,
}

impl Request {
    pub fn new(id: u64, op: Operation) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            op,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(line.trim())
            .map_err(|e| Error::protocol("malformed", format!("not JSON: {e}")))?;
        check_version(&value)?;
        serde_json::from_value(value).map_err(|e| Error::protocol("malformed", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Groups(Vec<Vec<WireDetection>>),
    Model(String),
    Error(WireError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub v: u64,
    pub id: u64,
    pub reply: Reply,
}

fn check_version(value: &Value) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| Error::protocol("malformed", "message is not a JSON object"))?;
    match obj.get("v").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => Ok(()),
        Some(other) => Err(Error::protocol(
            "version",
            format!("unsupported protocol version {other}"),
        )),
        None => Err(Error::protocol("malformed", "missing protocol version 'v'")),
    }
}

impl Response {
    pub fn groups(id: u64, groups: Vec<Vec<WireDetection>>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            reply: Reply::Groups(groups),
        }
    }

    pub fn model(id: u64, model: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            reply: Reply::Model(model.into()),
        }
    }

    pub fn error(id: u64, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            id,
            reply: Reply::Error(WireError {
                kind: kind.into(),
                message: message.into(),
            }),
        }
    }

    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("v".into(), json!(self.v));
        obj.insert("id".into(), json!(self.id));
        match &self.reply {
            Reply::Groups(groups) => {
                obj.insert("ok".into(), json!(true));
                obj.insert("groups".into(), json!(groups));
            }
            Reply::Model(model) => {
                obj.insert("ok".into(), json!(true));
                obj.insert("model".into(), json!(model));
            }
            Reply::Error(err) => {
                obj.insert("ok".into(), json!(false));
                obj.insert("error".into(), json!(err));
            }
        }
        Value::Object(obj)
    }

    pub fn to_line(&self) -> String {
        self.to_value().to_string()
    }

    pub fn parse(line: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(line.trim())
            .map_err(|e| Error::protocol("malformed", format!("not JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        check_version(&value)?;
        let malformed = |m: &str| Error::protocol("malformed", m.to_string());
        let obj = value.as_object().expect("checked above");
        let id = obj
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed("missing or non-integer 'id'"))?;
        let ok = obj
            .get("ok")
            .and_then(Value::as_bool)
            .ok_or_else(|| malformed("missing boolean 'ok'"))?;
        let field = |key: &str| obj.get(key).cloned();
        let reply = if ok {
            match (field("groups"), field("model")) {
                (Some(groups), None) => Reply::Groups(
                    serde_json::from_value(groups)
                        .map_err(|e| Error::protocol("malformed", format!("groups: {e}")))?,
                ),
                (None, Some(Value::String(model))) => Reply::Model(model),
                (None, Some(_)) => return Err(malformed("'model' must be a string")),
                (Some(_), Some(_)) => return Err(malformed("both 'groups' and 'model' present")),
                (None, None) => return Err(malformed("success reply carries no payload")),
            }
        } else {
            let err = field("error").ok_or_else(|| malformed("error reply without 'error'"))?;
            Reply::Error(
                serde_json::from_value(err)
                    .map_err(|e| Error::protocol("malformed", format!("error: {e}")))?,
            )
        };
        Ok(Self {
            v: PROTOCOL_VERSION,
            id,
            reply,
        })
    }
}

/// Reads the correlation id from a possibly malformed message, if any.
pub fn peek_id(line: &str) -> Option<u64> {
    serde_json::from_str::<Value>(line)
        .ok()?
        .get("id")?
        .as_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detect_request_shape() {
        let req = Request::new(
            3,
            Operation::Detect {
                model: "m0".into(),
                requests: vec![WireQuery {
                    image: "a.jpg".into(),
                    expression: "small kick scooter".into(),
                    category_id: Some(13),
                }],
            },
        );
        let v: Value = serde_json::from_str(&req.to_line()).unwrap();
        assert_eq!(
            v,
            json!({"v":1,"id":3,"op":"detect","model":"m0",
                   "requests":[{"image":"a.jpg","expression":"small kick scooter","category_id":13}]})
        );
        assert_eq!(Request::parse(&req.to_line()).unwrap(), req);
    }

    #[test]
    fn finetune_defaults_on_wire() {
        let req = Request::new(
            1,
            Operation::Finetune {
                model: "m0".into(),
                dataset: "d.json".into(),
                config: (&FinetuneConfig::default()).into(),
            },
        );
        let v: Value = serde_json::from_str(&req.to_line()).unwrap();
        assert_eq!(v["op"], "finetune");
        assert_eq!(v["config"]["focal"], 1.0);
        assert_eq!(v["config"]["l1"], 5.0);
        assert_eq!(v["config"]["giou"], 2.0);
    }

    #[test]
    fn extra_config_is_flattened() {
        let mut cfg = FinetuneConfig::default();
        cfg.extra.insert("lr".into(), json!(1e-4));
        let wire = WireFinetuneConfig::from(&cfg);
        let v = serde_json::to_value(&wire).unwrap();
        assert_eq!(v["lr"], 1e-4);
        let back: WireFinetuneConfig = serde_json::from_value(v).unwrap();
        assert_eq!(FinetuneConfig::from(back), cfg);
    }

    #[test]
    fn response_shapes() {
        let r = Response::groups(5, vec![vec![], vec![WireDetection { bbox: [1., 2., 3., 4.], score: 0.5 }]]);
        assert_eq!(
            r.to_value(),
            json!({"v":1,"id":5,"ok":true,"groups":[[],[{"bbox":[1.0,2.0,3.0,4.0],"score":0.5}]]})
        );
        let e = Response::error(6, "unknown_model", "no such model");
        assert_eq!(
            e.to_value(),
            json!({"v":1,"id":6,"ok":false,"error":{"kind":"unknown_model","message":"no such model"}})
        );
        for r in [r, e, Response::model(7, "m1")] {
            assert_eq!(Response::parse(&r.to_line()).unwrap(), r);
        }
    }

    #[test]
    fn malformed_messages_are_typed_errors() {
        let cases = [
            "",
            "not json",
            "[1,2]",
            r#"{"id":1,"ok":true,"model":"m"}"#,
            r#"{"v":2,"id":1,"ok":true,"model":"m"}"#,
            r#"{"v":1,"ok":true,"model":"m"}"#,
            r#"{"v":1,"id":1,"ok":true}"#,
            r#"{"v":1,"id":1,"ok":true,"groups":[[{"bbox":[1,2],"score":0.1}]]}"#,
            r#"{"v":1,"id":1,"ok":false}"#,
        ];
        for line in cases {
            assert!(
                matches!(Response::parse(line), Err(Error::Protocol { .. })),
                "{line}"
            );
            assert!(matches!(Request::parse(line), Err(Error::Protocol { .. })));
        }
        let version = Response::parse(r#"{"v":2,"id":1,"ok":true,"model":"m"}"#).unwrap_err();
        assert!(matches!(version, Error::Protocol { ref kind, .. } if kind == "version"));
        assert!(matches!(
            Request::parse(r#"{"v":1,"id":1,"op":"explode","model":"m"}"#),
            Err(Error::Protocol { .. })
        ));
    }
}
