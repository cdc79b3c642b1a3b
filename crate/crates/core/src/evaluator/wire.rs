//! Newline-delimited JSON protocol spoken with external evaluator processes.
//!
//! ```text
//! request:  {"id": u64, "type": "meta" | "evaluate" | "distribution",
//!            "config": {"bits": [..], "ranks": [..]}?, "proxy_steps": int?,
//!            "calib_index": int?, "layer": int?, "bit": int?}
//! response: {"id": u64, "ok": bool, "performance": float?, "dist": [float]?,
//!            "meta": {"layers": int, "calib_size": int, "geometry": [..]}?,
//!            "error": string?}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Evaluator, EvaluatorMeta, Perturbation};
use crate::error::{Error, Result};
use crate::space::{LayerGeometry, ModelConfig, ModelGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestType {
    Meta,
    Evaluate,
    Distribution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(rename = "type")]
    pub kind: RequestType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit: Option<u32>,
}

impl Request {
    pub fn meta(id: u64) -> Self {
        Self {
            id,
            kind: RequestType::Meta,
            config: None,
            proxy_steps: None,
            calib_index: None,
            layer: None,
            bit: None,
        }
    }

    pub fn evaluate(id: u64, config: ModelConfig, proxy_steps: u32) -> Self {
        Self {
            config: Some(config),
            proxy_steps: Some(proxy_steps),
            kind: RequestType::Evaluate,
            ..Self::meta(id)
        }
    }

    pub fn distribution(id: u64, calib_index: usize, perturbation: Option<Perturbation>) -> Self {
        Self {
            kind: RequestType::Distribution,
            calib_index: Some(calib_index),
            layer: perturbation.map(|p| p.layer),
            bit: perturbation.map(|p| p.bit),
            ..Self::meta(id)
        }
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol {
            message: format!("malformed request: {e}"),
            payload: line.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMeta {
    pub layers: usize,
    pub calib_size: usize,
    pub geometry: Vec<LayerGeometry>,
}

impl WireMeta {
    /// Validates the handshake and converts it to [`EvaluatorMeta`]; adapters
    /// are priced at the default 2 bytes per parameter.
    pub fn into_meta(self) -> Result<EvaluatorMeta> {
        if self.layers == 0 || self.geometry.len() != self.layers {
            return Err(Error::InvalidGeometry(format!(
                "meta reports {} layers but {} geometry entries",
                self.layers,
                self.geometry.len()
            )));
        }
        if self.calib_size == 0 {
            return Err(Error::InvalidGeometry("meta reports calib_size 0".into()));
        }
        let geometry = ModelGeometry::new(self.geometry);
        geometry.validate()?;
        Ok(EvaluatorMeta {
            layers: self.layers,
            calib_size: self.calib_size,
            geometry,
        })
    }
}

impl From<&EvaluatorMeta> for WireMeta {
    fn from(m: &EvaluatorMeta) -> Self {
        Self {
            layers: m.layers,
            calib_size: m.calib_size,
            geometry: m.geometry.layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub performance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<WireMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn failure(id: u64, error: impl Into<String>) -> Self {
        Self {
            id,
            ok: false,
            performance: None,
            dist: None,
            meta: None,
            error: Some(error.into()),
        }
    }

    fn success(id: u64) -> Self {
        Self {
            ok: true,
            error: None,
            ..Self::failure(id, "")
        }
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Protocol {
            message: format!("malformed response: {e}"),
            payload: line.to_string(),
        })
    }

    fn check_ok(&self) -> Result<()> {
        if self.ok {
            Ok(())
        } else {
            Err(Error::Evaluator(
                self.error
                    .clone()
                    .unwrap_or_else(|| "unspecified evaluator error".into()),
            ))
        }
    }

    fn missing(&self, field: &str) -> Error {
        Error::Protocol {
            message: format!("ok response is missing \"{field}\""),
            payload: serde_json::to_string(self).unwrap_or_default(),
        }
    }

    pub fn into_performance(self) -> Result<f64> {
        self.check_ok()?;
        self.performance.ok_or_else(|| self.missing("performance"))
    }

    pub fn into_dist(self) -> Result<Vec<f64>> {
        self.check_ok()?;
        match self.dist {
            Some(d) => Ok(d),
            None => Err(self.missing("dist")),
        }
    }

    pub fn into_meta(self) -> Result<WireMeta> {
        self.check_ok()?;
        match self.meta {
            Some(m) => Ok(m),
            None => Err(self.missing("meta")),
        }
    }
}

/// Answers one request from `evaluator`. Contract violations become error
/// responses, never panics.
pub fn handle_request(evaluator: &dyn Evaluator, req: &Request) -> Response {
    let result = match req.kind {
        RequestType::Meta => {
            let mut r = Response::success(req.id);
            r.meta = Some(WireMeta::from(evaluator.meta()));
            return r;
        }
        RequestType::Evaluate => match &req.config {
            None => Err(Error::InvalidParameter("evaluate request without config".into())),
            Some(c) if c.len() != evaluator.meta().layers => Err(Error::LengthMismatch {
                config: c.len(),
                geometry: evaluator.meta().layers,
            }),
            Some(c) => evaluator
                .evaluate(c, req.proxy_steps.unwrap_or(super::synthetic::FULL_PROXY_STEPS))
                .map(|p| {
                    let mut r = Response::success(req.id);
                    r.performance = Some(p);
                    r
                }),
        },
        RequestType::Distribution => {
            let perturbation = match (req.layer, req.bit) {
                (Some(layer), Some(bit)) => Ok(Some(Perturbation { layer, bit })),
                (None, None) => Ok(None),
                _ => Err(Error::InvalidParameter(
                    "layer and bit must be given together".into(),
                )),
            };
            match (req.calib_index, perturbation) {
                (None, _) => Err(Error::InvalidParameter(
                    "distribution request without calib_index".into(),
                )),
                (_, Err(e)) => Err(e),
                (Some(i), Ok(p)) => evaluator.distribution(i, p).map(|d| {
                    let mut r = Response::success(req.id);
                    r.dist = Some(d);
                    r
                }),
            }
        }
    };
    result.unwrap_or_else(|e| Response::failure(req.id, e.to_string()))
}

/// Serves `evaluator` over a line-oriented stream until `input` closes.
pub fn serve(evaluator: &dyn Evaluator, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match Request::parse_line(&line) {
            Ok(req) => handle_request(evaluator, &req),
            Err(e) => {
                // best effort at echoing the id back
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                Response::failure(id, e.to_string())
            }
        };
        serde_json::to_writer(&mut output, &resp)?;
        output
            .write_all(b"\n")
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{SyntheticModel, SyntheticParams};
    use crate::space::{LayerConfig, SearchSpace};

    fn synthetic() -> SyntheticModel {
        SyntheticModel::new(SyntheticParams {
            layers: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn request_field_names() {
        let c = ModelConfig::new(vec![LayerConfig::new(4, 8)]);
        let s = serde_json::to_string(&Request::evaluate(7, c, 3)).unwrap();
        assert_eq!(
            s,
            r#"{"id":7,"type":"evaluate","config":{"bits":[4],"ranks":[8]},"proxy_steps":3}"#
        );
        let s = serde_json::to_string(&Request::distribution(
            1,
            2,
            Some(Perturbation { layer: 0, bit: 2 }),
        ))
        .unwrap();
        assert_eq!(
            s,
            r#"{"id":1,"type":"distribution","calib_index":2,"layer":0,"bit":2}"#
        );
        assert_eq!(
            serde_json::to_string(&Request::meta(0)).unwrap(),
            r#"{"id":0,"type":"meta"}"#
        );
    }

    #[test]
    fn meta_handshake() {
        let m = synthetic();
        let r = handle_request(&m, &Request::meta(5));
        assert_eq!(r.id, 5);
        let meta = r.into_meta().unwrap().into_meta().unwrap();
        assert_eq!(meta.layers, 3);
        assert_eq!(meta.geometry, m.meta().geometry);
    }

    #[test]
    fn evaluate_and_length_violation() {
        let m = synthetic();
        let space = SearchSpace::default();
        let ok = handle_request(&m, &Request::evaluate(1, space.max_config(3), 10));
        assert!(ok.into_performance().unwrap().is_finite());
        let bad = handle_request(&m, &Request::evaluate(2, space.max_config(4), 10));
        assert!(!bad.ok);
        assert_eq!(bad.id, 2);
        assert!(bad.into_performance().is_err());
    }

    #[test]
    fn ok_response_missing_field_is_protocol_error() {
        let r = Response::parse_line(r#"{"id":3,"ok":true}"#).unwrap();
        assert!(matches!(r.into_performance(), Err(Error::Protocol { .. })));
        assert!(Response::parse_line("not json").is_err());
    }

    #[test]
    fn serve_stream() {
        let m = synthetic();
        let input = concat!(
            r#"{"id":1,"type":"meta"}"#,
            "\n",
            "garbage\n",
            r#"{"id":9,"type":"bogus"}"#,
            "\n",
            r#"{"id":4,"type":"distribution","calib_index":0}"#,
            "\n",
        );
        let mut out = Vec::new();
        serve(&m, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<Response> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| Response::parse_line(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].ok);
        assert!(!lines[1].ok);
        assert_eq!(lines[2].id, 9);
        assert!(!lines[2].ok);
        assert_eq!(lines[3].dist.as_ref().unwrap().len(), 16);
    }
}
