//! Line protocol between a solution adapter and the data shim. Requests
//! come from the adapter; every request gets exactly one response line,
//! `OK[ <payload>]` or `ERR <code> <message>`.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use thiserror::Error;

use crate::domain::{JobMode, Sex, SubjectId};

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    GetContext,
    GetSubjects,
    GetFeatures(SubjectId),
    GetLabels(SubjectId),
    GetModel,
    PutModel(Vec<u8>),
    PutPrediction {
        subject_id: SubjectId,
        p_presence: f64,
        p_severity: f64,
    },
    Log(String),
    Fail(String),
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Syntax,
    Denied,
    Mode,
    State,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Syntax => "SYNTAX",
            ErrorCode::Denied => "DENIED",
            ErrorCode::Mode => "MODE",
            ErrorCode::State => "STATE",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            ErrorCode::Syntax,
            ErrorCode::Denied,
            ErrorCode::Mode,
            ErrorCode::State,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Ok(String),
    Err(ErrorCode, String),
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Ok(payload) if payload.is_empty() => f.write_str("OK"),
            Response::Ok(payload) => write!(f, "OK {payload}"),
            Response::Err(code, message) => {
                write!(f, "ERR {} {}", code.as_str(), one_line(message))
            }
        }
    }
}

impl Response {
    pub fn parse(line: &str) -> Result<Self, ShimError> {
        if line == "OK" {
            return Ok(Response::Ok(String::new()));
        }
        if let Some(payload) = line.strip_prefix("OK ") {
            return Ok(Response::Ok(payload.to_owned()));
        }
        if let Some(rest) = line.strip_prefix("ERR ") {
            let (code, message) = rest.split_once(' ').unwrap_or((rest, ""));
            let code = ErrorCode::parse(code)
                .ok_or_else(|| ShimError::Protocol(format!("unknown error code in {line:?}")))?;
            return Ok(Response::Err(code, message.to_owned()));
        }
        Err(ShimError::Protocol(format!("malformed response {line:?}")))
    }
}

/// Newlines would end a protocol line early.
fn one_line(text: &str) -> String {
    text.replace(['\n', '\r'], " ")
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Request::GetContext => f.write_str("GET_CONTEXT"),
            Request::GetSubjects => f.write_str("GET_SUBJECTS"),
            Request::GetFeatures(id) => write!(f, "GET_FEATURES {id}"),
            Request::GetLabels(id) => write!(f, "GET_LABELS {id}"),
            Request::GetModel => f.write_str("GET_MODEL"),
            Request::PutModel(bytes) => write!(f, "PUT_MODEL {}", STANDARD.encode(bytes)),
            Request::PutPrediction {
                subject_id,
                p_presence,
                p_severity,
            } => write!(f, "PUT_PREDICTION {subject_id} {p_presence} {p_severity}"),
            Request::Log(text) => write!(f, "LOG {}", one_line(text)),
            Request::Fail(text) => write!(f, "FAIL {}", one_line(text)),
            Request::Done => f.write_str("DONE"),
        }
    }
}

impl Request {
    pub fn parse(line: &str) -> Result<Self, String> {
        let (verb, rest) = line.split_once(' ').unwrap_or((line, ""));
        let no_args = |req: Request| {
            if rest.is_empty() {
                Ok(req)
            } else {
                Err(format!("{verb} takes no arguments"))
            }
        };
        let one_id = || {
            if rest.is_empty() || rest.contains(char::is_whitespace) {
                Err(format!("{verb} takes one subject id"))
            } else {
                Ok(SubjectId::new(rest))
            }
        };
        match verb {
            "GET_CONTEXT" => no_args(Request::GetContext),
            "GET_SUBJECTS" => no_args(Request::GetSubjects),
            "GET_MODEL" => no_args(Request::GetModel),
            "DONE" => no_args(Request::Done),
            "GET_FEATURES" => one_id().map(Request::GetFeatures),
            "GET_LABELS" => one_id().map(Request::GetLabels),
            "PUT_MODEL" => STANDARD
                .decode(rest)
                .map(Request::PutModel)
                .map_err(|e| format!("PUT_MODEL payload is not base64: {e}")),
            "PUT_PREDICTION" => {
                let parts: Vec<&str> = rest.split(' ').collect();
                let [id, p1, p2] = parts[..] else {
                    return Err("PUT_PREDICTION takes <id> <p_presence> <p_severity>".into());
                };
                let number = |s: &str| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}"));
                Ok(Request::PutPrediction {
                    subject_id: SubjectId::new(id),
                    p_presence: number(p1)?,
                    p_severity: number(p2)?,
                })
            }
            "LOG" => Ok(Request::Log(rest.to_owned())),
            "FAIL" => Ok(Request::Fail(rest.to_owned())),
            other => Err(format!("unknown request {other:?}")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShimError {
    #[error("shim refused ({}): {message}", .code.as_str())]
    Refused { code: ErrorCode, message: String },
    #[error("shim protocol error: {0}")]
    Protocol(String),
    #[error("shim connection closed")]
    Closed,
}

/// Carries one request line and returns the response line.
pub trait Transport {
    fn call(&mut self, line: &str) -> Result<String, ShimError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobContext {
    pub mode: JobMode,
    pub seed: u64,
    pub workers: u32,
    pub scratch: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    pub age_bin: u8,
    pub sex: Sex,
    pub features: Vec<f64>,
}

/// Typed client over a [`Transport`], used by adapters.
pub struct Shim<'a> {
    transport: &'a mut dyn Transport,
}

impl<'a> Shim<'a> {
    pub fn new(transport: &'a mut dyn Transport) -> Self {
        Self { transport }
    }

    pub fn send(&mut self, request: &Request) -> Result<String, ShimError> {
        let line = self.transport.call(&request.to_string())?;
        match Response::parse(&line)? {
            Response::Ok(payload) => Ok(payload),
            Response::Err(code, message) => Err(ShimError::Refused { code, message }),
        }
    }

    pub fn context(&mut self) -> Result<JobContext, ShimError> {
        let payload = self.send(&Request::GetContext)?;
        let mut parts = payload.splitn(4, ' ');
        let bad = || ShimError::Protocol(format!("malformed context {payload:?}"));
        let mode = match parts.next() {
            Some("train") => JobMode::Train,
            Some("infer") => JobMode::Infer,
            _ => return Err(bad()),
        };
        let seed = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let workers = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let scratch = parts.next().ok_or_else(bad)?.to_owned();
        Ok(JobContext {
            mode,
            seed,
            workers,
            scratch,
        })
    }

    pub fn subjects(&mut self) -> Result<Vec<SubjectId>, ShimError> {
        Ok(self
            .send(&Request::GetSubjects)?
            .split_whitespace()
            .map(SubjectId::new)
            .collect())
    }

    pub fn features(&mut self, id: &SubjectId) -> Result<SubjectFeatures, ShimError> {
        let payload = self.send(&Request::GetFeatures(id.clone()))?;
        let mut parts = payload.split(' ');
        let bad = || ShimError::Protocol(format!("malformed features {payload:?}"));
        let age_bin = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let sex = parts.next().and_then(Sex::from_code).ok_or_else(bad)?;
        let features = parts
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        Ok(SubjectFeatures {
            age_bin,
            sex,
            features,
        })
    }

    /// `(rtpcr_positive, severe)`; train mode only.
    pub fn labels(&mut self, id: &SubjectId) -> Result<(bool, bool), ShimError> {
        let payload = self.send(&Request::GetLabels(id.clone()))?;
        match payload.as_str() {
            "0 0" => Ok((false, false)),
            "1 0" => Ok((true, false)),
            "0 1" => Ok((false, true)),
            "1 1" => Ok((true, true)),
            _ => Err(ShimError::Protocol(format!("malformed labels {payload:?}"))),
        }
    }

    pub fn model(&mut self) -> Result<Vec<u8>, ShimError> {
        let payload = self.send(&Request::GetModel)?;
        STANDARD
            .decode(payload)
            .map_err(|e| ShimError::Protocol(format!("model payload: {e}")))
    }

    pub fn put_model(&mut self, bytes: Vec<u8>) -> Result<(), ShimError> {
        self.send(&Request::PutModel(bytes)).map(drop)
    }

    pub fn put_prediction(
        &mut self,
        id: &SubjectId,
        p_presence: f64,
        p_severity: f64,
    ) -> Result<(), ShimError> {
        self.send(&Request::PutPrediction {
            subject_id: id.clone(),
            p_presence,
            p_severity,
        })
        .map(drop)
    }

    pub fn log(&mut self, text: impl Into<String>) -> Result<(), ShimError> {
        self.send(&Request::Log(text.into())).map(drop)
    }

    pub fn fail(&mut self, message: impl Into<String>) -> Result<(), ShimError> {
        self.send(&Request::Fail(message.into())).map(drop)
    }

    pub fn done(&mut self) -> Result<(), ShimError> {
        self.send(&Request::Done).map(drop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn requests_round_trip() {
        let requests = [
            Request::GetContext,
            Request::GetSubjects,
            Request::GetFeatures("s0001".into()),
            Request::GetLabels("s0002".into()),
            Request::GetModel,
            Request::PutModel(vec![0, 1, 2, 255]),
            Request::PutPrediction {
                subject_id: "s0003".into(),
                p_presence: 0.1,
                p_severity: 1.0 / 3.0,
            },
            Request::Log("epoch 1 done".into()),
            Request::Fail("out of memory".into()),
            Request::Done,
        ];
        for r in requests {
            assert_eq!(Request::parse(&r.to_string()).unwrap(), r);
        }
    }

    #[test]
    fn malformed_requests() {
        for line in [
            "",
            "HELLO",
            "GET_SUBJECTS x",
            "GET_FEATURES",
            "GET_FEATURES a b",
            "PUT_PREDICTION s1 0.5",
            "PUT_PREDICTION s1 x 0.5",
            "PUT_MODEL !!",
        ] {
            assert!(Request::parse(line).is_err(), "{line:?}");
        }
    }

    #[test]
    fn log_text_stays_on_one_line() {
        let line = Request::Log("a\nb".into()).to_string();
        assert_eq!(line, "LOG a b");
    }

    #[test]
    fn responses_round_trip() {
        for r in [
            Response::Ok(String::new()),
            Response::Ok("1 0".into()),
            Response::Err(ErrorCode::Denied, "s9 is not in this job's subset".into()),
        ] {
            assert_eq!(Response::parse(&r.to_string()).unwrap(), r);
        }
        assert!(Response::parse("MAYBE").is_err());
    }
}
