//! The framed envelope: the single message unit for inter-service traffic and
//! the subprocess wire protocol.
//!
//! A frame is a 4-byte big-endian length `N` followed by `N` bytes of UTF-8
//! JSON with exactly these keys, in this order:
//!
//! ```json
//! {"id":"..","corr":"..","src":"..","dst":"..","kind":"Request","ct":"application/json","body":"<base64>","ttl_ms":30000,"ts":1700000000000}
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{self, EpochMs};

/// Largest body accepted by the codec (16 MiB).
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

/// Largest frame payload a reader will allocate for. Base64 inflates the body
/// by 4/3; the rest is headroom for the other keys.
pub const MAX_FRAME_BYTES: usize = MAX_BODY_BYTES / 3 * 4 + 64 * 1024;

pub const DEFAULT_CONTENT_TYPE: &str = "application/json";
pub const DEFAULT_TTL_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Request,
    Reply,
    Event,
    Hello,
    Probe,
    ProbeOk,
    Heal,
    HealOk,
    HealFail,
}

impl Kind {
    pub const ALL: [Kind; 9] = [
        Kind::Request,
        Kind::Reply,
        Kind::Event,
        Kind::Hello,
        Kind::Probe,
        Kind::ProbeOk,
        Kind::Heal,
        Kind::HealOk,
        Kind::HealFail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Request => "Request",
            Kind::Reply => "Reply",
            Kind::Event => "Event",
            Kind::Hello => "Hello",
            Kind::Probe => "Probe",
            Kind::ProbeOk => "ProbeOk",
            Kind::Heal => "Heal",
            Kind::HealOk => "HealOk",
            Kind::HealFail => "HealFail",
        }
    }

    /// Kinds that answer an earlier envelope and must carry its id.
    pub fn is_response(self) -> bool {
        matches!(
            self,
            Kind::Reply | Kind::ProbeOk | Kind::HealOk | Kind::HealFail
        )
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CodecError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub id: String,
    /// Empty for fresh messages; the answered envelope's id on responses.
    pub correlation_id: String,
    pub source: String,
    /// A module id or a topic name.
    pub destination: String,
    pub kind: Kind,
    pub content_type: String,
    pub body: Vec<u8>,
    pub ttl_ms: u64,
    pub created_at: EpochMs,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("body of {0} bytes exceeds the 16 MiB limit")]
    BodyTooLarge(usize),
    #[error("frame truncated: declared {declared} bytes, {present} present")]
    Truncated { declared: usize, present: usize },
    #[error("frame length mismatch: declared {declared} bytes, {present} present")]
    LengthMismatch { declared: usize, present: usize },
    #[error("malformed envelope json: {0}")]
    MalformedJson(String),
    #[error("unknown envelope kind {0:?}")]
    UnknownKind(String),
    #[error("invalid envelope: {0}")]
    Invalid(&'static str),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique envelope id.
pub fn next_id(prefix: &str) -> String {
    let n = NEXT_ID.fetch_add(1, Ordering::Relaxed);
    format!("{prefix}-{}-{n}", std::process::id())
}

impl Envelope {
    pub fn new(kind: Kind, source: &str, destination: &str, body: Vec<u8>) -> Self {
        Self {
            id: next_id(source),
            correlation_id: String::new(),
            source: source.to_string(),
            destination: destination.to_string(),
            kind,
            content_type: DEFAULT_CONTENT_TYPE.to_string(),
            body,
            ttl_ms: DEFAULT_TTL_MS,
            created_at: clock::now_ms(),
        }
    }

    pub fn request(source: &str, destination: &str, body: Vec<u8>) -> Self {
        Self::new(Kind::Request, source, destination, body)
    }

    /// Builds a response of `kind` correlated with `self`.
    pub fn respond(&self, kind: Kind, body: Vec<u8>) -> Self {
        let mut env = Self::new(kind, &self.destination, &self.source, body);
        env.correlation_id = self.id.clone();
        env
    }

    pub fn reply(&self, body: Vec<u8>) -> Self {
        self.respond(Kind::Reply, body)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.ttl_ms == 0 {
            return Err(CodecError::Invalid("ttl_ms must be positive"));
        }
        if self.id.is_empty() {
            return Err(CodecError::Invalid("id must be non-empty"));
        }
        if self.kind == Kind::Reply && self.correlation_id.is_empty() {
            return Err(CodecError::Invalid("reply without correlation id"));
        }
        Ok(())
    }

    pub fn is_expired(&self, now: EpochMs) -> bool {
        now.saturating_sub(self.created_at) > self.ttl_ms
    }

    pub fn body_json<T: for<'de> Deserialize<'de>>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.body)
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    id: &'a str,
    corr: &'a str,
    src: &'a str,
    dst: &'a str,
    kind: &'static str,
    ct: &'a str,
    body: String,
    ttl_ms: u64,
    ts: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    id: String,
    corr: String,
    src: String,
    dst: String,
    kind: String,
    ct: String,
    body: String,
    ttl_ms: u64,
    ts: u64,
}

/// Serializes `env` into the JSON payload of a frame, without the length prefix.
pub fn encode_json(env: &Envelope) -> Result<Vec<u8>, CodecError> {
    if env.body.len() > MAX_BODY_BYTES {
        return Err(CodecError::BodyTooLarge(env.body.len()));
    }
    env.validate()?;
    let wire = WireOut {
        id: &env.id,
        corr: &env.correlation_id,
        src: &env.source,
        dst: &env.destination,
        kind: env.kind.as_str(),
        ct: &env.content_type,
        body: B64.encode(&env.body),
        ttl_ms: env.ttl_ms,
        ts: env.created_at,
    };
    serde_json::to_vec(&wire).map_err(|e| CodecError::MalformedJson(e.to_string()))
}

/// Encodes a complete frame: length prefix plus JSON payload.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, CodecError> {
    let json = encode_json(env)?;
    let mut frame = Vec::with_capacity(4 + json.len());
    frame.extend_from_slice(&(json.len() as u32).to_be_bytes());
    frame.extend_from_slice(&json);
    Ok(frame)
}

/// Decodes one complete frame. Trailing bytes beyond the declared length are
/// a `LengthMismatch`, missing ones are `Truncated`.
pub fn decode(frame: &[u8]) -> Result<Envelope, CodecError> {
    if frame.len() < 4 {
        return Err(CodecError::Truncated {
            declared: 4,
            present: frame.len(),
        });
    }
    let declared = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    let present = frame.len() - 4;
    if present < declared {
        return Err(CodecError::Truncated { declared, present });
    }
    if present > declared {
        return Err(CodecError::LengthMismatch { declared, present });
    }
    decode_json(&frame[4..])
}

/// Decodes a frame payload whose length prefix has already been consumed.
pub fn decode_json(json: &[u8]) -> Result<Envelope, CodecError> {
    let wire: WireIn =
        serde_json::from_slice(json).map_err(|e| CodecError::MalformedJson(e.to_string()))?;
    let kind: Kind = wire.kind.parse()?;
    let body = B64
        .decode(wire.body.as_bytes())
        .map_err(|e| CodecError::MalformedJson(format!("body is not base64: {e}")))?;
    if body.len() > MAX_BODY_BYTES {
        return Err(CodecError::BodyTooLarge(body.len()));
    }
    let env = Envelope {
        id: wire.id,
        correlation_id: wire.corr,
        source: wire.src,
        destination: wire.dst,
        kind,
        content_type: wire.ct,
        body,
        ttl_ms: wire.ttl_ms,
        created_at: wire.ts,
    };
    env.validate()?;
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Envelope {
        Envelope {
            id: "a-1".into(),
            correlation_id: String::new(),
            source: "kernel".into(),
            destination: "echo".into(),
            kind: Kind::Request,
            content_type: DEFAULT_CONTENT_TYPE.into(),
            body: Vec::new(),
            ttl_ms: 1000,
            created_at: 1_700_000_000_000,
        }
    }

    #[test]
    fn empty_body_frame_length_matches_json() {
        let frame = encode(&sample()).unwrap();
        let declared = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
        assert_eq!(declared, frame.len() - 4);
        let json = std::str::from_utf8(&frame[4..]).unwrap();
        assert_eq!(
            json,
            r#"{"id":"a-1","corr":"","src":"kernel","dst":"echo","kind":"Request","ct":"application/json","body":"","ttl_ms":1000,"ts":1700000000000}"#
        );
    }

    #[test]
    fn body_limit_boundary() {
        let mut env = sample();
        env.body = vec![0u8; MAX_BODY_BYTES + 1];
        assert_eq!(
            encode(&env),
            Err(CodecError::BodyTooLarge(MAX_BODY_BYTES + 1))
        );
        env.body.pop();
        let frame = encode(&env).unwrap();
        assert_eq!(decode(&frame).unwrap().body.len(), MAX_BODY_BYTES);
    }

    #[test]
    fn truncated_frame() {
        let mut frame = 10u32.to_be_bytes().to_vec();
        frame.extend_from_slice(&[b' '; 9]);
        assert_eq!(
            decode(&frame),
            Err(CodecError::Truncated {
                declared: 10,
                present: 9
            })
        );
        assert!(matches!(decode(&[0, 0]), Err(CodecError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_length_mismatch() {
        let mut frame = encode(&sample()).unwrap();
        frame.push(b' ');
        assert!(matches!(
            decode(&frame),
            Err(CodecError::LengthMismatch { .. })
        ));
    }

    fn frame_of(json: &str) -> Vec<u8> {
        let mut f = (json.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(json.as_bytes());
        f
    }

    #[test]
    fn unknown_kind_rejected() {
        let json = r#"{"id":"a","corr":"","src":"s","dst":"d","kind":"banana","ct":"application/json","body":"","ttl_ms":5,"ts":0}"#;
        assert_eq!(
            decode(&frame_of(json)),
            Err(CodecError::UnknownKind("banana".into()))
        );
    }

    #[test]
    fn extra_key_rejected() {
        let json = r#"{"id":"a","corr":"","src":"s","dst":"d","kind":"Event","ct":"application/json","body":"","ttl_ms":5,"ts":0,"evil":1}"#;
        assert!(matches!(
            decode(&frame_of(json)),
            Err(CodecError::MalformedJson(_))
        ));
    }

    #[test]
    fn missing_key_rejected() {
        let json = r#"{"id":"a","corr":"","src":"s","dst":"d","kind":"Event","ct":"application/json","body":"","ttl_ms":5}"#;
        assert!(matches!(
            decode(&frame_of(json)),
            Err(CodecError::MalformedJson(_))
        ));
    }

    #[test]
    fn reply_requires_correlation() {
        let mut env = sample();
        env.kind = Kind::Reply;
        assert!(matches!(encode(&env), Err(CodecError::Invalid(_))));
        let reply = sample().reply(b"ok".to_vec());
        assert_eq!(reply.correlation_id, "a-1");
        assert_eq!(decode(&encode(&reply).unwrap()).unwrap(), reply);
    }

    #[test]
    fn zero_ttl_rejected() {
        let mut env = sample();
        env.ttl_ms = 0;
        assert!(encode(&env).is_err());
    }
}
