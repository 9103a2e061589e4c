//! Message payloads: a body carried inline or by reference, plus string
//! metadata.
//!
//! ```text
//! tag u8 (0 inline, 1 ref)
//!   inline: len u32 BE | bytes
//!   ref:    connector u16+utf8 | key u16+utf8 | size u64 BE | sha256 [32]
//! meta count u16 BE, then per pair: key u16+utf8 | value u32+utf8
//! ```

use std::collections::BTreeMap;

use fedhub_core::compression::{compress_params, decompress_params, CodecConfig, CompressedBlob, CompressionError};
use fedhub_core::wire::{ByteReader, Truncated};
use fedhub_core::{deserialize_params, serialize_params, ParamError, ParameterSet};
use thiserror::Error;

use crate::connector::{ConnectorError, ConnectorRegistry, DataConnector, DataRef};

pub const DEFAULT_INLINE_LIMIT: usize = 10 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("body of {len} bytes exceeds the inline limit {limit} and no connector is configured")]
    NeedsConnector { len: usize, limit: usize },
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
}

impl From<Truncated> for EnvelopeError {
    fn from(t: Truncated) -> Self {
        EnvelopeError::Malformed(format!("truncated at byte {}", t.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Inline(Vec<u8>),
    Ref(DataRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Envelope {
    pub body: Option<Body>,
    pub meta: BTreeMap<String, String>,
}

impl Envelope {
    pub fn meta_only(meta: BTreeMap<String, String>) -> Self {
        Self { body: Some(Body::Inline(Vec::new())), meta }
    }

    /// Inline when `bytes.len() <= inline_limit`, otherwise parked in `connector`.
    pub fn pack(
        bytes: Vec<u8>,
        meta: BTreeMap<String, String>,
        connector: Option<&dyn DataConnector>,
        inline_limit: usize,
    ) -> Result<Self, EnvelopeError> {
        let body = if bytes.len() <= inline_limit {
            Body::Inline(bytes)
        } else {
            let c = connector.ok_or(EnvelopeError::NeedsConnector { len: bytes.len(), limit: inline_limit })?;
            Body::Ref(c.put(&bytes)?)
        };
        Ok(Self { body: Some(body), meta })
    }

    pub fn is_inline(&self) -> bool {
        matches!(self.body, Some(Body::Inline(_)))
    }

    pub fn body_bytes(&self, connectors: &ConnectorRegistry) -> Result<Vec<u8>, EnvelopeError> {
        match &self.body {
            Some(Body::Inline(b)) => Ok(b.clone()),
            Some(Body::Ref(r)) => Ok(connectors.resolve(r)?),
            None => Ok(Vec::new()),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, EnvelopeError> {
        self.get(key)
            .ok_or_else(|| EnvelopeError::Malformed(format!("missing meta `{key}`")))?
            .parse()
            .map_err(|_| EnvelopeError::Malformed(format!("bad meta `{key}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        fn short_str(out: &mut Vec<u8>, s: &str) {
            out.extend_from_slice(&(s.len() as u16).to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        let mut out = Vec::new();
        match &self.body {
            None => out.extend_from_slice(&[0, 0, 0, 0, 0]),
            Some(Body::Inline(b)) => {
                out.push(0);
                out.extend_from_slice(&(b.len() as u32).to_be_bytes());
                out.extend_from_slice(b);
            }
            Some(Body::Ref(r)) => {
                out.push(1);
                short_str(&mut out, &r.connector_id);
                short_str(&mut out, &r.key);
                out.extend_from_slice(&r.size.to_be_bytes());
                out.extend_from_slice(&r.sha256);
            }
        }
        out.extend_from_slice(&(self.meta.len() as u16).to_be_bytes());
        for (k, v) in &self.meta {
            short_str(&mut out, k);
            out.extend_from_slice(&(v.len() as u32).to_be_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        fn utf8(b: &[u8]) -> Result<String, EnvelopeError> {
            String::from_utf8(b.to_vec()).map_err(|_| EnvelopeError::Malformed("invalid utf-8".into()))
        }
        let mut r = ByteReader::new(bytes);
        let body = match r.u8()? {
            0 => {
                let n = r.u32()? as usize;
                Body::Inline(r.take(n)?.to_vec())
            }
            1 => {
                let n = r.u16()? as usize;
                let connector_id = utf8(r.take(n)?)?;
                let n = r.u16()? as usize;
                let key = utf8(r.take(n)?)?;
                let size = r.u64()?;
                let sha256 = r.take(32)?.try_into().expect("32 bytes");
                Body::Ref(DataRef { connector_id, key, size, sha256 })
            }
            t => return Err(EnvelopeError::Malformed(format!("unknown body tag {t}"))),
        };
        let count = r.u16()?;
        let mut meta = BTreeMap::new();
        for _ in 0..count {
            let n = r.u16()? as usize;
            let k = utf8(r.take(n)?)?;
            let n = r.u32()? as usize;
            let v = utf8(r.take(n)?)?;
            meta.insert(k, v);
        }
        if r.remaining() != 0 {
            return Err(EnvelopeError::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { body: Some(body), meta })
    }
}

/// Meta key naming the body encoding of a parameter set.
pub const CODEC_KEY: &str = "codec";

/// Encodes parameters for transport, compressed when `codec` is given.
pub fn encode_params(
    p: &ParameterSet,
    codec: Option<&CodecConfig>,
    meta: &mut BTreeMap<String, String>,
) -> Result<Vec<u8>, EnvelopeError> {
    match codec {
        Some(cfg) => {
            meta.insert(CODEC_KEY.into(), "compressed".into());
            Ok(compress_params(p, cfg)?.into_bytes())
        }
        None => {
            meta.insert(CODEC_KEY.into(), "raw".into());
            Ok(serialize_params(p)?)
        }
    }
}

pub fn decode_params(bytes: Vec<u8>, meta: &BTreeMap<String, String>) -> Result<ParameterSet, EnvelopeError> {
    match meta.get(CODEC_KEY).map(String::as_str) {
        Some("compressed") => Ok(decompress_params(&CompressedBlob::from_bytes(bytes), &CodecConfig::default())?),
        Some("raw") | None => Ok(deserialize_params(&bytes)?),
        Some(other) => Err(EnvelopeError::Malformed(format!("unknown body codec `{other}`"))),
    }
}
