//! Parameter compression: small tensors go through a lossless byte codec,
//! large ones through `qz`, an error-bounded uniform quantizer whose packed
//! indices are then handed to the lossless codec.
//!
//! Blob layout: entry count (u32 BE), then per tensor the usual tensor header
//! followed by a scheme tag and its record, and a CRC-32 (u32 BE) trailer.
//!
//! | scheme | record |
//! |--------|--------|
//! | 0 raw | payload len (u32), little-endian elements |
//! | 1 lossless | codec (u8), payload len, payload |
//! | 2 qz | min (f64), bin width (f64), bits (u8), codec (u8), payload len, payload |
//!
//! The qz bin width is a power of two picked so that `round(range / w)`
//! lands in a fixed bracket. Decompressed values therefore quantize back to
//! the same indices and recompression reproduces the blob byte for byte.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{
    check_header, decode_elements, element_count, read_tensor_header, serialized_len, write_tensor_header, DType,
    ParamError, ParameterSet, Tensor,
};
use crate::wire::ByteReader;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompressionError {
    #[error("tensor `{0}` contains NaN or infinite values")]
    NonFiniteValue(String),
    #[error("corrupt blob: {0}")]
    CorruptBlob(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("unknown codec `{0}`")]
    UnknownCodec(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

fn corrupt(msg: impl Into<String>) -> CompressionError {
    CompressionError::CorruptBlob(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum LosslessCodec {
    None,
    Rle,
    #[default]
    Deflate,
}

impl LosslessCodec {
    /// Accepts `none`, `rle` and general-purpose codec names, which all map
    /// to deflate.
    pub fn from_name(name: &str) -> Result<Self, CompressionError> {
        match name.to_ascii_lowercase().as_str() {
            "none" | "raw" => Ok(Self::None),
            "rle" => Ok(Self::Rle),
            "deflate" | "zlib" | "gzip" | "blosc" | "zstd" | "bloscompressor" => Ok(Self::Deflate),
            _ => Err(CompressionError::UnknownCodec(name.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Rle => "rle",
            Self::Deflate => "deflate",
        }
    }

    fn id(self) -> u8 {
        match self {
            Self::None => 0,
            Self::Rle => 1,
            Self::Deflate => 2,
        }
    }

    fn from_id(id: u8) -> Result<Self, CompressionError> {
        match id {
            0 => Ok(Self::None),
            1 => Ok(Self::Rle),
            2 => Ok(Self::Deflate),
            _ => Err(corrupt(format!("unknown codec id {id}"))),
        }
    }
}

impl TryFrom<String> for LosslessCodec {
    type Error = CompressionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::from_name(&s)
    }
}

impl From<LosslessCodec> for String {
    fn from(c: LosslessCodec) -> Self {
        c.name().to_string()
    }
}

/// Lossy compressor names from external toolkits resolve to `qz`.
pub const LOSSY_ALIASES: &[(&str, LossyCodec)] = &[
    ("qz", LossyCodec::Qz),
    ("SZ2Compressor", LossyCodec::Qz),
    ("SZ3Compressor", LossyCodec::Qz),
    ("SZxCompressor", LossyCodec::Qz),
    ("ZFPCompressor", LossyCodec::Qz),
    ("none", LossyCodec::None),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum LossyCodec {
    None,
    #[default]
    Qz,
}

impl LossyCodec {
    pub fn from_name(name: &str) -> Result<Self, CompressionError> {
        LOSSY_ALIASES
            .iter()
            .find(|(alias, _)| alias.eq_ignore_ascii_case(name))
            .map(|&(_, c)| c)
            .ok_or_else(|| CompressionError::UnknownCodec(name.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Qz => "qz",
        }
    }
}

impl TryFrom<String> for LossyCodec {
    type Error = CompressionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::from_name(&s)
    }
}

impl From<LossyCodec> for String {
    fn from(c: LossyCodec) -> Self {
        c.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub lossless: LosslessCodec,
    pub lossy: LossyCodec,
    pub eb_rel: f64,
    pub small_tensor_threshold: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { lossless: LosslessCodec::Deflate, lossy: LossyCodec::Qz, eb_rel: 0.01, small_tensor_threshold: 1024 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CompressionError> {
        if !(self.eb_rel > 0.0 && self.eb_rel < 1.0) {
            return Err(CompressionError::InvalidConfig(format!("eb_rel must be in (0, 1), got {}", self.eb_rel)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Raw = 0,
    Lossless = 1,
    Lossy = 2,
}

impl Scheme {
    fn from_tag(tag: u8) -> Result<Self, CompressionError> {
        match tag {
            0 => Ok(Self::Raw),
            1 => Ok(Self::Lossless),
            2 => Ok(Self::Lossy),
            _ => Err(corrupt(format!("unknown scheme tag {tag}"))),
        }
    }
}

/// Summary of one tensor record inside a blob.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordInfo {
    pub name: String,
    pub scheme: Scheme,
    pub codec: LosslessCodec,
    pub bits: u8,
    pub payload_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedBlob {
    bytes: Vec<u8>,
}

impl CompressedBlob {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn records(&self) -> Result<Vec<RecordInfo>, CompressionError> {
        Ok(parse(&self.bytes)?
            .into_iter()
            .map(|r| RecordInfo {
                name: r.name,
                scheme: r.scheme,
                codec: r.codec,
                bits: r.bits,
                payload_len: r.payload.len(),
            })
            .collect())
    }
}

fn rle_encode(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let mut run = 1;
        while run < 255 && i + run < bytes.len() && bytes[i + run] == b {
            run += 1;
        }
        out.push(run as u8);
        out.push(b);
        i += run;
    }
    out
}

fn rle_decode(bytes: &[u8], expected: usize) -> Result<Vec<u8>, CompressionError> {
    if bytes.len() % 2 != 0 {
        return Err(corrupt("odd rle payload"));
    }
    let mut out = Vec::with_capacity(expected);
    for pair in bytes.chunks_exact(2) {
        if pair[0] == 0 || out.len() + pair[0] as usize > expected {
            return Err(corrupt("bad rle run"));
        }
        out.extend(std::iter::repeat_n(pair[1], pair[0] as usize));
    }
    Ok(out)
}

/// Runs `codec` over `bytes`, storing them uncompressed when it does not help.
fn encode_bytes(codec: LosslessCodec, bytes: Vec<u8>) -> (LosslessCodec, Vec<u8>) {
    let packed = match codec {
        LosslessCodec::None => return (LosslessCodec::None, bytes),
        LosslessCodec::Rle => rle_encode(&bytes),
        LosslessCodec::Deflate => {
            let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&bytes).expect("writing to a Vec");
            enc.finish().expect("writing to a Vec")
        }
    };
    if packed.len() < bytes.len() {
        (codec, packed)
    } else {
        (LosslessCodec::None, bytes)
    }
}

fn decode_bytes(codec: LosslessCodec, payload: &[u8], expected: usize) -> Result<Vec<u8>, CompressionError> {
    let out = match codec {
        LosslessCodec::None => payload.to_vec(),
        LosslessCodec::Rle => rle_decode(payload, expected)?,
        LosslessCodec::Deflate => {
            let mut out = Vec::with_capacity(expected);
            DeflateDecoder::new(payload)
                .take(expected as u64 + 1)
                .read_to_end(&mut out)
                .map_err(|e| corrupt(format!("deflate: {e}")))?;
            out
        }
    };
    if out.len() != expected {
        return Err(corrupt(format!("decoded {} bytes, expected {expected}", out.len())));
    }
    Ok(out)
}

fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

#[derive(Debug, PartialEq)]
struct Quantized {
    min: f64,
    w: f64,
    bits: u8,
    indices: Vec<u64>,
}

/// Power-of-two bin width with `round(r / w)` in `[c, 2c)`, where
/// `c = ceil(1 / (2 eb) + 1/2)` keeps `w / 2 ≤ eb · r`.
fn bin_width(r: f64, eb: f64) -> Option<f64> {
    let c = (0.5 / eb + 0.5).ceil();
    if !(c < 2f64.powi(52)) {
        return None;
    }
    let q = |e: i32| (r / pow2(e)).round();
    let mut e = ((r / c).log2().floor() as i32).clamp(-1022, 1023);
    while q(e) >= 2.0 * c {
        if e == 1023 {
            return None;
        }
        e += 1;
    }
    while e > -1022 && q(e - 1) < 2.0 * c {
        e -= 1;
    }
    (q(e) >= c).then(|| pow2(e))
}

fn quantize(values: &[f64], eb: f64) -> Option<Quantized> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r = max - min;
    if !r.is_finite() {
        return None;
    }
    if r == 0.0 {
        return Some(Quantized { min, w: 0.0, bits: 0, indices: Vec::new() });
    }
    let w = bin_width(r, eb)?;
    let indices: Vec<u64> = values.iter().map(|&x| ((x - min) / w).round() as u64).collect();
    let max_k = indices.iter().copied().max().unwrap_or(0);
    let bits = (64 - max_k.leading_zeros()).max(1) as u8;
    Some(Quantized { min, w, bits, indices })
}

fn dequantize(dtype: DType, shape: Vec<usize>, q: &Quantized, n: usize) -> Tensor {
    let values = (0..n).map(|i| if q.bits == 0 { q.min } else { q.min + q.indices[i] as f64 * q.w });
    Tensor::from_values(dtype, shape, values).expect("shape already validated")
}

fn pack(indices: &[u64], bits: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity((indices.len() * bits as usize).div_ceil(8));
    let mut acc: u128 = 0;
    let mut filled = 0u32;
    for &k in indices {
        acc |= (k as u128) << filled;
        filled += u32::from(bits);
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

fn unpack(bytes: &[u8], bits: u8, n: usize) -> Vec<u64> {
    let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
    let mut out = Vec::with_capacity(n);
    let mut acc: u128 = 0;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    while out.len() < n {
        while filled < u32::from(bits) {
            acc |= (*it.next().unwrap_or(&0) as u128) << filled;
            filled += 8;
        }
        out.push(acc as u64 & mask);
        acc >>= bits;
        filled -= u32::from(bits);
    }
    out
}

fn raw_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * t.dtype().size());
    t.write_le(&mut out).expect("writing to a Vec");
    out
}

/// Quantizes `t` if the result honours the error bound in the tensor's own
/// dtype and is a fixed point of quantize-then-dequantize.
fn try_lossy(t: &Tensor, eb: f64) -> Option<Quantized> {
    let values = t.to_f64_vec();
    let q = quantize(&values, eb)?;
    let range = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) - q.min;
    let rec = dequantize(t.dtype(), t.shape().to_vec(), &q, values.len()).to_f64_vec();
    if rec.iter().zip(&values).any(|(a, b)| (a - b).abs() > eb * range) {
        return None;
    }
    (quantize(&rec, eb)? == q).then_some(q)
}

pub fn compress_params(p: &ParameterSet, cfg: &CodecConfig) -> Result<CompressedBlob, CompressionError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(serialized_len(p) / 3 + 64);
    out.extend_from_slice(&(p.len() as u32).to_be_bytes());
    for (name, t) in p.iter() {
        check_header(name, t)?;
        if t.values().any(|v| !v.is_finite()) {
            return Err(CompressionError::NonFiniteValue(name.to_string()));
        }
        write_tensor_header(&mut out, name, t).expect("writing to a Vec");
        let lossy = (t.len() >= cfg.small_tensor_threshold && cfg.lossy == LossyCodec::Qz)
            .then(|| try_lossy(t, cfg.eb_rel))
            .flatten();
        match lossy {
            Some(q) => {
                let (codec, payload) = if q.bits == 0 {
                    (LosslessCodec::None, Vec::new())
                } else {
                    encode_bytes(cfg.lossless, pack(&q.indices, q.bits))
                };
                out.push(Scheme::Lossy as u8);
                out.extend_from_slice(&q.min.to_be_bytes());
                out.extend_from_slice(&q.w.to_be_bytes());
                out.push(q.bits);
                out.push(codec.id());
                out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
                out.extend_from_slice(&payload);
            }
            None if cfg.lossless == LosslessCodec::None => {
                let payload = raw_bytes(t);
                out.push(Scheme::Raw as u8);
                out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
                out.extend_from_slice(&payload);
            }
            None => {
                let (codec, payload) = encode_bytes(cfg.lossless, raw_bytes(t));
                out.push(Scheme::Lossless as u8);
                out.push(codec.id());
                out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
                out.extend_from_slice(&payload);
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(CompressedBlob { bytes: out })
}

struct Record<'a> {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    scheme: Scheme,
    codec: LosslessCodec,
    min: f64,
    w: f64,
    bits: u8,
    payload: &'a [u8],
}

/// Walks the record structure and verifies the checksum without decoding
/// payloads.
fn parse(bytes: &[u8]) -> Result<Vec<Record<'_>>, CompressionError> {
    let trunc = |e: crate::wire::Truncated| corrupt(format!("truncated at byte {}", e.0));
    let mut r = ByteReader::new(bytes);
    let count = r.u32().map_err(trunc)?;
    let mut records = Vec::new();
    for _ in 0..count {
        let (name, dtype, shape) = read_tensor_header(&mut r).map_err(|e| corrupt(e.to_string()))?;
        let scheme = Scheme::from_tag(r.u8().map_err(trunc)?)?;
        let (mut codec, mut min, mut w, mut bits) = (LosslessCodec::None, 0.0, 0.0, 0);
        match scheme {
            Scheme::Raw => {}
            Scheme::Lossless => codec = LosslessCodec::from_id(r.u8().map_err(trunc)?)?,
            Scheme::Lossy => {
                min = r.f64_be().map_err(trunc)?;
                w = r.f64_be().map_err(trunc)?;
                bits = r.u8().map_err(trunc)?;
                codec = LosslessCodec::from_id(r.u8().map_err(trunc)?)?;
            }
        }
        let len = r.u32().map_err(trunc)? as usize;
        let payload = r.take(len).map_err(trunc)?;
        records.push(Record { name, dtype, shape, scheme, codec, min, w, bits, payload });
    }
    if r.remaining() != 4 {
        return Err(corrupt(format!("expected 4 trailing checksum bytes, found {}", r.remaining())));
    }
    let body = &bytes[..r.position()];
    let stored = u32::from_be_bytes(bytes[r.position()..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CompressionError::ChecksumMismatch { stored, computed });
    }
    Ok(records)
}

pub fn decompress_params(blob: &CompressedBlob, _cfg: &CodecConfig) -> Result<ParameterSet, CompressionError> {
    let mut set = ParameterSet::new();
    for rec in parse(&blob.bytes)? {
        let n = element_count(&rec.shape, 0).map_err(|_| corrupt("shape overflow"))?;
        let tensor = match rec.scheme {
            Scheme::Raw | Scheme::Lossless => {
                let expected = n.checked_mul(rec.dtype.size()).ok_or_else(|| corrupt("shape overflow"))?;
                let raw = decode_bytes(rec.codec, rec.payload, expected)?;
                decode_elements(rec.dtype, rec.shape, &raw).map_err(|e| corrupt(e.to_string()))?
            }
            Scheme::Lossy => {
                if rec.bits > 64 || !rec.min.is_finite() || !rec.w.is_finite() || rec.w < 0.0 {
                    return Err(corrupt("bad lossy header"));
                }
                let indices = if rec.bits == 0 {
                    Vec::new()
                } else {
                    let expected =
                        n.checked_mul(rec.bits as usize).ok_or_else(|| corrupt("shape overflow"))?.div_ceil(8);
                    unpack(&decode_bytes(rec.codec, rec.payload, expected)?, rec.bits, n)
                };
                let q = Quantized { min: rec.min, w: rec.w, bits: rec.bits, indices };
                if rec.shape.iter().any(|&d| d == 0) {
                    return Err(corrupt("zero dimension"));
                }
                dequantize(rec.dtype, rec.shape, &q, n)
            }
        };
        set.push(rec.name, tensor).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(set)
}

/// Serialized size over compressed size.
pub fn compression_ratio(p: &ParameterSet, cfg: &CodecConfig) -> Result<f64, CompressionError> {
    let blob = compress_params(p, cfg)?;
    Ok(serialized_len(p) as f64 / blob.len() as f64)
}
