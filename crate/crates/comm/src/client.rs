//! Blocking client: one request, one reply, over a single TCP connection.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;

use fedhub_core::compression::CodecConfig;
use fedhub_core::{ModelUpdate, ParameterSet};

use crate::auth::TokenProvider;
use crate::connector::{ConnectorRegistry, DataConnector};
use crate::envelope::{decode_params, encode_params, Envelope, DEFAULT_INLINE_LIMIT};
use crate::frame::{read_frame, write_frame, Frame, MessageType, ReadError, DEFAULT_MAX_PAYLOAD};
use crate::{CommError, ErrorCode};

pub struct ClientOptions {
    pub client_id: String,
    pub token: Option<Arc<dyn TokenProvider>>,
    /// Compresses uploads when set.
    pub codec: Option<CodecConfig>,
    pub connectors: ConnectorRegistry,
    /// Connector used for uploads above the inline limit.
    pub upload_connector: Option<Arc<dyn DataConnector>>,
    pub inline_limit: usize,
    pub max_payload: usize,
}

impl ClientOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            token: None,
            codec: None,
            connectors: ConnectorRegistry::new(),
            upload_connector: None,
            inline_limit: DEFAULT_INLINE_LIMIT,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// Global model plus the server's instructions for the next local round.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelReply {
    pub global: ParameterSet,
    pub epoch: u64,
    pub steps: u32,
    pub done: bool,
    pub send_delta: bool,
    pub inline: bool,
}

pub struct CommClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    opts: ClientOptions,
}

impl CommClient {
    pub fn connect(addr: impl ToSocketAddrs, opts: ClientOptions) -> Result<Self, CommError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = BufWriter::new(stream.try_clone()?);
        Ok(Self { reader: BufReader::new(stream), writer, opts })
    }

    pub fn client_id(&self) -> &str {
        &self.opts.client_id
    }

    fn token(&self) -> Vec<u8> {
        self.opts.token.as_ref().map(|t| t.token()).unwrap_or_default()
    }

    /// Sends a frame and returns the reply, turning `ErrorReply` into an error.
    pub fn call(&mut self, kind: MessageType, payload: Vec<u8>) -> Result<Frame, CommError> {
        let frame = Frame::new(kind, &self.token(), payload);
        self.call_raw(&frame)
    }

    pub fn call_raw(&mut self, frame: &Frame) -> Result<Frame, CommError> {
        write_frame(&mut self.writer, frame, self.opts.max_payload)?;
        let reply = match read_frame(&mut self.reader, self.opts.max_payload) {
            Ok(f) => f,
            Err(ReadError::Closed) => return Err(CommError::Protocol("server closed the connection".into())),
            Err(e) => return Err(e.into()),
        };
        if reply.kind() == Some(MessageType::ErrorReply) {
            let p = &reply.payload;
            if p.len() < 2 {
                return Err(CommError::Protocol("short error reply".into()));
            }
            let code = ErrorCode::from_u16(u16::from_be_bytes([p[0], p[1]]));
            return Err(CommError::Server { code, message: String::from_utf8_lossy(&p[2..]).into_owned() });
        }
        Ok(reply)
    }

    pub fn get_config(&mut self) -> Result<Vec<u8>, CommError> {
        Ok(self.call(MessageType::ConfigRequest, Vec::new())?.payload)
    }

    fn base_meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([("client_id".to_string(), self.opts.client_id.clone())])
    }

    /// First call registers the client with its sample count.
    pub fn request_model(&mut self, sample_count: u64) -> Result<ModelReply, CommError> {
        let mut meta = self.base_meta();
        meta.insert("sample_count".into(), sample_count.to_string());
        let reply = self.call(MessageType::ModelRequest, Envelope::meta_only(meta).encode())?;
        self.model_reply(reply, MessageType::ModelReply)
    }

    /// Blocks until the server answers with the model to continue from.
    pub fn submit_update(&mut self, update: &ModelUpdate) -> Result<ModelReply, CommError> {
        let mut meta = self.base_meta();
        meta.insert("sample_count".into(), update.sample_count.to_string());
        meta.insert("steps".into(), update.local_steps.to_string());
        meta.insert("base_epoch".into(), update.base_epoch.to_string());
        meta.insert("is_delta".into(), update.is_delta.to_string());
        let body = encode_params(&update.params, self.opts.codec.as_ref(), &mut meta)?;
        let env = Envelope::pack(body, meta, self.opts.upload_connector.as_deref(), self.opts.inline_limit)?;
        let reply = self.call(MessageType::UpdateSubmit, env.encode())?;
        self.model_reply(reply, MessageType::UpdateReply)
    }

    pub fn custom_task(&mut self, payload: Vec<u8>) -> Result<Vec<u8>, CommError> {
        Ok(self.call(MessageType::CustomTask, payload)?.payload)
    }

    fn model_reply(&self, f: Frame, expect: MessageType) -> Result<ModelReply, CommError> {
        if f.kind() != Some(expect) {
            return Err(CommError::Protocol(format!("expected {expect:?}, got type {}", f.msg_type)));
        }
        let env = Envelope::decode(&f.payload)?;
        let bytes = env.body_bytes(&self.opts.connectors)?;
        Ok(ModelReply {
            global: decode_params(bytes, &env.meta)?,
            epoch: env.parse("epoch")?,
            steps: env.parse("steps")?,
            done: env.get("done") == Some("true"),
            send_delta: env.get("send_delta") == Some("true"),
            inline: env.is_inline(),
        })
    }
}
