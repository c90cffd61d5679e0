//! Client side of the `SDS1` guidance protocol.
//!
//! A frame is `"SDS1"`, a u8 message type, a u64 request id, a u32 header
//! length, a UTF-8 JSON header, a u32 payload length in bytes and the payload
//! as little-endian f32. When the header carries `dims`, the payload must
//! hold exactly their product of values.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use rand::RngCore;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::guidance::{
    AdapterModel, DistillContext, GuidanceKind, GuidanceModel, NoiseDraw, NoiseLevel, NoiseRequest,
};
use crate::io::clip::Embedder;
use crate::render::Camera;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SDS1";
const MAX_HEADER: usize = 1 << 24;
const MAX_PAYLOAD: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Predict = 1,
    Finetune = 2,
    EmbedText = 3,
    EmbedImage = 4,
    Error = 5,
}

impl MessageType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Predict,
            2 => Self::Finetune,
            3 => Self::EmbedText,
            4 => Self::EmbedImage,
            5 => Self::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub kind: MessageType,
    pub id: u64,
    pub header: Value,
    pub payload: Vec<f32>,
}

impl Message {
    /// Tensor view of the payload using the header's `dims`.
    pub fn tensor(&self) -> Result<Tensor> {
        let dims = header_dims(&self.header)?
            .ok_or_else(|| protocol("missing_dims", "header has no dims"))?;
        Tensor::new(dims, self.payload.clone())
    }

    pub fn error(id: u64, code: &str, message: &str) -> Self {
        Self {
            kind: MessageType::Error,
            id,
            header: json!({ "code": code, "message": message }),
            payload: Vec::new(),
        }
    }
}

fn protocol(code: &str, message: impl Into<String>) -> Error {
    Error::Protocol {
        code: code.into(),
        message: message.into(),
    }
}

fn header_dims(header: &Value) -> Result<Option<Vec<usize>>> {
    match header.get("dims") {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|d| d as usize)
                    .ok_or_else(|| protocol("bad_header", "dims must be nonnegative integers"))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(_) => Err(protocol("bad_header", "dims must be an array")),
    }
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    let header = serde_json::to_vec(&m.header).expect("header serializes");
    let mut out = Vec::with_capacity(4 + 1 + 8 + 4 + header.len() + 4 + m.payload.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.push(m.kind as u8);
    out.extend_from_slice(&m.id.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&((m.payload.len() * 4) as u32).to_le_bytes());
    for v in &m.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads one frame. Malformed input yields [`Error::Protocol`] with codes
/// `bad_magic`, `bad_type`, `bad_header` or `length_mismatch`.
pub fn read_message(r: &mut impl Read) -> Result<Message> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(protocol("bad_magic", format!("got {magic:?}")));
    }
    let mut fixed = [0u8; 13];
    r.read_exact(&mut fixed)?;
    let kind = MessageType::from_u8(fixed[0])
        .ok_or_else(|| protocol("bad_type", format!("message type {}", fixed[0])))?;
    let id = u64::from_le_bytes(fixed[1..9].try_into().expect("8 bytes"));
    let header_len = u32::from_le_bytes(fixed[9..13].try_into().expect("4 bytes")) as usize;
    if header_len > MAX_HEADER {
        return Err(protocol("bad_header", format!("header of {header_len} bytes")));
    }
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header: Value = if header.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&header).map_err(|e| protocol("bad_header", e.to_string()))?
    };
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let payload_len = u32::from_le_bytes(len) as usize;
    if !payload_len.is_multiple_of(4) || payload_len > MAX_PAYLOAD {
        return Err(protocol("length_mismatch", format!("payload of {payload_len} bytes")));
    }
    if let Some(dims) = header_dims(&header)? {
        let expected = dims.iter().try_fold(4usize, |a, &d| a.checked_mul(d));
        if expected != Some(payload_len) {
            return Err(protocol(
                "length_mismatch",
                format!("dims {dims:?} need {expected:?} bytes, payload has {payload_len}"),
            ));
        }
    }
    let mut raw = vec![0u8; payload_len];
    r.read_exact(&mut raw)?;
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Message {
        kind,
        id,
        header,
        payload,
    })
}

/// A connection to a guidance server. Requests are sequential; each
/// response must carry the id of its request.
pub struct WireClient {
    stream: TcpStream,
    next_id: u64,
}

impl WireClient {
    pub fn connect(address: &str, timeout: Duration) -> Result<Self> {
        let unavailable = |e: std::io::Error| Error::GuidanceUnavailable(format!("{address}: {e}"));
        let addr = address
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| Error::GuidanceUnavailable(format!("{address}: no address")))?;
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(unavailable)?;
        stream.set_read_timeout(Some(timeout)).map_err(unavailable)?;
        stream.set_nodelay(true).map_err(unavailable)?;
        Ok(Self { stream, next_id: 1 })
    }

    pub fn set_reply_timeout(&self, timeout: Duration) -> Result<()> {
        Ok(self.stream.set_read_timeout(Some(timeout))?)
    }

    /// Sends one request and waits for its response. Server error messages
    /// become [`Error::Protocol`].
    pub fn request(&mut self, kind: MessageType, header: Value, payload: Vec<f32>) -> Result<Message> {
        let id = self.next_id;
        self.next_id += 1;
        let msg = Message {
            kind,
            id,
            header,
            payload,
        };
        self.stream.write_all(&encode_message(&msg))?;
        let reply = read_message(&mut self.stream)?;
        // Errors about unparseable requests carry id 0.
        if reply.kind == MessageType::Error && (reply.id == id || reply.id == 0) {
            let field = |k: &str| reply.header.get(k).and_then(Value::as_str).unwrap_or("").to_string();
            return Err(Error::Protocol {
                code: field("code"),
                message: field("message"),
            });
        }
        if reply.id != id {
            return Err(protocol("bad_id", format!("response {} to request {id}", reply.id)));
        }
        Ok(reply)
    }
}

/// Serves connections one at a time until `handler` returns `None` for a
/// request, which stops the server after replying with nothing. Malformed
/// frames are answered with typed error messages.
pub fn serve(listener: TcpListener, mut handler: impl FnMut(Message) -> Option<Message>) -> Result<()> {
    for conn in listener.incoming() {
        let mut stream = conn?;
        loop {
            match read_message(&mut stream) {
                Ok(msg) => match handler(msg) {
                    Some(reply) => stream.write_all(&encode_message(&reply))?,
                    None => return Ok(()),
                },
                Err(Error::Io(_)) => break,
                Err(Error::Protocol { code, message }) => {
                    let _ = stream.write_all(&encode_message(&Message::error(0, &code, &message)));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

fn camera_rows(cameras: &[Camera]) -> Vec<[f32; 12]> {
    cameras.iter().map(Camera::extrinsics).collect()
}

fn level_header(level: &NoiseLevel) -> Value {
    json!({ "t_d": level.t_d, "alpha_bar": level.alpha_bar, "weight": level.weight })
}

/// A denoiser served over the wire.
pub struct RemoteGuidance {
    client: WireClient,
    kind: GuidanceKind,
    resolution: (usize, usize),
}

impl RemoteGuidance {
    pub fn new(client: WireClient, kind: GuidanceKind, resolution: (usize, usize)) -> Self {
        Self {
            client,
            kind,
            resolution,
        }
    }
}

impl GuidanceModel for RemoteGuidance {
    fn kind(&self) -> GuidanceKind {
        self.kind
    }

    fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn predict_noise(&mut self, req: &NoiseRequest<'_>) -> Result<Tensor> {
        let header = json!({
            "kind": req.kind.as_str(),
            "level": level_header(&req.level),
            "t_d": req.level.t_d,
            "guidance_scale": req.guidance_scale,
            "prompt": req.prompt,
            "cameras": camera_rows(req.cameras),
            "times": req.times,
            "dims": req.noisy.shape(),
        });
        let reply = self
            .client
            .request(MessageType::Predict, header, req.noisy.data().to_vec())?;
        let out = reply.tensor()?;
        if out.shape() != req.noisy.shape() {
            return Err(protocol(
                "length_mismatch",
                format!("prediction {:?} for request {:?}", out.shape(), req.noisy.shape()),
            ));
        }
        Ok(out)
    }
}

/// Adapter whose weights live on the server under `session`.
pub struct RemoteAdapter {
    client: WireClient,
    session: String,
}

impl RemoteAdapter {
    pub fn new(client: WireClient, session: impl Into<String>) -> Self {
        Self {
            client,
            session: session.into(),
        }
    }
}

impl AdapterModel for RemoteAdapter {
    fn predict(&mut self, base: &Tensor, noisy: &Tensor, level: &NoiseLevel, camera: &Camera) -> Result<Tensor> {
        let mut payload = noisy.data().to_vec();
        payload.extend_from_slice(base.data());
        let mut dims = vec![2];
        dims.extend_from_slice(noisy.shape());
        let header = json!({
            "kind": "adapter",
            "session": self.session,
            "level": level_header(level),
            "t_d": level.t_d,
            "cameras": camera_rows(std::slice::from_ref(camera)),
            "dims": dims,
        });
        let out = self.client.request(MessageType::Predict, header, payload)?.tensor()?;
        if out.shape() != noisy.shape() {
            return Err(protocol("length_mismatch", "adapter prediction shape"));
        }
        Ok(out)
    }

    fn finetune_step(
        &mut self,
        base: &mut dyn GuidanceModel,
        x: &Tensor,
        camera: &Camera,
        _time: f32,
        ctx: &DistillContext<'_>,
        draw: NoiseDraw,
        lr: f32,
        rng: &mut dyn RngCore,
    ) -> Result<f32> {
        let d = draw.resolve(ctx.schedule, x.shape(), rng)?;
        let noisy = crate::guidance::add_noise(x, d.level.alpha_bar, &d.noise)?;
        let mut payload = noisy.data().to_vec();
        payload.extend_from_slice(d.noise.data());
        let mut dims = vec![2];
        dims.extend_from_slice(x.shape());
        let header = json!({
            "kind": base.kind().as_str(),
            "session": self.session,
            "level": level_header(&d.level),
            "t_d": d.level.t_d,
            "prompt": ctx.prompt,
            "cameras": camera_rows(std::slice::from_ref(camera)),
            "lr": lr,
            "dims": dims,
        });
        let reply = self.client.request(MessageType::Finetune, header, payload)?;
        reply
            .payload
            .first()
            .copied()
            .ok_or_else(|| protocol("bad_payload", "finetune reply carries no loss"))
    }
}

/// Text and image embeddings served over the wire.
pub struct RemoteEmbedder {
    client: WireClient,
}

impl RemoteEmbedder {
    pub fn new(client: WireClient) -> Self {
        Self { client }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_text(&mut self, text: &str) -> Result<Vec<f32>> {
        let reply = self
            .client
            .request(MessageType::EmbedText, json!({ "text": text }), Vec::new())?;
        Ok(reply.payload)
    }

    fn embed_image(&mut self, image: &Tensor) -> Result<Vec<f32>> {
        let header = json!({ "dims": image.shape() });
        let reply = self
            .client
            .request(MessageType::EmbedImage, header, image.data().to_vec())?;
        Ok(reply.payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let m = Message {
            kind: MessageType::Predict,
            id: 42,
            header: json!({ "dims": [2, 2], "prompt": "x" }),
            payload: vec![1.0, -0.0, f32::MAX, 3.5],
        };
        let bytes = encode_message(&m);
        assert_eq!(read_message(&mut bytes.as_slice()).unwrap(), m);
    }

    #[test]
    fn typed_errors() {
        let m = Message {
            kind: MessageType::Predict,
            id: 1,
            header: json!({ "dims": [3] }),
            payload: vec![1.0, 2.0],
        };
        let bytes = encode_message(&m);
        let code = |b: &[u8]| match read_message(&mut &b[..]) {
            Err(Error::Protocol { code, .. }) => code,
            other => panic!("{other:?}"),
        };
        assert_eq!(code(&bytes), "length_mismatch");
        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert_eq!(code(&bad), "bad_magic");
        bad = bytes.clone();
        bad[4] = 99;
        assert_eq!(code(&bad), "bad_type");
    }
}
