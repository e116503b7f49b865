//! Newline-delimited JSON segmenter protocol over a byte stream (child
//! process standard I/O or a TCP socket). One request per line; one response
//! per request; responses never interleave ids.
//!
//! Request:  `{"id": str, "h": int, "w": int, "points": [{"x","y","label"}],
//!            "box": [x,y,w,h] | null, "prior": compressed-RLE | null}`
//! Response: `{"id": str, "rle": compressed-RLE, "conf": float}`

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{rle_compress, rle_decompress, BBox, MaskDims, MaskError};
use crate::prompt::{PointSource, PromptLabel, PromptPoint, PromptSet};
use crate::sim::{SegmenterRequest, SegmenterResponse};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("peer closed the connection")]
    PeerClosed,
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for WireError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => WireError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted => WireError::PeerClosed,
            _ => WireError::Io(e),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WirePoint {
    x: f64,
    y: f64,
    label: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRequest {
    id: String,
    h: u32,
    w: u32,
    points: Vec<WirePoint>,
    #[serde(rename = "box")]
    bbox: Option<[f64; 4]>,
    prior: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireResponse {
    id: String,
    rle: String,
    conf: f64,
}

fn encode_request(req: &SegmenterRequest) -> WireRequest {
    WireRequest {
        id: req.image_id.clone(),
        h: req.dims.height,
        w: req.dims.width,
        points: req
            .prompts
            .points
            .iter()
            .map(|p| WirePoint {
                x: p.x,
                y: p.y,
                label: match p.label {
                    PromptLabel::Positive => 1,
                    PromptLabel::Negative => 0,
                },
            })
            .collect(),
        bbox: req.prompts.bbox.map(|b| [b.x, b.y, b.w, b.h]),
        prior: req.prior.as_ref().map(rle_compress),
    }
}

fn decode_request(wire: WireRequest) -> Result<SegmenterRequest, WireError> {
    let dims = MaskDims::new(wire.h, wire.w)
        .map_err(|e| WireError::Protocol(format!("bad dims: {e}")))?;
    let points = wire
        .points
        .into_iter()
        .map(|p| PromptPoint {
            x: p.x,
            y: p.y,
            label: if p.label == 1 {
                PromptLabel::Positive
            } else {
                PromptLabel::Negative
            },
            source: PointSource::MaskSample, // source is not carried on the wire
        })
        .collect();
    let bbox = match wire.bbox {
        Some([x, y, w, h]) => Some(
            BBox::new(x, y, w, h).map_err(|e| WireError::Protocol(format!("bad box: {e}")))?,
        ),
        None => None,
    };
    let prompts = PromptSet::new(points, bbox)
        .map_err(|e| WireError::Protocol(format!("bad prompt set: {e}")))?;
    let prior = wire
        .prior
        .map(|s| rle_decompress(&s, dims))
        .transpose()
        .map_err(|e: MaskError| WireError::Protocol(format!("bad prior RLE: {e}")))?;
    Ok(SegmenterRequest {
        image_id: wire.id,
        dims,
        prompts,
        prior,
    })
}

/// Client side: a segmenter living on the other end of a byte stream.
pub struct ExternalSegmenter {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
}

impl ExternalSegmenter {
    pub fn new(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self {
            reader: BufReader::new(reader),
            writer,
        }
    }

    /// Connect over TCP with an optional per-read timeout.
    pub fn connect(addr: &str, timeout: Option<Duration>) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(timeout)?;
        let reader = stream.try_clone()?;
        Ok(Self::new(Box::new(reader), Box::new(stream)))
    }

    /// Send one request and wait for its response.
    pub fn request(&mut self, req: &SegmenterRequest) -> Result<SegmenterResponse, WireError> {
        let line = serde_json::to_string(&encode_request(req))
            .map_err(|e| WireError::Protocol(e.to_string()))?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;

        let mut buf = String::new();
        let n = self.reader.read_line(&mut buf)?;
        if n == 0 {
            return Err(WireError::PeerClosed);
        }
        let resp: WireResponse = serde_json::from_str(buf.trim_end())
            .map_err(|e| WireError::Protocol(format!("malformed response: {e}")))?;
        if resp.id != req.image_id {
            return Err(WireError::Protocol(format!(
                "response id {:?} does not match request id {:?}",
                resp.id, req.image_id
            )));
        }
        let mask = rle_decompress(&resp.rle, req.dims)
            .map_err(|e| WireError::Protocol(format!("bad response RLE: {e}")))?;
        Ok(SegmenterResponse {
            mask,
            confidence: resp.conf,
        })
    }
}

impl crate::sim::Segmenter for ExternalSegmenter {
    fn segment(&mut self, req: &SegmenterRequest) -> Result<SegmenterResponse, crate::sim::SimError> {
        Ok(self.request(req)?)
    }
}

/// Server side: answer requests from `reader` until EOF using `handler`.
/// A handler failure is reported to the peer as a line with `"rle": ""` and
/// the connection stays up.
pub fn serve<R: BufRead, W: Write>(
    reader: R,
    mut writer: W,
    mut handler: impl FnMut(&SegmenterRequest) -> Result<SegmenterResponse, String>,
) -> Result<(), WireError> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRequest = serde_json::from_str(&line)
            .map_err(|e| WireError::Protocol(format!("malformed request: {e}")))?;
        let id = wire.id.clone();
        let resp = decode_request(wire)
            .map_err(|e| e.to_string())
            .and_then(|req| handler(&req));
        let out = match resp {
            Ok(r) => WireResponse {
                id,
                rle: rle_compress(&r.mask),
                conf: r.confidence,
            },
            Err(_) => WireResponse {
                id,
                rle: String::new(),
                conf: -1.0,
            },
        };
        let line = serde_json::to_string(&out).map_err(|e| WireError::Protocol(e.to_string()))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
