//! Frame layout for the TCP transport. All integers and reals little-endian:
//!
//! ```text
//! "GBUN" | version u8 = 1 | opcode u8 | worker_id u16 | round u32 | count u32 | count x f64
//! ```

use std::io::{self, Read, Write};

use super::Opcode;
use crate::error::{GbunError, Result};

pub const MAGIC: [u8; 4] = *b"GBUN";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on values per frame (K = 16384 systems fit comfortably).
pub const MAX_VALUES: u32 = 1 << 29;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub opcode: Opcode,
    pub worker_id: u16,
    pub round: u32,
    pub values: Vec<f64>,
}

impl Frame {
    pub fn handshake(worker_id: u16) -> Self {
        Self {
            opcode: Opcode::Handshake,
            worker_id,
            round: 0,
            values: Vec::new(),
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + 8 * self.values.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.wire_len());
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        buf.push(self.opcode as u8);
        buf.extend_from_slice(&self.worker_id.to_le_bytes());
        buf.extend_from_slice(&self.round.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.encode()).map_err(io_to_network)?;
        w.flush().map_err(io_to_network)
    }
}

pub(crate) fn io_to_network(e: io::Error) -> GbunError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => {
            GbunError::network(format!("timed out: {e}"))
        }
        io::ErrorKind::UnexpectedEof => GbunError::network("peer closed the connection"),
        _ => GbunError::network(e.to_string()),
    }
}

/// Reads one frame. `Ok(None)` means the stream ended cleanly before any
/// byte of a new frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(GbunError::network("connection closed inside a frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_to_network(e)),
        }
    }
    if header[..4] != MAGIC {
        return Err(GbunError::protocol(format!("bad magic {:02x?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(GbunError::protocol(format!("unsupported wire version {}", header[4])));
    }
    let opcode = Opcode::from_u8(header[5])?;
    let worker_id = u16::from_le_bytes([header[6], header[7]]);
    let round = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap());
    if count > MAX_VALUES {
        return Err(GbunError::protocol(format!("frame announces {count} values")));
    }
    let mut body = vec![0u8; count as usize * 8];
    r.read_exact(&mut body).map_err(io_to_network)?;
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some(Frame {
        opcode,
        worker_id,
        round,
        values,
    }))
}
