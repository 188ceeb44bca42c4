//! Length-prefixed frames: `u32` big-endian length, then the body.

use std::io::{self, Read, Write};

use super::{BackendError, Message};

/// Frames larger than this are refused in both directions.
pub const MAX_FRAME_BYTES: usize = 32 * 1024 * 1024;

pub fn write_frame<W: Write>(writer: &mut W, body: &[u8]) -> io::Result<()> {
    if body.len() > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("frame of {} bytes exceeds {MAX_FRAME_BYTES}", body.len()),
        ));
    }
    // One write so the header and body leave in the same segment.
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(body);
    writer.write_all(&frame)?;
    writer.flush()
}

/// Reads one frame. `Ok(None)` means the peer closed the stream cleanly
/// before a new frame started.
pub fn read_frame<R: Read>(reader: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut filled = 0;
    while filled < header.len() {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("incoming frame of {len} bytes exceeds {MAX_FRAME_BYTES}"),
        ));
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_message<W: Write>(writer: &mut W, message: &Message) -> Result<(), BackendError> {
    write_frame(writer, &message.to_bytes()).map_err(|e| BackendError::Transport(e.to_string()))
}

pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<Message>, BackendError> {
    match read_frame(reader) {
        Ok(Some(body)) => Message::from_bytes(&body).map(Some),
        Ok(None) => Ok(None),
        Err(e) => Err(BackendError::Transport(e.to_string())),
    }
}
