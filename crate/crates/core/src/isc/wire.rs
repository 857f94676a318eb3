//! Frame I/O over byte streams (subprocess stdio, TCP).

use std::io::{self, Read, Write};

use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use super::envelope::{decode_json, encode, CodecError, Envelope, MAX_FRAME_BYTES};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("frame of {0} bytes exceeds the reader limit")]
    FrameTooLarge(usize),
}

/// Reads one frame. `Ok(None)` on a clean end of stream at a frame boundary.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge(n));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).await?;
    Ok(Some(decode_json(&buf)?))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    let frame = encode(env)?;
    w.write_all(&frame).await?;
    w.flush().await?;
    Ok(())
}

/// Blocking variant of [`read_frame`] for simple child processes.
pub fn read_frame_blocking<R: Read>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge(n));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(Some(decode_json(&buf)?))
}

pub fn write_frame_blocking<W: Write>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    let frame = encode(env)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}
