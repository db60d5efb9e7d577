//! Async framing: 4-byte big-endian length, then a JSON frame.

use deskctl_core::frame::{check_len, Frame, FrameError};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Reads one frame body. `Ok(None)` on a clean end of stream.
pub async fn read_body<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Vec<u8>>, FrameError> {
    let len = match r.read_u32().await {
        Ok(n) => check_len(n)?,
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Ok(Some(body))
}

pub fn parse_body(body: &[u8]) -> Result<Frame, FrameError> {
    let text = std::str::from_utf8(body).map_err(|e| FrameError::Malformed(e.to_string()))?;
    Frame::from_json(text)
}

pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Frame>, FrameError> {
    match read_body(r).await? {
        Some(body) => parse_body(&body).map(Some),
        None => Ok(None),
    }
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, frame: &Frame) -> Result<(), FrameError> {
    write_raw(w, frame.to_json().as_bytes()).await
}

/// Writes an already serialized frame body with its length prefix.
pub async fn write_raw<W: AsyncWrite + Unpin>(w: &mut W, body: &[u8]) -> Result<(), FrameError> {
    let len = u32::try_from(body.len()).map_err(|_| FrameError::TooLarge(body.len()))?;
    check_len(len)?;
    w.write_u32(len).await?;
    w.write_all(body).await?;
    w.flush().await?;
    Ok(())
}
