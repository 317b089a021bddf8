//! On-disk segment framing for persistent partitions.
//!
//! Every record is framed little-endian as
//!
//! ```text
//! magic u8 (0x50) | total_len u32 | offset u64 | event_time_ms u64
//! | key_len u32 (0xFFFFFFFF = no key) | key | payload_len u32 | payload
//! ```
//!
//! `total_len` counts the whole frame, magic byte included. One segment file
//! per partition; the earliest retained offset lives in a text sidecar.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use bytes::Bytes;

pub const MAGIC: u8 = 0x50;
pub const NO_KEY: u32 = u32::MAX;
const FIXED_LEN: usize = 1 + 4 + 8 + 8 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub offset: u64,
    pub event_time: u64,
    pub key: Option<Bytes>,
    pub payload: Bytes,
}

pub fn frame_len(key: Option<&[u8]>, payload: &[u8]) -> usize {
    FIXED_LEN + key.map_or(0, <[u8]>::len) + payload.len()
}

pub fn encode_frame(
    out: &mut impl Write,
    offset: u64,
    event_time: u64,
    key: Option<&[u8]>,
    payload: &[u8],
) -> io::Result<()> {
    let total = frame_len(key, payload);
    let total = u32::try_from(total)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "record exceeds u32 framing"))?;
    out.write_all(&[MAGIC])?;
    out.write_all(&total.to_le_bytes())?;
    out.write_all(&offset.to_le_bytes())?;
    out.write_all(&event_time.to_le_bytes())?;
    match key {
        Some(k) => {
            out.write_all(&(k.len() as u32).to_le_bytes())?;
            out.write_all(k)?;
        }
        None => out.write_all(&NO_KEY.to_le_bytes())?,
    }
    out.write_all(&(payload.len() as u32).to_le_bytes())?;
    out.write_all(payload)
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn read_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

/// Decodes every complete frame in `data`. A torn frame at the tail (partial
/// write before a crash) ends decoding; corruption in the middle is an error.
pub fn decode_frames(data: &[u8]) -> io::Result<Vec<Frame>> {
    let mut frames = Vec::new();
    let mut pos = 0;
    while pos < data.len() {
        let rest = &data[pos..];
        if rest[0] != MAGIC {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad magic byte at segment position {pos}"),
            ));
        }
        if rest.len() < 5 {
            break;
        }
        let total = read_u32(rest, 1) as usize;
        if total < FIXED_LEN {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "frame length too small"));
        }
        if rest.len() < total {
            break;
        }
        let frame = &rest[..total];
        let offset = read_u64(frame, 5);
        let event_time = read_u64(frame, 13);
        let key_len = read_u32(frame, 21);
        let mut at = 25;
        let key = if key_len == NO_KEY {
            None
        } else {
            let k = key_len as usize;
            if at + k + 4 > total {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "key overruns frame"));
            }
            let key = Bytes::copy_from_slice(&frame[at..at + k]);
            at += k;
            Some(key)
        };
        let payload_len = read_u32(frame, at) as usize;
        at += 4;
        if at + payload_len != total {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "payload length mismatch"));
        }
        let payload = Bytes::copy_from_slice(&frame[at..total]);
        frames.push(Frame { offset, event_time, key, payload });
        pos += total;
    }
    Ok(frames)
}

/// Append-only segment file for one partition plus its earliest-offset sidecar.
#[derive(Debug)]
pub struct Segment {
    log_path: PathBuf,
    earliest_path: PathBuf,
    writer: BufWriter<File>,
}

impl Segment {
    pub fn paths(dir: &Path, partition: u32) -> (PathBuf, PathBuf) {
        (dir.join(format!("{partition}.log")), dir.join(format!("{partition}.earliest")))
    }

    pub fn open(dir: &Path, partition: u32) -> io::Result<Self> {
        let (log_path, earliest_path) = Self::paths(dir, partition);
        let file = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Segment { log_path, earliest_path, writer: BufWriter::new(file) })
    }

    pub fn append(
        &mut self,
        offset: u64,
        event_time: u64,
        key: Option<&[u8]>,
        payload: &[u8],
    ) -> io::Result<()> {
        encode_frame(&mut self.writer, offset, event_time, key, payload)?;
        self.writer.flush()
    }

    pub fn write_earliest(&self, earliest: u64) -> io::Result<()> {
        let tmp = self.earliest_path.with_extension("earliest.tmp");
        fs::write(&tmp, format!("{earliest}\n"))?;
        fs::rename(tmp, &self.earliest_path)
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    /// Loads (earliest, frames at or after earliest) for a partition directory.
    pub fn load(dir: &Path, partition: u32) -> io::Result<(u64, Vec<Frame>)> {
        let (log_path, earliest_path) = Self::paths(dir, partition);
        let earliest = match fs::read_to_string(&earliest_path) {
            Ok(s) => s.trim().parse::<u64>().map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("earliest sidecar: {e}"))
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        let mut data = Vec::new();
        match File::open(&log_path) {
            Ok(f) => {
                BufReader::new(f).read_to_end(&mut data)?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        let frames = decode_frames(&data)?.into_iter().filter(|f| f.offset >= earliest).collect();
        Ok((earliest, frames))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_layout_is_little_endian() {
        let mut buf = Vec::new();
        encode_frame(&mut buf, 7, 9, None, b"ab").unwrap();
        assert_eq!(buf[0], 0x50);
        assert_eq!(read_u32(&buf, 1) as usize, buf.len());
        assert_eq!(buf.len(), 31);
        assert_eq!(read_u64(&buf, 5), 7);
        assert_eq!(read_u64(&buf, 13), 9);
        assert_eq!(read_u32(&buf, 21), NO_KEY);
        assert_eq!(read_u32(&buf, 25), 2);
        assert_eq!(&buf[29..], b"ab");
    }

    #[test]
    fn torn_tail_is_ignored() {
        let mut buf = Vec::new();
        encode_frame(&mut buf, 0, 1, Some(b"k"), b"first").unwrap();
        encode_frame(&mut buf, 1, 2, None, b"second").unwrap();
        let cut = buf.len() - 3;
        let frames = decode_frames(&buf[..cut]).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].key.as_deref(), Some(&b"k"[..]));
        assert_eq!(&frames[0].payload[..], b"first");
    }

    #[test]
    fn bad_magic_is_an_error() {
        assert!(decode_frames(&[0x51, 0, 0, 0, 0]).is_err());
    }
}
