//! Reader and writer for the classic libpcap container.

use std::io::{self, Write};
use std::path::Path;

use super::PacketError;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// One captured frame, before any cleaning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPacket {
    pub capture_index: u64,
    pub link_bytes: Vec<u8>,
    pub caplen: u32,
    pub origlen: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureHeader {
    pub big_endian: bool,
    pub nanosecond: bool,
    pub snaplen: u32,
    pub linktype: u32,
}

/// Iterator over the records of an in-memory capture.
pub struct PcapReader {
    bytes: Vec<u8>,
    header: CaptureHeader,
    offset: usize,
    next_index: u64,
    failed: bool,
}

impl PcapReader {
    pub fn open(path: &Path) -> Result<Self, PacketError> {
        let bytes = std::fs::read(path).map_err(|e| PacketError::Io(e.to_string()))?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, PacketError> {
        if bytes.len() < 4 {
            return Err(PacketError::UnrecognizedMagic(0));
        }
        let le = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let (big_endian, nanosecond) = match le {
            MAGIC_MICROS => (false, false),
            MAGIC_NANOS => (false, true),
            m if m.swap_bytes() == MAGIC_MICROS => (true, false),
            m if m.swap_bytes() == MAGIC_NANOS => (true, true),
            m => return Err(PacketError::UnrecognizedMagic(m)),
        };
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(PacketError::TruncatedHeader);
        }
        let rd = |o: usize| read_u32(&bytes[o..o + 4], big_endian);
        let header = CaptureHeader {
            big_endian,
            nanosecond,
            snaplen: rd(16),
            linktype: rd(20),
        };
        Ok(PcapReader {
            bytes,
            header,
            offset: GLOBAL_HEADER_LEN,
            next_index: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> CaptureHeader {
        self.header
    }
}

fn read_u32(b: &[u8], big_endian: bool) -> u32 {
    let arr: [u8; 4] = b.try_into().unwrap();
    if big_endian {
        u32::from_be_bytes(arr)
    } else {
        u32::from_le_bytes(arr)
    }
}

impl Iterator for PcapReader {
    type Item = Result<RawPacket, PacketError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.offset >= self.bytes.len() {
            return None;
        }
        let index = self.next_index;
        let remaining = self.bytes.len() - self.offset;
        if remaining < RECORD_HEADER_LEN {
            self.failed = true;
            return Some(Err(PacketError::TruncatedRecord { index }));
        }
        let be = self.header.big_endian;
        let h = &self.bytes[self.offset..self.offset + RECORD_HEADER_LEN];
        let caplen = read_u32(&h[8..12], be);
        let origlen = read_u32(&h[12..16], be);
        if caplen as usize > remaining - RECORD_HEADER_LEN {
            self.failed = true;
            return Some(Err(PacketError::TruncatedRecord { index }));
        }
        if caplen > origlen {
            self.failed = true;
            return Some(Err(PacketError::CaplenExceedsOrigLen { index }));
        }
        let start = self.offset + RECORD_HEADER_LEN;
        let link_bytes = self.bytes[start..start + caplen as usize].to_vec();
        self.offset = start + caplen as usize;
        self.next_index += 1;
        Some(Ok(RawPacket {
            capture_index: index,
            link_bytes,
            caplen,
            origlen,
        }))
    }
}

/// Reads every record of a capture file.
pub fn parse_capture(path: &Path) -> Result<(CaptureHeader, Vec<RawPacket>), PacketError> {
    let reader = PcapReader::open(path)?;
    let header = reader.header();
    let packets = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, packets))
}

/// Minimal little-endian microsecond capture writer.
pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, linktype: u32) -> io::Result<Self> {
        out.write_all(&MAGIC_MICROS.to_le_bytes())?;
        out.write_all(&2u16.to_le_bytes())?;
        out.write_all(&4u16.to_le_bytes())?;
        out.write_all(&0i32.to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        out.write_all(&65535u32.to_le_bytes())?;
        out.write_all(&linktype.to_le_bytes())?;
        Ok(PcapWriter { out })
    }

    /// Writes one record; `origlen` defaults to the frame length.
    pub fn write_frame(&mut self, ts: (u32, u32), frame: &[u8], origlen: Option<u32>) -> io::Result<()> {
        let caplen = frame.len() as u32;
        self.out.write_all(&ts.0.to_le_bytes())?;
        self.out.write_all(&ts.1.to_le_bytes())?;
        self.out.write_all(&caplen.to_le_bytes())?;
        self.out.write_all(&origlen.unwrap_or(caplen).to_le_bytes())?;
        self.out.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
