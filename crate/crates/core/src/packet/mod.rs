//! Capture parsing, traffic cleaning and the fixed-length packet encoding.

pub mod dataset;
pub mod frame;
pub mod pcap;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::par::{self, Exec};
pub use dataset::{read_dataset, write_dataset};
pub use frame::{
    anonymize, canonical_bytes, canonicalize, filter_packet, parse_network_transport, strip_link_layer,
    FilterReason, FilterVerdict, LinkPayload, ParsedPacket, TransportProtocol,
};
pub use pcap::{parse_capture, PcapReader, PcapWriter, RawPacket};

/// Length of every encoded packet vector.
pub const CANONICAL_LEN: usize = 1600;
/// Bytes reserved for each of the IP and transport headers.
pub const HEADER_SLOT: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PacketError {
    #[error("unrecognized capture magic {0:#010x}")]
    UnrecognizedMagic(u32),
    #[error("capture global header truncated")]
    TruncatedHeader,
    #[error("record {index} truncated")]
    TruncatedRecord { index: u64 },
    #[error("record {index} has caplen larger than origlen")]
    CaplenExceedsOrigLen { index: u64 },
    #[error("frame too short for an ethernet header ({0} bytes)")]
    TooShort(usize),
    #[error("not IPv4 (version {0})")]
    NotIpv4(u8),
    #[error("header truncated")]
    HeaderTruncated,
    #[error("bad IHL {0}")]
    BadIhl(u8),
    #[error("bad TCP data offset {0}")]
    BadDataOffset(u8),
    #[error("malformed row at line {line}: {why}")]
    MalformedRow { line: usize, why: String },
    #[error("i/o failure: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    /// CSV code: "0", "1" or "" when unlabeled.
    pub fn code(label: Option<Label>) -> &'static str {
        match label {
            Some(Label::Normal) => "0",
            Some(Label::Anomaly) => "1",
            None => "",
        }
    }

    pub fn parse_code(s: &str) -> Result<Option<Label>, String> {
        match s {
            "0" => Ok(Some(Label::Normal)),
            "1" => Ok(Some(Label::Anomaly)),
            "" | "none" => Ok(None),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceId {
    pub file: String,
    pub index: u64,
}

/// Canonical 1600-value packet vector with an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPacket {
    pub values: Vec<f64>,
    pub label: Option<Label>,
    pub source_id: SourceId,
}

impl EncodedPacket {
    /// Length is 1600 and each value is a byte divided by 255.
    pub fn is_valid(&self) -> bool {
        self.values.len() == CANONICAL_LEN
            && self.values.iter().all(|&v| {
                (0.0..=1.0).contains(&v) && ((v * 255.0) - (v * 255.0).round()).abs() <= 1e-9
            })
    }
}

/// Runs every cleaning rule on one link-layer frame.
pub fn encode_frame(frame: &[u8], raw_ip: bool, source_id: SourceId) -> Result<EncodedPacket, FilterReason> {
    let network = if raw_ip {
        frame
    } else {
        match strip_link_layer(frame) {
            Ok(LinkPayload::Network(b)) => b,
            Ok(LinkPayload::Drop(reason)) => return Err(reason),
            Err(_) => return Err(FilterReason::Unparseable),
        }
    };
    let parsed = parse_network_transport(network).map_err(|_| FilterReason::Unparseable)?;
    let verdict = filter_packet(&parsed);
    if !verdict.keep {
        return Err(verdict.reason);
    }
    Ok(canonicalize(&anonymize(parsed), source_id))
}

/// Kept packets plus how many frames each rule removed.
#[derive(Clone, Debug, Default)]
pub struct PreprocessOutput {
    pub packets: Vec<EncodedPacket>,
    pub verdicts: BTreeMap<FilterReason, usize>,
}

impl PreprocessOutput {
    fn merge(&mut self, other: PreprocessOutput) {
        self.packets.extend(other.packets);
        for (k, v) in other.verdicts {
            *self.verdicts.entry(k).or_default() += v;
        }
    }
}

pub fn preprocess_capture(path: &Path, label: Option<Label>) -> Result<PreprocessOutput, PacketError> {
    let reader = PcapReader::open(path)?;
    let raw_ip = matches!(reader.header().linktype, pcap::LINKTYPE_RAW | 228);
    let file = path.display().to_string();
    let mut out = PreprocessOutput::default();
    for raw in reader {
        let raw = raw?;
        let id = SourceId {
            file: file.clone(),
            index: raw.capture_index,
        };
        match encode_frame(&raw.link_bytes, raw_ip, id) {
            Ok(mut p) => {
                p.label = label;
                out.packets.push(p);
                *out.verdicts.entry(FilterReason::Kept).or_default() += 1;
            }
            Err(reason) => *out.verdicts.entry(reason).or_default() += 1,
        }
    }
    Ok(out)
}

/// Capture files under `input` (the file itself, or `*.pcap`/`*.cap` in a directory), sorted by path.
pub fn capture_files(input: &Path) -> Result<Vec<PathBuf>, PacketError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let rd = std::fs::read_dir(input).map_err(|e| PacketError::Io(format!("{}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("pcap") | Some("cap")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Preprocesses files concurrently; output order follows file order then capture index.
pub fn preprocess_files(files: &[PathBuf], label: Option<Label>, exec: Exec) -> Result<PreprocessOutput, PacketError> {
    let parts = par::map_indexed(exec, files.len(), |i| preprocess_capture(&files[i], label));
    let mut out = PreprocessOutput::default();
    for part in parts {
        out.merge(part?);
    }
    Ok(out)
}
