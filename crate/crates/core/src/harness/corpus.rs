//! Desk-scale synthetic traffic for end-to-end runs.
//!
//! Normal traffic is mostly text protocols on a fixed service-port pool plus
//! some TLS-looking records on 443. Anomalous traffic is mostly high-entropy
//! payloads on a disjoint port pool, but a share reuses service ports and a
//! share carries text, so the classes overlap. Every frame goes through the
//! real packet cleaning and canonicalization.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::packet::frame::build::{ethernet, ipv4_header, tcp_header, udp_header};
use crate::packet::frame::{ETHERTYPE_IPV4, IPPROTO_TCP, IPPROTO_UDP};
use crate::packet::pcap::LINKTYPE_ETHERNET;
use crate::packet::{encode_frame, EncodedPacket, Label, PacketError, PcapWriter, SourceId};

use super::derive_seed;

const NORMAL_TCP_PORTS: &[u16] = &[80, 443, 8080, 25, 110, 143, 22];
const NORMAL_UDP_PORTS: &[u16] = &[123, 1900, 5060];
const ANOMALY_PORTS: &[u16] = &[4444, 6667, 31337, 1337, 9001, 5555, 12345];

const WORDS: &[&str] = &[
    "GET", "POST", "HTTP/1.1", "Host:", "www.example.com", "User-Agent:", "Mozilla/5.0", "Accept:", "text/html",
    "Content-Type:", "application/json", "Connection:", "keep-alive", "MAIL", "FROM:", "RCPT", "TO:", "DATA",
    "HELO", "mail.example.org", "LOGIN", "SELECT", "INBOX", "FETCH", "200", "OK", "index.html", "the", "and",
    "of", "to", "a", "in", "is", "for", "on", "with", "session", "user", "id", "cache", "control", "max-age",
];

const FLAGS_PSH_ACK: u8 = 0x18;

fn text_payload(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<u8> {
    let target = rng.random_range(min..=max);
    let mut out = Vec::with_capacity(target + 16);
    while out.len() < target {
        out.extend_from_slice(WORDS.choose(rng).unwrap().as_bytes());
        out.extend_from_slice(if rng.random_bool(0.15) { b"\r\n" } else { b" " });
    }
    out.truncate(target);
    out
}

fn random_payload(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<u8> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| rng.random()).collect()
}

fn tcp(rng: &mut ChaCha8Rng, dport: u16, ttl: u8, window: u16, payload: &[u8]) -> Vec<u8> {
    let sport = rng.random_range(49152..=65535);
    let seq = rng.random();
    let t = tcp_header(sport, dport, seq, FLAGS_PSH_ACK, window, &[]);
    let ip = ipv4_header(IPPROTO_TCP, [10, 0, 0, 2], [10, 0, 0, 1], ttl, &[], t.len() + payload.len());
    ethernet(ETHERTYPE_IPV4, None, &[ip, t, payload.to_vec()].concat())
}

fn udp(rng: &mut ChaCha8Rng, dport: u16, ttl: u8, payload: &[u8]) -> Vec<u8> {
    let sport = rng.random_range(49152..=65535);
    let u = udp_header(sport, dport, payload.len());
    let ip = ipv4_header(IPPROTO_UDP, [10, 0, 0, 2], [10, 0, 0, 1], ttl, &[], u.len() + payload.len());
    ethernet(ETHERTYPE_IPV4, None, &[ip, u, payload.to_vec()].concat())
}

fn stream(seed: u64, class: &str, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class));
    rng.set_stream(i as u64);
    rng
}

/// Frame `i` of the normal class; depends only on `(seed, i)`.
pub fn normal_frame(seed: u64, i: usize) -> Vec<u8> {
    let mut rng = stream(seed, "corpus/normal", i);
    let ttl = *[64u8, 128].choose(&mut rng).unwrap();
    let roll: f64 = rng.random();
    if roll < 0.12 {
        let dport = *NORMAL_UDP_PORTS.choose(&mut rng).unwrap();
        let payload = text_payload(&mut rng, 24, 160);
        udp(&mut rng, dport, ttl, &payload)
    } else if roll < 0.27 {
        // TLS application-data record
        let body = random_payload(&mut rng, 60, 500);
        let mut payload = vec![0x17, 0x03, 0x03];
        payload.extend_from_slice(&(body.len() as u16).to_be_bytes());
        payload.extend_from_slice(&body);
        tcp(&mut rng, 443, ttl, 64240, &payload)
    } else {
        let dport = *NORMAL_TCP_PORTS.choose(&mut rng).unwrap();
        let payload = text_payload(&mut rng, 20, 600);
        let window = *[64240u16, 65535, 29200].choose(&mut rng).unwrap();
        tcp(&mut rng, dport, ttl, window, &payload)
    }
}

/// Frame `i` of the anomalous class; depends only on `(seed, i)`.
pub fn anomaly_frame(seed: u64, i: usize) -> Vec<u8> {
    let mut rng = stream(seed, "corpus/anomaly", i);
    let ttl = *[64u8, 128, 255, 32].choose(&mut rng).unwrap();
    let dport = if rng.random_bool(0.25) {
        *NORMAL_TCP_PORTS.choose(&mut rng).unwrap()
    } else {
        *ANOMALY_PORTS.choose(&mut rng).unwrap()
    };
    let window = *[64240u16, 1024, 8192, 512].choose(&mut rng).unwrap();
    let payload = if rng.random_bool(0.3) {
        text_payload(&mut rng, 200, 1200)
    } else {
        random_payload(&mut rng, 150, 1400)
    };
    tcp(&mut rng, dport, ttl, window, &payload)
}

pub fn synthetic_frames(seed: u64, n_normal: usize, n_anomaly: usize) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    (
        (0..n_normal).map(|i| normal_frame(seed, i)).collect(),
        (0..n_anomaly).map(|i| anomaly_frame(seed, i)).collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub normal: Vec<EncodedPacket>,
    pub anomaly: Vec<EncodedPacket>,
}

fn encode_all(frames: &[Vec<u8>], name: &str, label: Label) -> Vec<EncodedPacket> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let id = SourceId { file: name.to_string(), index: i as u64 };
            let mut p = encode_frame(f, false, id).expect("synthetic frames pass every cleaning rule");
            p.label = Some(label);
            p
        })
        .collect()
}

/// Labeled normal and anomalous packet vectors.
pub fn make_synthetic_corpus(seed: u64, n_normal: usize, n_anomaly: usize) -> SyntheticCorpus {
    let (n, a) = synthetic_frames(seed, n_normal, n_anomaly);
    SyntheticCorpus {
        normal: encode_all(&n, "synthetic-normal", Label::Normal),
        anomaly: encode_all(&a, "synthetic-anomaly", Label::Anomaly),
    }
}

/// Writes Ethernet frames to a microsecond capture file with one-second spacing.
pub fn write_pcap(frames: &[Vec<u8>], path: &Path) -> Result<(), PacketError> {
    let io = |e: std::io::Error| PacketError::Io(format!("{}: {e}", path.display()));
    let file = File::create(path).map_err(io)?;
    let mut w = PcapWriter::new(BufWriter::new(file), LINKTYPE_ETHERNET).map_err(io)?;
    for (i, f) in frames.iter().enumerate() {
        w.write_frame((1_600_000_000 + i as u32, 0), f, None).map_err(io)?;
    }
    use std::io::Write;
    w.into_inner().flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(ps: &[EncodedPacket]) -> f64 {
        ps.iter().flat_map(|p| p.values.iter()).sum::<f64>() / (ps.len() * ps[0].values.len()) as f64
    }

    #[test]
    fn classes_valid_and_separated() {
        let c = make_synthetic_corpus(7, 400, 400);
        assert_eq!((c.normal.len(), c.anomaly.len()), (400, 400));
        assert!(c.normal.iter().chain(&c.anomaly).all(EncodedPacket::is_valid));
        assert!(mean(&c.anomaly) - mean(&c.normal) > 0.05);
    }

    #[test]
    fn empty_and_prefix_stable() {
        let c = make_synthetic_corpus(1, 0, 3);
        assert!(c.normal.is_empty());
        let longer = make_synthetic_corpus(1, 5, 6);
        assert_eq!(c.anomaly[..], longer.anomaly[..3]);
    }
}
