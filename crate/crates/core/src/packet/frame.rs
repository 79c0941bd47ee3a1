//! Link/network/transport dissection and the cleaning rules applied to each packet.

use super::{EncodedPacket, PacketError, SourceId, CANONICAL_LEN, HEADER_SLOT};

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
const ETH_HEADER_LEN: usize = 14;
const VLAN_TAG_LEN: usize = 4;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;
pub const DNS_PORT: u16 = 53;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterReason {
    Kept,
    Dns,
    Arp,
    TcpControl,
    Unparseable,
}

impl FilterReason {
    pub fn name(self) -> &'static str {
        match self {
            FilterReason::Kept => "KEPT",
            FilterReason::Dns => "DNS",
            FilterReason::Arp => "ARP",
            FilterReason::TcpControl => "TCP_CONTROL",
            FilterReason::Unparseable => "UNPARSEABLE",
        }
    }
}

/// Cleaning decision. `keep` holds exactly when `reason` is `Kept`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterVerdict {
    pub keep: bool,
    pub reason: FilterReason,
}

impl FilterVerdict {
    pub fn kept() -> Self {
        FilterVerdict {
            keep: true,
            reason: FilterReason::Kept,
        }
    }

    pub fn drop(reason: FilterReason) -> Self {
        debug_assert_ne!(reason, FilterReason::Kept);
        FilterVerdict { keep: false, reason }
    }
}

/// Outcome of removing the Ethernet header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LinkPayload<'a> {
    Network(&'a [u8]),
    Drop(FilterReason),
}

pub fn strip_link_layer(frame: &[u8]) -> Result<LinkPayload<'_>, PacketError> {
    if frame.len() < ETH_HEADER_LEN {
        return Err(PacketError::TooShort(frame.len()));
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    match ethertype {
        ETHERTYPE_ARP => Ok(LinkPayload::Drop(FilterReason::Arp)),
        ETHERTYPE_VLAN => {
            let end = ETH_HEADER_LEN + VLAN_TAG_LEN;
            if frame.len() < end {
                return Err(PacketError::TooShort(frame.len()));
            }
            let inner = u16::from_be_bytes([frame[16], frame[17]]);
            if inner == ETHERTYPE_ARP {
                return Ok(LinkPayload::Drop(FilterReason::Arp));
            }
            Ok(LinkPayload::Network(&frame[end..]))
        }
        _ => Ok(LinkPayload::Network(&frame[ETH_HEADER_LEN..])),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportProtocol {
    Tcp,
    Udp,
    Other(u8),
}

/// IPv4 packet split into its header, transport header and payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedPacket {
    pub ip_header: Vec<u8>,
    pub transport_protocol: TransportProtocol,
    pub transport_header: Vec<u8>,
    pub payload: Vec<u8>,
    pub src_ip: [u8; 4],
    pub dst_ip: [u8; 4],
    pub src_port: u16,
    pub dst_port: u16,
    /// TCP flag byte; present only for TCP.
    pub tcp_flags: Option<u8>,
}

/// Dissects an IPv4 datagram. Bytes past the IP total length (link padding) are ignored.
pub fn parse_network_transport(bytes: &[u8]) -> Result<ParsedPacket, PacketError> {
    if bytes.is_empty() {
        return Err(PacketError::HeaderTruncated);
    }
    let version = bytes[0] >> 4;
    if version != 4 {
        return Err(PacketError::NotIpv4(version));
    }
    let ihl = (bytes[0] & 0x0f) as usize;
    if ihl < 5 {
        return Err(PacketError::BadIhl(ihl as u8));
    }
    let ip_len = ihl * 4;
    if bytes.len() < ip_len {
        return Err(PacketError::HeaderTruncated);
    }
    let total = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
    let end = if total >= ip_len && total <= bytes.len() {
        total
    } else {
        bytes.len()
    };
    let datagram = &bytes[..end];
    let ip_header = datagram[..ip_len].to_vec();
    let src_ip = ip_header[12..16].try_into().unwrap();
    let dst_ip = ip_header[16..20].try_into().unwrap();
    let rest = &datagram[ip_len..];

    let (transport_protocol, th_len) = match ip_header[9] {
        IPPROTO_TCP => {
            if rest.len() < 20 {
                return Err(PacketError::HeaderTruncated);
            }
            let off = (rest[12] >> 4) as usize;
            if off < 5 {
                return Err(PacketError::BadDataOffset(off as u8));
            }
            (TransportProtocol::Tcp, off * 4)
        }
        IPPROTO_UDP => (TransportProtocol::Udp, 8),
        p => (TransportProtocol::Other(p), 0),
    };
    if rest.len() < th_len {
        return Err(PacketError::HeaderTruncated);
    }
    let transport_header = rest[..th_len].to_vec();
    let payload = rest[th_len..].to_vec();
    let (src_port, dst_port) = if th_len >= 4 {
        (
            u16::from_be_bytes([rest[0], rest[1]]),
            u16::from_be_bytes([rest[2], rest[3]]),
        )
    } else {
        (0, 0)
    };
    let tcp_flags = match transport_protocol {
        TransportProtocol::Tcp => Some(rest[13]),
        _ => None,
    };
    Ok(ParsedPacket {
        ip_header,
        transport_protocol,
        transport_header,
        payload,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        tcp_flags,
    })
}

pub fn filter_packet(p: &ParsedPacket) -> FilterVerdict {
    if let TransportProtocol::Other(_) = p.transport_protocol {
        return FilterVerdict::drop(FilterReason::Unparseable);
    }
    if p.src_port == DNS_PORT || p.dst_port == DNS_PORT {
        return FilterVerdict::drop(FilterReason::Dns);
    }
    if p.transport_protocol == TransportProtocol::Tcp && p.payload.is_empty() {
        return FilterVerdict::drop(FilterReason::TcpControl);
    }
    FilterVerdict::kept()
}

/// Zeroes both addresses and the header checksum; the checksum is not recomputed.
pub fn anonymize(mut p: ParsedPacket) -> ParsedPacket {
    p.ip_header[10..12].fill(0);
    p.ip_header[12..20].fill(0);
    p.src_ip = [0; 4];
    p.dst_ip = [0; 4];
    p
}

/// Canonical byte layout: IP header and transport header each padded to 60 bytes, then the payload,
/// truncated or zero-padded to 1600 bytes.
pub fn canonical_bytes(p: &ParsedPacket) -> Vec<u8> {
    let mut out = vec![0u8; CANONICAL_LEN];
    let ip = p.ip_header.len().min(HEADER_SLOT);
    out[..ip].copy_from_slice(&p.ip_header[..ip]);
    let th = p.transport_header.len().min(HEADER_SLOT);
    out[HEADER_SLOT..HEADER_SLOT + th].copy_from_slice(&p.transport_header[..th]);
    let start = 2 * HEADER_SLOT;
    let n = p.payload.len().min(CANONICAL_LEN - start);
    out[start..start + n].copy_from_slice(&p.payload[..n]);
    out
}

pub fn canonicalize(p: &ParsedPacket, source_id: SourceId) -> EncodedPacket {
    let values = canonical_bytes(p).into_iter().map(|b| b as f64 / 255.0).collect();
    EncodedPacket {
        values,
        label: None,
        source_id,
    }
}

/// Frame builders for fixtures and the synthetic corpus.
pub mod build {
    use super::*;

    /// IPv4 header with the given options appended (length must be a multiple of 4, at most 40).
    pub fn ipv4_header(proto: u8, src: [u8; 4], dst: [u8; 4], ttl: u8, options: &[u8], body_len: usize) -> Vec<u8> {
        assert!(options.len().is_multiple_of(4) && options.len() <= 40);
        let ihl = 5 + options.len() / 4;
        let total = (ihl * 4 + body_len) as u16;
        let mut h = vec![0x40 | ihl as u8, 0];
        h.extend_from_slice(&total.to_be_bytes());
        h.extend_from_slice(&[0x12, 0x34, 0x40, 0x00, ttl, proto, 0, 0]);
        h.extend_from_slice(&src);
        h.extend_from_slice(&dst);
        h.extend_from_slice(options);
        let sum = checksum(&h);
        h[10..12].copy_from_slice(&sum.to_be_bytes());
        h
    }

    fn checksum(h: &[u8]) -> u16 {
        let mut s: u32 = h
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
            .sum();
        while s > 0xffff {
            s = (s & 0xffff) + (s >> 16);
        }
        !(s as u16)
    }

    pub fn tcp_header(sport: u16, dport: u16, seq: u32, flags: u8, window: u16, options: &[u8]) -> Vec<u8> {
        assert!(options.len().is_multiple_of(4) && options.len() <= 40);
        let off = 5 + options.len() / 4;
        let mut h = Vec::with_capacity(off * 4);
        h.extend_from_slice(&sport.to_be_bytes());
        h.extend_from_slice(&dport.to_be_bytes());
        h.extend_from_slice(&seq.to_be_bytes());
        h.extend_from_slice(&0u32.to_be_bytes());
        h.push((off as u8) << 4);
        h.push(flags);
        h.extend_from_slice(&window.to_be_bytes());
        h.extend_from_slice(&[0, 0, 0, 0]);
        h.extend_from_slice(options);
        h
    }

    pub fn udp_header(sport: u16, dport: u16, payload_len: usize) -> Vec<u8> {
        let mut h = Vec::with_capacity(8);
        h.extend_from_slice(&sport.to_be_bytes());
        h.extend_from_slice(&dport.to_be_bytes());
        h.extend_from_slice(&((8 + payload_len) as u16).to_be_bytes());
        h.extend_from_slice(&[0, 0]);
        h
    }

    /// Ethernet II frame; `vlan` inserts an 802.1Q tag.
    pub fn ethernet(ethertype: u16, vlan: Option<u16>, body: &[u8]) -> Vec<u8> {
        let mut f = vec![0x02, 0, 0, 0, 0, 1, 0x02, 0, 0, 0, 0, 2];
        if let Some(tag) = vlan {
            f.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
            f.extend_from_slice(&tag.to_be_bytes());
        }
        f.extend_from_slice(&ethertype.to_be_bytes());
        f.extend_from_slice(body);
        f
    }

    pub fn tcp_frame(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, flags: u8, payload: &[u8]) -> Vec<u8> {
        let tcp = tcp_header(sport, dport, 1, flags, 65535, &[]);
        let ip = ipv4_header(IPPROTO_TCP, src, dst, 64, &[], tcp.len() + payload.len());
        ethernet(ETHERTYPE_IPV4, None, &[ip, tcp, payload.to_vec()].concat())
    }

    pub fn udp_frame(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
        let udp = udp_header(sport, dport, payload.len());
        let ip = ipv4_header(IPPROTO_UDP, src, dst, 64, &[], udp.len() + payload.len());
        ethernet(ETHERTYPE_IPV4, None, &[ip, udp, payload.to_vec()].concat())
    }
}

#[cfg(test)]
mod tests {
    use super::build::*;
    use super::*;

    const A: [u8; 4] = [10, 0, 0, 1];
    const B: [u8; 4] = [8, 8, 8, 8];

    fn parse(frame: &[u8]) -> ParsedPacket {
        match strip_link_layer(frame).unwrap() {
            LinkPayload::Network(b) => parse_network_transport(b).unwrap(),
            LinkPayload::Drop(r) => panic!("dropped {r:?}"),
        }
    }

    #[test]
    fn arp_dropped_at_link_layer() {
        let f = ethernet(ETHERTYPE_ARP, None, &[0u8; 28]);
        assert_eq!(strip_link_layer(&f).unwrap(), LinkPayload::Drop(FilterReason::Arp));
    }

    #[test]
    fn plain_ethernet_slice() {
        let body: Vec<u8> = (0..40).collect();
        let f = ethernet(ETHERTYPE_IPV4, None, &body);
        assert_eq!(strip_link_layer(&f).unwrap(), LinkPayload::Network(&body[..]));
        assert!(matches!(strip_link_layer(&f[..13]), Err(PacketError::TooShort(13))));
    }

    #[test]
    fn vlan_offset_is_eighteen() {
        let body: Vec<u8> = (100..140).collect();
        let f = ethernet(ETHERTYPE_IPV4, Some(7), &body);
        match strip_link_layer(&f).unwrap() {
            LinkPayload::Network(b) => {
                assert_eq!(b, &f[18..]);
                assert_eq!(b, &body[..]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn udp_payload_and_ihl6() {
        let p = parse(&udp_frame(A, B, 5000, 6000, &[1, 2, 3, 4]));
        assert_eq!(p.payload, vec![1, 2, 3, 4]);
        assert_eq!(p.transport_header.len(), 8);
        assert_eq!(p.tcp_flags, None);

        let udp = udp_header(1, 2, 0);
        let ip = ipv4_header(IPPROTO_UDP, A, B, 64, &[1, 1, 1, 0], 8);
        let p = parse_network_transport(&[ip, udp].concat()).unwrap();
        assert_eq!(p.ip_header.len(), 24);
        assert!(p.payload.is_empty());
    }

    #[test]
    fn parse_errors() {
        let mut v6 = vec![0x60; 40];
        v6[0] = 0x60;
        assert!(matches!(parse_network_transport(&v6), Err(PacketError::NotIpv4(6))));
        let mut bad = ipv4_header(IPPROTO_UDP, A, B, 64, &[], 0);
        bad[0] = 0x44;
        assert!(matches!(parse_network_transport(&bad), Err(PacketError::BadIhl(4))));
        let ip = ipv4_header(IPPROTO_TCP, A, B, 64, &[], 20);
        assert!(matches!(
            parse_network_transport(&[ip.clone(), vec![0; 10]].concat()),
            Err(PacketError::HeaderTruncated)
        ));
        assert!(matches!(parse_network_transport(&ip[..12]), Err(PacketError::HeaderTruncated)));
    }

    #[test]
    fn link_padding_is_not_payload() {
        let mut f = tcp_frame(A, B, 40000, 443, 0x02, &[]);
        f.extend_from_slice(&[0u8; 6]);
        let p = parse(&f);
        assert!(p.payload.is_empty());
        assert_eq!(filter_packet(&p).reason, FilterReason::TcpControl);
    }

    #[test]
    fn filter_rules() {
        let dns = parse(&udp_frame(A, B, 33000, 53, &[0xab; 30]));
        assert_eq!(filter_packet(&dns), FilterVerdict::drop(FilterReason::Dns));
        let dns_reply = parse(&udp_frame(B, A, 53, 33000, &[0xab; 30]));
        assert_eq!(filter_packet(&dns_reply).reason, FilterReason::Dns);
        let syn = parse(&tcp_frame(A, B, 40000, 443, 0x02, &[]));
        assert_eq!(filter_packet(&syn), FilterVerdict::drop(FilterReason::TcpControl));
        let data = parse(&tcp_frame(B, A, 443, 50000, 0x18, &[7; 100]));
        assert_eq!(filter_packet(&data), FilterVerdict::kept());
        let icmp_ip = ipv4_header(1, A, B, 64, &[], 8);
        let icmp = parse_network_transport(&[icmp_ip, vec![8, 0, 0, 0, 0, 0, 0, 0]].concat()).unwrap();
        assert_eq!(filter_packet(&icmp).reason, FilterReason::Unparseable);
    }

    #[test]
    fn anonymize_touches_only_addresses_and_checksum() {
        let p = parse(&tcp_frame(A, B, 443, 50000, 0x18, &[9; 33]));
        let q = anonymize(p.clone());
        assert_eq!(q.src_ip, [0; 4]);
        assert_eq!(q.dst_ip, [0; 4]);
        assert_eq!(q.payload, p.payload);
        assert_eq!(q.transport_header, p.transport_header);
        for i in 0..p.ip_header.len() {
            if (10..20).contains(&i) {
                assert_eq!(q.ip_header[i], 0);
            } else {
                assert_eq!(q.ip_header[i], p.ip_header[i]);
            }
        }
        assert_eq!(anonymize(q.clone()), q);
    }

    #[test]
    fn canonical_layout() {
        let p = anonymize(parse(&tcp_frame(A, B, 443, 50000, 0x10, &[])));
        let bytes = canonical_bytes(&p);
        assert_eq!(bytes.len(), 1600);
        assert_eq!(&bytes[..20], &p.ip_header[..]);
        assert!(bytes[20..60].iter().all(|&b| b == 0));
        assert_eq!(&bytes[60..80], &p.transport_header[..]);
        assert!(bytes[80..].iter().all(|&b| b == 0));

        let u = anonymize(parse(&udp_frame(A, B, 1, 2, &[0xff, 0x00, 0x80])));
        let e = canonicalize(&u, SourceId::default());
        assert_eq!(&e.values[60..68], &u.transport_header.iter().map(|&b| b as f64 / 255.0).collect::<Vec<_>>()[..]);
        assert!(e.values[68..120].iter().all(|&v| v == 0.0));
        assert_eq!(e.values[120], 1.0);
        assert_eq!(e.values[121], 0.0);

        let big = anonymize(parse(&tcp_frame(A, B, 443, 50000, 0x18, &vec![0x41; 2000])));
        let e = canonicalize(&big, SourceId::default());
        assert_eq!(e.values.len(), 1600);
        assert!(e.values[120..].iter().all(|&v| v == 0x41 as f64 / 255.0));
    }
}
