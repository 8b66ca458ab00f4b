use serde::{Deserialize, Serialize};

use super::FlowTrace;
use crate::error::{Error, Result};

/// Truncation and tokenization lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SerializeParams {
    /// Packets retained per flow.
    pub m: usize,
    /// Header bytes retained per packet.
    pub h: usize,
    /// Payload bytes retained per packet.
    pub p: usize,
    /// Stride length in bits.
    pub l_s: usize,
}

impl Default for SerializeParams {
    fn default() -> Self {
        SerializeParams {
            m: 64,
            h: 52,
            p: 0,
            l_s: 416,
        }
    }
}

impl SerializeParams {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("M", self.m), ("L_s", self.l_s)] {
            if v == 0 {
                return Err(Error::invalid(field, "must be > 0"));
            }
        }
        if self.h + self.p == 0 {
            return Err(Error::invalid("H", "H + P must be > 0"));
        }
        Ok(())
    }

    pub fn bits_len(&self) -> usize {
        self.m * (self.h + self.p) * 8
    }

    pub fn n_tokens(&self) -> usize {
        self.bits_len().div_ceil(self.l_s)
    }
}

/// Flow content expanded to one bit per entry, MSB first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedFlow {
    pub bits: Vec<u8>,
    pub m: usize,
    pub h: usize,
    pub p: usize,
}

impl SerializedFlow {
    /// Packs the bits 8 per byte, MSB first.
    pub fn pack(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << (7 - i))))
            .collect()
    }

    pub fn unpack(bytes: &[u8], m: usize, h: usize, p: usize) -> Result<Self> {
        let len = m * (h + p) * 8;
        if bytes.len() * 8 < len {
            return Err(Error::Trace(format!(
                "packed flow has {} bytes, need {}",
                bytes.len(),
                len.div_ceil(8)
            )));
        }
        let mut bits = Vec::with_capacity(len);
        expand_bytes(bytes, &mut bits);
        bits.truncate(len);
        Ok(SerializedFlow { bits, m, h, p })
    }
}

fn expand_bytes(bytes: &[u8], out: &mut Vec<u8>) {
    for &b in bytes {
        for i in (0..8).rev() {
            out.push((b >> i) & 1);
        }
    }
}

/// Zeroes endpoint identity and the per-connection random values (IP ID and
/// checksum, TCP sequence and acknowledgment numbers) in an IPv4 header.
fn anonymize(header: &mut [u8]) {
    if header.is_empty() || header[0] >> 4 != 4 {
        return;
    }
    let ihl = ((header[0] & 0x0f) as usize) * 4;
    let end = header.len();
    let tcp = header.get(9) == Some(&6);
    let l4 = if tcp { ihl + 12 } else { ihl + 4 };
    for i in (4..6).chain(10..20).chain(ihl..l4) {
        if i < end {
            header[i] = 0;
        }
    }
}

/// Fixed-length bit representation of the first `m` packets. Only header
/// and payload bytes are read; timestamps never enter the representation.
pub fn serialize_flow(flow: &FlowTrace, params: &SerializeParams) -> Result<SerializedFlow> {
    params.validate()?;
    let SerializeParams { m, h, p, .. } = *params;
    let mut bytes = vec![0u8; m * (h + p)];
    for (slot, pkt) in bytes.chunks_mut(h + p).zip(&flow.packets) {
        let (hdr_slot, pay_slot) = slot.split_at_mut(h);
        let n = pkt.header.len().min(h);
        hdr_slot[..n].copy_from_slice(&pkt.header[..n]);
        anonymize(hdr_slot);
        let n = pkt.payload.len().min(p);
        pay_slot[..n].copy_from_slice(&pkt.payload[..n]);
    }
    let mut bits = Vec::with_capacity(bytes.len() * 8);
    expand_bytes(&bytes, &mut bits);
    Ok(SerializedFlow { bits, m, h, p })
}

/// `n` non-overlapping strides of `l_s` bits, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrideSequence {
    pub data: Vec<u8>,
    pub n: usize,
    pub l_s: usize,
}

impl StrideSequence {
    pub fn stride(&self, i: usize) -> &[u8] {
        &self.data[i * self.l_s..(i + 1) * self.l_s]
    }

    pub fn strides(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks(self.l_s)
    }
}

/// Splits the bit sequence into strides, zero-filling the last one.
pub fn segment_strides(s: &SerializedFlow, l_s: usize) -> Result<StrideSequence> {
    segment_bits(&s.bits, l_s)
}

pub(crate) fn segment_bits(bits: &[u8], l_s: usize) -> Result<StrideSequence> {
    if l_s == 0 {
        return Err(Error::invalid("L_s", "must be > 0"));
    }
    let n = bits.len().div_ceil(l_s);
    let mut data = bits.to_vec();
    data.resize(n * l_s, 0);
    Ok(StrideSequence { data, n, l_s })
}

/// Concatenates strides and strips the padding back to `len` bits.
pub fn unsegment(seq: &StrideSequence, len: usize) -> Vec<u8> {
    seq.data[..len.min(seq.data.len())].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::PacketRecord;
    use proptest::prelude::*;

    fn pkt(header: &[u8], payload: &[u8]) -> PacketRecord {
        let mut p = PacketRecord::new(0, 1500);
        p.header = header.to_vec();
        p.payload = payload.to_vec();
        p
    }

    fn params(m: usize, h: usize, p: usize) -> SerializeParams {
        SerializeParams { m, h, p, l_s: 8 }
    }

    #[test]
    fn single_byte() {
        let f = FlowTrace::new("a", 0).with_packets(vec![pkt(&[0xA5], &[])]);
        let s = serialize_flow(&f, &params(1, 1, 0)).unwrap();
        assert_eq!(s.bits, vec![1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(s.pack(), vec![0xA5]);
    }

    #[test]
    fn pads_short_flows_and_truncates_long_ones() {
        let pkts: Vec<_> = (0..10u8).map(|i| pkt(&[i + 1, 0xff], &[i])).collect();
        let short = FlowTrace::new("s", 0).with_packets(pkts[..3].to_vec());
        let s = serialize_flow(&short, &params(5, 2, 1)).unwrap();
        assert_eq!(s.bits.len(), 5 * 3 * 8);
        assert!(s.bits[3 * 3 * 8..].iter().all(|&b| b == 0));

        let long = FlowTrace::new("l", 0).with_packets(pkts.clone());
        let mut other = pkts[..5].to_vec();
        other.extend((0..5).map(|_| pkt(&[9, 9, 9], &[7, 7])));
        let other = FlowTrace::new("l", 0).with_packets(other);
        assert_eq!(
            serialize_flow(&long, &params(5, 2, 1)).unwrap(),
            serialize_flow(&other, &params(5, 2, 1)).unwrap()
        );
    }

    #[test]
    fn header_and_payload_fields_are_separate() {
        let f = FlowTrace::new("a", 0).with_packets(vec![pkt(&[0xff], &[0xff, 0x0f])]);
        let s = serialize_flow(&f, &params(1, 2, 1)).unwrap();
        // header padded to 2 bytes, payload truncated to 1
        assert_eq!(s.pack(), vec![0xff, 0x00, 0xff]);
    }

    #[test]
    fn endpoint_fields_are_zeroed() {
        let mut hdr = vec![0xffu8; 40];
        hdr[0] = 0x45;
        hdr[8] = 64;
        hdr[9] = 6;
        let f = FlowTrace::new("a", 0).with_packets(vec![pkt(&hdr, &[])]);
        let bytes = serialize_flow(&f, &params(1, 40, 0)).unwrap().pack();
        assert_eq!(bytes[..4], [0x45, 0xff, 0xff, 0xff]);
        assert_eq!(bytes[4..10], [0, 0, 0xff, 0xff, 64, 6]);
        assert!(bytes[10..32].iter().all(|&b| b == 0));
        assert!(bytes[32..].iter().all(|&b| b == 0xff));

        // UDP keeps everything after the ports
        hdr[9] = 17;
        let f = FlowTrace::new("a", 0).with_packets(vec![pkt(&hdr, &[])]);
        let bytes = serialize_flow(&f, &params(1, 40, 0)).unwrap().pack();
        assert!(bytes[20..24].iter().all(|&b| b == 0));
        assert!(bytes[24..].iter().all(|&b| b == 0xff));
    }

    #[test]
    fn empty_flow_is_all_zero() {
        let s = serialize_flow(&FlowTrace::new("e", 0), &params(3, 2, 2)).unwrap();
        assert_eq!(s.bits.len(), 96);
        assert!(s.bits.iter().all(|&b| b == 0));
        assert!(serialize_flow(&FlowTrace::new("e", 0), &params(0, 2, 2)).is_err());
    }

    #[test]
    fn stride_counts() {
        let bits = vec![1u8; 10];
        let seq = segment_bits(&bits, 4).unwrap();
        assert_eq!(seq.n, 3);
        assert_eq!(seq.stride(2), &[1, 1, 0, 0]);
        let seq = segment_bits(&vec![1u8; 12], 4).unwrap();
        assert_eq!(seq.n, 3);
        assert!(seq.data.iter().all(|&b| b == 1));
        assert!(segment_bits(&bits, 0).is_err());
    }

    #[test]
    fn default_token_count() {
        let p = SerializeParams::default();
        assert_eq!(p.n_tokens(), (p.m * (p.h + p.p) * 8).div_ceil(p.l_s));
    }

    proptest! {
        #[test]
        fn segment_round_trip(bits in prop::collection::vec(0u8..2, 0..300), l_s in 1usize..70) {
            let seq = segment_bits(&bits, l_s).unwrap();
            prop_assert_eq!(seq.n, bits.len().div_ceil(l_s));
            // concatenation oracle
            let concat: Vec<u8> = seq.strides().flat_map(|s| s.iter().copied()).collect();
            prop_assert_eq!(&concat[..bits.len()], &bits[..]);
            prop_assert!(concat[bits.len()..].iter().all(|&b| b == 0));
            prop_assert_eq!(unsegment(&seq, bits.len()), bits);
        }

        #[test]
        fn pack_unpack(bytes in prop::collection::vec(any::<u8>(), 1..40)) {
            let f = FlowTrace::new("x", 0).with_packets(vec![pkt(&[], &bytes)]);
            let p = SerializeParams { m: 1, h: 0, p: bytes.len(), l_s: 8 };
            let s = serialize_flow(&f, &p).unwrap();
            prop_assert_eq!(s.pack(), bytes.clone());
            prop_assert_eq!(SerializedFlow::unpack(&bytes, 1, 0, bytes.len()).unwrap(), s);
        }
    }
}
