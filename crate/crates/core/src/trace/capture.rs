//! Header synthesis at the observation point.
//!
//! Simulated packets carry no wire headers until they are captured. The
//! sniffer view is an IPv4 header followed by a TCP header with the
//! timestamp option (NOP, NOP, TS), which is what a Linux endpoint emits by
//! default. The TSval clock ticks in milliseconds and is relative to the
//! first captured packet of the flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FlowTrace;

pub const IPV4_LEN: usize = 20;
pub const TCP_OPTIONS_OFFSET: usize = IPV4_LEN + 20;
pub const TSVAL_OFFSET: usize = TCP_OPTIONS_OFFSET + 4;
pub const HEADER_LEN: usize = TSVAL_OFFSET + 8;

fn ipv4_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Rewrites every packet header of `flow` as captured on the wire.
/// Connection identifiers (addresses, ports, ISN, IP ID base) are drawn
/// from `seed`.
pub fn synthesize_headers(flow: &mut FlowTrace, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: [u8; 4] = [10, rng.random(), rng.random(), rng.random()];
    let dst: [u8; 4] = [rng.random_range(1..224), rng.random(), rng.random(), rng.random()];
    let sport: u16 = rng.random_range(32768..61000);
    let dport: u16 = 443;
    let isn: u32 = rng.random();
    let ack: u32 = rng.random();
    let ip_id: u16 = rng.random();
    let Some(t0) = flow.packets.first().map(|p| p.ts_us) else {
        return;
    };

    let mut seq = isn;
    let mut prev_tsval = 0u32;
    for (i, p) in flow.packets.iter_mut().enumerate() {
        let mut h = vec![0u8; HEADER_LEN];
        let total_len = p.size.min(u16::MAX as u32) as u16;
        h[0] = 0x45;
        h[2..4].copy_from_slice(&total_len.to_be_bytes());
        h[4..6].copy_from_slice(&ip_id.wrapping_add(i as u16).to_be_bytes());
        h[6] = 0x40; // DF
        h[8] = 64;
        h[9] = 6;
        h[12..16].copy_from_slice(&src);
        h[16..20].copy_from_slice(&dst);
        let csum = ipv4_checksum(&h[..IPV4_LEN]);
        h[10..12].copy_from_slice(&csum.to_be_bytes());

        let t = &mut h[IPV4_LEN..];
        t[0..2].copy_from_slice(&sport.to_be_bytes());
        t[2..4].copy_from_slice(&dport.to_be_bytes());
        t[4..8].copy_from_slice(&seq.to_be_bytes());
        t[8..12].copy_from_slice(&ack.to_be_bytes());
        t[12] = ((HEADER_LEN - IPV4_LEN) as u8 / 4) << 4;
        t[13] = 0x18; // PSH | ACK
        t[14..16].copy_from_slice(&501u16.to_be_bytes());
        t[20] = 1;
        t[21] = 1;
        t[22] = 8;
        t[23] = 10;
        let tsval = ((p.ts_us - t0) / 1000) as u32;
        t[24..28].copy_from_slice(&tsval.to_be_bytes());
        t[28..32].copy_from_slice(&prev_tsval.to_be_bytes());
        prev_tsval = tsval;

        seq = seq.wrapping_add(p.size.saturating_sub(HEADER_LEN as u32));
        if p.size < HEADER_LEN as u32 + p.payload.len() as u32 {
            p.payload.truncate(p.size.saturating_sub(HEADER_LEN as u32) as usize);
        }
        p.header = h;
    }
}
