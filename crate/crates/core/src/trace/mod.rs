//! Packet and flow data model, the JSON-lines trace format, bit-level
//! serialization and timing statistics.

mod capture;
mod serialize;
mod stats;

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use capture::{synthesize_headers, HEADER_LEN, TCP_OPTIONS_OFFSET, TSVAL_OFFSET};
pub use serialize::{
    segment_strides, serialize_flow, unsegment, SerializedFlow, SerializeParams, StrideSequence,
};
pub use stats::{rolling_iat, throughput_bins};

/// Number of modulation classes including natural traffic.
pub const NUM_CLASSES: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketRecord {
    pub ts_us: u64,
    pub size: u32,
    pub dir: i8,
    #[serde(rename = "hdr", with = "hex_bytes")]
    pub header: Vec<u8>,
    #[serde(rename = "pay", with = "hex_bytes")]
    pub payload: Vec<u8>,
    #[serde(rename = "dummy")]
    pub is_dummy: bool,
}

impl PacketRecord {
    pub fn new(ts_us: u64, size: u32) -> Self {
        PacketRecord {
            ts_us,
            size,
            dir: 1,
            header: Vec::new(),
            payload: Vec::new(),
            is_dummy: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dir != 1 && self.dir != -1 {
            return Err(Error::invalid("dir", format!("must be +1 or -1, got {}", self.dir)));
        }
        if (self.size as usize) < self.header.len() + self.payload.len() {
            return Err(Error::invalid(
                "size",
                "smaller than retained header and payload bytes",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowHeader {
    flow_id: String,
    label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTrace {
    pub flow_id: String,
    pub label: u8,
    pub packets: Vec<PacketRecord>,
}

impl FlowTrace {
    pub fn new(flow_id: impl Into<String>, label: u8) -> Self {
        FlowTrace {
            flow_id: flow_id.into(),
            label,
            packets: Vec::new(),
        }
    }

    pub fn with_packets(mut self, packets: Vec<PacketRecord>) -> Self {
        self.packets = packets;
        self
    }

    pub fn is_sorted(&self) -> bool {
        self.packets.windows(2).all(|w| w[0].ts_us <= w[1].ts_us)
    }

    pub fn total_bytes(&self) -> u64 {
        self.packets.iter().map(|p| p.size as u64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label >= NUM_CLASSES {
            return Err(Error::invalid("label", format!("must be < {NUM_CLASSES}")));
        }
        if !self.is_sorted() {
            return Err(Error::invalid("packets", "timestamps must be nondecreasing"));
        }
        self.packets.iter().try_for_each(PacketRecord::validate)
    }

    /// Writes the metadata line followed by one JSON object per packet.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let head = FlowHeader {
            flow_id: self.flow_id.clone(),
            label: self.label,
        };
        serde_json::to_writer(&mut w, &head)?;
        w.write_all(b"\n")?;
        for p in &self.packets {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Trace("missing flow metadata line".into()))??;
        let head: FlowHeader = serde_json::from_str(&first)?;
        let mut flow = FlowTrace::new(head.flow_id, head.label);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PacketRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Trace(format!("packet line {}: {e}", i + 2)))?;
            flow.packets.push(p);
        }
        flow.validate()?;
        Ok(flow)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}
