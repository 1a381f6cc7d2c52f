//! Bit-exact little-endian encoding of enhancer groups and uploads.
//!
//! Group layout:
//!
//! ```text
//! "FETG" | version u16 | group_id u32 | task_id u32 | D u16 | d u32 | b u32
//! | domain_len u32 | domain ids u32… | f32 payload… | crc32 u32
//! ```
//!
//! The payload holds, per enhancer, `W_down` (row-major), `β_down`, `W_up`
//! (row-major), `β_up`, then the head row-major (`d × |domain|`). The CRC covers
//! every preceding byte and is checked before anything else is parsed, so any
//! single corrupted byte surfaces as [`WireError::Checksum`].

use thiserror::Error;

use crate::enhancer::{ClassId, EnhancerError, EnhancerGroup, EnhancerParams};
use crate::memory::LabelDistribution;
use crate::tensor::{Activation, Tensor};

pub const GROUP_MAGIC: [u8; 4] = *b"FETG";
pub const UPLOAD_MAGIC: [u8; 4] = *b"FETU";
pub const VERSION: u16 = 1;
/// Fixed bytes before the domain ids.
pub const GROUP_HEADER_LEN: usize = 28;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("message is {got} bytes, shorter than the {needed}-byte minimum")]
    Truncated { needed: usize, got: usize },
    #[error("{}", checksum_message(*stored, *computed, *declared, *actual))]
    Checksum {
        stored: u32,
        computed: u32,
        /// Length implied by the (unverified) header, if it parses.
        declared: Option<usize>,
        actual: usize,
    },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("header declares {expected} bytes, message has {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value {value} at payload index {index} does not fit in f32")]
    NotRepresentable { index: usize, value: f64 },
    #[error("{field} = {value} does not fit in the wire field")]
    FieldOverflow { field: &'static str, value: usize },
    #[error("invalid group: {0}")]
    Group(#[from] EnhancerError),
    #[error("invalid label distribution in upload")]
    Distribution,
}

fn checksum_message(stored: u32, computed: u32, declared: Option<usize>, actual: usize) -> String {
    let mut s = format!("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}");
    match declared {
        Some(n) if n > actual => s += &format!(" (header declares {n} bytes, got {actual}: truncated)"),
        Some(n) if n < actual => s += &format!(" (header declares {n} bytes, got {actual}: trailing data)"),
        _ => {}
    }
    s
}

pub type Result<T> = std::result::Result<T, WireError>;

/// Exact serialized length of a group.
pub fn group_byte_len(depth: usize, width: usize, bottleneck: usize, domain: usize) -> usize {
    GROUP_HEADER_LEN
        + 4 * domain
        + 4 * crate::federation::cost::comm_cost(depth as u64, width as u64, bottleneck as u64, domain as u64) as usize
        + CRC_LEN
}

/// Number of f32 values carried by a serialized group.
pub fn payload_floats(bytes: &[u8]) -> Result<usize> {
    let g = Reader::checked(bytes, &GROUP_MAGIC)?;
    let h = read_group_header(g)?;
    Ok((bytes.len() - GROUP_HEADER_LEN - 4 * h.domain_len - CRC_LEN) / 4)
}

fn u32_field(field: &'static str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| WireError::FieldOverflow { field, value })
}

pub fn serialize_group(group: &EnhancerGroup) -> Result<Vec<u8>> {
    let depth = u16::try_from(group.depth()).map_err(|_| WireError::FieldOverflow {
        field: "depth",
        value: group.depth(),
    })?;
    let (d, b) = (group.width(), group.bottleneck());
    let mut out = Vec::with_capacity(group_byte_len(group.depth(), d, b, group.domain.len()));
    out.extend_from_slice(&GROUP_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&group.group_id.to_le_bytes());
    out.extend_from_slice(&group.task_id.to_le_bytes());
    out.extend_from_slice(&depth.to_le_bytes());
    out.extend_from_slice(&u32_field("width", d)?.to_le_bytes());
    out.extend_from_slice(&u32_field("bottleneck", b)?.to_le_bytes());
    out.extend_from_slice(&u32_field("domain", group.domain.len())?.to_le_bytes());
    for c in &group.domain {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let mut index = 0;
    for t in group.tensors() {
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(WireError::NotRepresentable { index, value: v });
            }
            out.extend_from_slice(&f.to_le_bytes());
            index += 1;
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes a group; adapters get the default (GELU) activation.
pub fn deserialize_group(bytes: &[u8]) -> Result<EnhancerGroup> {
    deserialize_group_as(bytes, Activation::default())
}

pub fn deserialize_group_as(bytes: &[u8], activation: Activation) -> Result<EnhancerGroup> {
    let mut r = Reader::checked(bytes, &GROUP_MAGIC)?;
    let h = read_group_header(r.clone())?;
    r.pos = GROUP_HEADER_LEN;
    let domain: Vec<ClassId> = (0..h.domain_len).map(|_| r.u32()).collect();
    let (d, b) = (h.width, h.bottleneck);
    let mut take = |rows: usize, cols: usize| -> Result<Tensor> {
        let data = (0..rows * cols).map(|_| f64::from(r.f32())).collect();
        Ok(Tensor::matrix(rows, cols, data).map_err(EnhancerError::from)?)
    };
    let mut enhancers = Vec::with_capacity(h.depth);
    for _ in 0..h.depth {
        let w_down = take(d, b)?;
        let b_down = take(1, b)?;
        let w_up = take(b, d)?;
        let b_up = take(1, d)?;
        enhancers.push(EnhancerParams::new(w_down, b_down, w_up, b_up, activation)?);
    }
    let head = take(d, domain.len())?;
    Ok(EnhancerGroup::new(h.group_id, h.task_id, enhancers, head, domain)?)
}

#[derive(Debug, Clone, Copy)]
struct GroupHeader {
    group_id: u32,
    task_id: u32,
    depth: usize,
    width: usize,
    bottleneck: usize,
    domain_len: usize,
}

fn read_group_header(mut r: Reader<'_>) -> Result<GroupHeader> {
    r.pos = 6;
    let group_id = r.u32();
    let task_id = r.u32();
    let depth = r.u16() as usize;
    let width = r.u32() as usize;
    let bottleneck = r.u32() as usize;
    let domain_len = r.u32() as usize;
    let expected = declared_group_len(r.bytes);
    if expected != Some(r.bytes.len()) {
        return Err(WireError::LengthMismatch {
            expected: expected.unwrap_or(usize::MAX),
            got: r.bytes.len(),
        });
    }
    Ok(GroupHeader {
        group_id,
        task_id,
        depth,
        width,
        bottleneck,
        domain_len,
    })
}

/// Length implied by a group header, without trusting the CRC.
fn declared_group_len(bytes: &[u8]) -> Option<usize> {
    if bytes.len() < GROUP_HEADER_LEN {
        return None;
    }
    let u16_at = |p: usize| u16::from_le_bytes([bytes[p], bytes[p + 1]]) as u64;
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().expect("4 bytes")) as u64;
    let (dd, d, b, n) = (u16_at(14), u32_at(16), u32_at(20), u32_at(24));
    let floats = dd
        .checked_mul(2u64.checked_mul(d)?.checked_mul(b)?.checked_add(d)?.checked_add(b)?)?
        .checked_add(d.checked_mul(n)?)?;
    let len = (GROUP_HEADER_LEN as u64)
        .checked_add(n.checked_mul(4)?)?
        .checked_add(floats.checked_mul(4)?)?
        .checked_add(CRC_LEN as u64)?;
    usize::try_from(len).ok()
}

#[derive(Clone)]
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verifies minimum length, CRC, magic and version, in that order.
    fn checked(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let needed = 6 + CRC_LEN;
        if bytes.len() < needed {
            return Err(WireError::Truncated {
                needed,
                got: bytes.len(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            let declared = if magic == &GROUP_MAGIC {
                declared_group_len(bytes)
            } else {
                None
            };
            return Err(WireError::Checksum {
                stored,
                computed,
                declared,
                actual: bytes.len(),
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &found != magic {
            return Err(WireError::BadMagic(found));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(WireError::UnsupportedVersion(version));
        }
        if magic == &GROUP_MAGIC && bytes.len() < GROUP_HEADER_LEN + CRC_LEN {
            return Err(WireError::Truncated {
                needed: GROUP_HEADER_LEN + CRC_LEN,
                got: bytes.len(),
            });
        }
        Ok(Self { bytes, pos: 6 })
    }

    fn remaining(&self) -> usize {
        self.bytes.len().saturating_sub(self.pos + CRC_LEN)
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let a = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        a
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// What a client sends after a round for one touched group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupUpload {
    pub client_id: u32,
    pub task_id: u32,
    pub group_id: u32,
    /// Entropy (nats) of the client's task label distribution.
    pub entropy: f64,
    pub label_distribution: LabelDistribution,
    pub group_bytes: Vec<u8>,
}

impl GroupUpload {
    /// `"FETU" | version | client | task | group | entropy f64 | n u32 |
    /// (class u32, p f64)… | group_len u32 | group bytes | crc32`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let probs = self.label_distribution.probabilities();
        let mut out = Vec::with_capacity(36 + 12 * probs.len() + self.group_bytes.len());
        out.extend_from_slice(&UPLOAD_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&self.task_id.to_le_bytes());
        out.extend_from_slice(&self.group_id.to_le_bytes());
        out.extend_from_slice(&self.entropy.to_le_bytes());
        out.extend_from_slice(&u32_field("label count", probs.len())?.to_le_bytes());
        for (c, p) in probs {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.extend_from_slice(&u32_field("group length", self.group_bytes.len())?.to_le_bytes());
        out.extend_from_slice(&self.group_bytes);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::checked(bytes, &UPLOAD_MAGIC)?;
        let short = |r: &Reader<'_>, need: usize| -> Result<()> {
            if r.remaining() < need {
                Err(WireError::LengthMismatch {
                    expected: r.pos + need + CRC_LEN,
                    got: r.bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        short(&r, 24)?;
        let client_id = r.u32();
        let task_id = r.u32();
        let group_id = r.u32();
        let entropy = r.f64();
        let n = r.u32() as usize;
        short(&r, n.saturating_mul(12))?;
        let mut probs = std::collections::BTreeMap::new();
        for _ in 0..n {
            let c = r.u32();
            probs.insert(c, r.f64());
        }
        short(&r, 4)?;
        let len = r.u32() as usize;
        if r.remaining() != len {
            return Err(WireError::LengthMismatch {
                expected: r.pos + len + CRC_LEN,
                got: bytes.len(),
            });
        }
        let group_bytes = bytes[r.pos..r.pos + len].to_vec();
        let label_distribution = LabelDistribution::new(probs).map_err(|_| WireError::Distribution)?;
        Ok(Self {
            client_id,
            task_id,
            group_id,
            entropy,
            label_distribution,
            group_bytes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EnhancerGroup {
        let e = EnhancerParams::new(
            Tensor::matrix(2, 1, vec![0.5, -0.25]).unwrap(),
            Tensor::matrix(1, 1, vec![0.125]).unwrap(),
            Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
            Tensor::matrix(1, 2, vec![-1.0, 0.0]).unwrap(),
            Activation::Gelu,
        )
        .unwrap();
        EnhancerGroup::new(3, 9, vec![e], Tensor::matrix(2, 1, vec![0.75, -0.5]).unwrap(), vec![42]).unwrap()
    }

    #[test]
    fn tiny_group_layout() {
        let bytes = serialize_group(&tiny()).unwrap();
        assert_eq!(bytes.len(), 28 + 4 + 4 * 9 + 4);
        assert_eq!(bytes.len(), group_byte_len(1, 2, 1, 1));
        assert_eq!(&bytes[..4], b"FETG");
        assert_eq!(payload_floats(&bytes).unwrap(), 9);
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 42);
        assert_eq!(f32::from_le_bytes(bytes[32..36].try_into().unwrap()), 0.5);
        let back = deserialize_group(&bytes).unwrap();
        assert_eq!(back, tiny());
        assert_eq!(serialize_group(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_and_truncation() {
        let bytes = serialize_group(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[40] ^= 0x01;
        assert!(matches!(deserialize_group(&bad), Err(WireError::Checksum { .. })));
        let cut = &bytes[..bytes.len() - 3];
        match deserialize_group(cut) {
            Err(e @ WireError::Checksum { .. }) => assert!(e.to_string().contains("truncated")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(deserialize_group(&bytes[..5]), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_with_valid_crc() {
        let mut bytes = serialize_group(&tiny()).unwrap();
        bytes[0] = b'X';
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(deserialize_group(&bytes), Err(WireError::BadMagic(_))));
    }

    #[test]
    fn upload_round_trip() {
        let up = GroupUpload {
            client_id: 2,
            task_id: 1,
            group_id: 3,
            entropy: std::f64::consts::LN_2,
            label_distribution: LabelDistribution::from_counts([(4, 1), (5, 1)]).unwrap(),
            group_bytes: serialize_group(&tiny()).unwrap(),
        };
        let bytes = up.encode().unwrap();
        assert_eq!(GroupUpload::decode(&bytes).unwrap(), up);
        let mut bad = bytes.clone();
        bad[10] ^= 0x80;
        assert!(matches!(GroupUpload::decode(&bad), Err(WireError::Checksum { .. })));
    }
}
