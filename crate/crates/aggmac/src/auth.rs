//! Authentication schemes and tag computation.
//!
//! Every record is authenticated by a 128-bit *virtual tag*, a PRF of the
//! epoch key, epoch, sequence number, and record plaintext. What actually
//! travels on the wire depends on the negotiated scheme:
//!
//! * `Trad` — the full 16-byte virtual tag on every record.
//! * `Agg(n)` — the XOR of the last `n` virtual tags, carried on every
//!   n-th record. Verification is all-or-nothing per group.
//! * `R2D2(8,o)` — a short tag on every record whose individual bits each
//!   XOR together one tag bit from 8 earlier records, chosen by a seeded
//!   per-bit dependency set. Receivers accumulate security progressively
//!   as later tags arrive; overprovisioning `o` (percent beyond the
//!   128-bit target) buys resilience to loss.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::{prf, prf16, Key};

/// Virtual tag length in bytes (128-bit security target).
pub const TAG_LEN: usize = 16;

/// Contributors per carried bit in the randomized-dependency scheme.
pub const R2D2_CONTRIBUTORS: usize = 8;

/// How far back (in records) a dependency set may reach.
pub const DEPENDENCY_WINDOW: u64 = 34;

/// Records covered by the transition tag when an R2D2 epoch is finalized:
/// half the total verification delay.
pub const R2D2_TRANSITION_SPAN: u64 = DEPENDENCY_WINDOW / 2;

/// The full 128-bit per-record authentication tag, before any aggregation
/// or truncation.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct VirtualTag(pub [u8; TAG_LEN]);

impl VirtualTag {
    /// The all-zero tag, used for records before the start of a session.
    pub const ZERO: VirtualTag = VirtualTag([0u8; TAG_LEN]);

    /// Bit `index` of the tag, most-significant bit first.
    pub fn bit(&self, index: usize) -> u8 {
        (self.0[index / 8] >> (7 - index % 8)) & 1
    }

    pub fn xor_assign(&mut self, other: &VirtualTag) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a ^= b;
        }
    }
}

impl fmt::Debug for VirtualTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualTag(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

/// XOR-fold of a non-empty slice of virtual tags.
pub fn xor_tags(tags: &[VirtualTag]) -> VirtualTag {
    let mut acc = VirtualTag::ZERO;
    for tag in tags {
        acc.xor_assign(tag);
    }
    acc
}

/// A negotiated aggregation scheme for one communication direction.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum AggScheme {
    /// No aggregation: one full 16-byte tag per record (wire id 0x00).
    Trad,
    /// XOR-aggregated tag on every n-th record (wire id 0x01).
    Agg { n: u8 },
    /// Randomized per-bit dependencies, 8 contributors per bit, with
    /// overprovisioning percent `o` (wire id 0x02).
    R2d2 { o: u16 },
}

/// Wire identifier for [`AggScheme::Trad`] / "no aggregation".
pub const SCHEME_ID_NONE: u8 = 0x00;
/// Wire identifier for [`AggScheme::Agg`].
pub const SCHEME_ID_AGG: u8 = 0x01;
/// Wire identifier for [`AggScheme::R2d2`].
pub const SCHEME_ID_R2D2: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemeError {
    #[error("unknown scheme identifier {0:#04x} (0x03-0xff are reserved)")]
    UnknownId(u8),
    #[error("invalid aggregation count {0}: expected 2, 4, 8 or 16")]
    InvalidCount(u8),
    #[error("invalid contributor count {0}: fixed at 8")]
    InvalidContributors(u8),
    #[error("invalid overprovisioning {0}: expected a multiple of 10 in [0, 200]")]
    InvalidOverprovisioning(u16),
    #[error("cannot parse {0:?} as an aggregation scheme")]
    Unparseable(String),
}

impl AggScheme {
    pub fn id(&self) -> u8 {
        match self {
            AggScheme::Trad => SCHEME_ID_NONE,
            AggScheme::Agg { .. } => SCHEME_ID_AGG,
            AggScheme::R2d2 { .. } => SCHEME_ID_R2D2,
        }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        match *self {
            AggScheme::Trad => Ok(()),
            AggScheme::Agg { n } => match n {
                2 | 4 | 8 | 16 => Ok(()),
                other => Err(SchemeError::InvalidCount(other)),
            },
            AggScheme::R2d2 { o } => {
                if o > 200 || o % 10 != 0 {
                    Err(SchemeError::InvalidOverprovisioning(o))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Carried tag length in bytes for the record at `index_in_era`
    /// (0-based, counted from the first record of the scheme's epoch).
    ///
    /// R2D2 widths round up to whole bytes; for the overprovisioning
    /// values in actual use (multiples of 50) the width is exact.
    pub fn carried_tag_len(&self, index_in_era: u64) -> usize {
        match *self {
            AggScheme::Trad => TAG_LEN,
            AggScheme::Agg { n } => {
                if (index_in_era + 1) % u64::from(n) == 0 {
                    TAG_LEN
                } else {
                    0
                }
            }
            AggScheme::R2d2 { o } => (2 * (100 + usize::from(o))).div_ceil(100),
        }
    }

    /// Whether the record at `index_in_era` carries the group tag (Agg only).
    pub fn is_carrier(&self, index_in_era: u64) -> bool {
        match *self {
            AggScheme::Agg { n } => (index_in_era + 1) % u64::from(n) == 0,
            _ => false,
        }
    }

    /// Carried tag width in bits (R2D2), e.g. o=100 gives 32 bits.
    pub fn carried_bits(&self) -> Option<usize> {
        match *self {
            AggScheme::R2d2 { .. } => Some(self.carried_tag_len(0) * 8),
            _ => None,
        }
    }

    /// Average authentication overhead in bytes per record.
    pub fn avg_tag_bytes(&self) -> f64 {
        match *self {
            AggScheme::Trad => TAG_LEN as f64,
            AggScheme::Agg { n } => TAG_LEN as f64 / f64::from(n),
            AggScheme::R2d2 { o } => 2.0 * (1.0 + f64::from(o) / 100.0),
        }
    }

    /// Schemes sort by how little tag data they transmit; larger means
    /// more aggressive aggregation. Used for tie-breaking and for ordering
    /// decision-boundary regions.
    pub fn aggressiveness(&self) -> f64 {
        -self.avg_tag_bytes()
    }
}

impl fmt::Display for AggScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AggScheme::Trad => write!(f, "Trad"),
            AggScheme::Agg { n } => write!(f, "Agg({n})"),
            AggScheme::R2d2 { o } => write!(f, "R2D2(8,{o})"),
        }
    }
}

impl FromStr for AggScheme {
    type Err = SchemeError;

    /// Accepts the compact forms `trad`, `agg8`, `r2d2-100` as well as the
    /// display forms `Agg(8)`, `R2D2(8,100)` (case-insensitive).
    fn from_str(s: &str) -> Result<Self, SchemeError> {
        let norm: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect();
        let scheme = if norm == "trad" || norm == "none" {
            AggScheme::Trad
        } else if let Some(rest) = norm.strip_prefix("agg") {
            let digits = rest.trim_matches(|c| c == '(' || c == ')');
            let n = digits
                .parse::<u8>()
                .map_err(|_| SchemeError::Unparseable(s.to_string()))?;
            AggScheme::Agg { n }
        } else if let Some(rest) = norm.strip_prefix("r2d2") {
            let digits = rest.trim_matches(|c| c == '(' || c == ')' || c == '-' || c == '_');
            // Either "o" or "8,o".
            let o_part = digits.rsplit(',').next().unwrap_or(digits);
            if let Some(n_part) = digits.strip_suffix(&format!(",{o_part}")) {
                let n = n_part
                    .parse::<u8>()
                    .map_err(|_| SchemeError::Unparseable(s.to_string()))?;
                if n != 8 {
                    return Err(SchemeError::InvalidContributors(n));
                }
            }
            let o = o_part
                .parse::<u16>()
                .map_err(|_| SchemeError::Unparseable(s.to_string()))?;
            AggScheme::R2d2 { o }
        } else {
            return Err(SchemeError::Unparseable(s.to_string()));
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl Serialize for AggScheme {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let compact = match *self {
            AggScheme::Trad => "trad".to_string(),
            AggScheme::Agg { n } => format!("agg{n}"),
            AggScheme::R2d2 { o } => format!("r2d2-{o}"),
        };
        serializer.serialize_str(&compact)
    }
}

impl<'de> Deserialize<'de> for AggScheme {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tag material attached to one record.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum CarriedTag {
    /// No tag on this record (Agg non-carrier).
    None,
    /// Aggregated bits: 16 bytes for an Agg carrier, the scheme width for
    /// R2D2.
    Aggregated(Vec<u8>),
    /// A full per-record tag (Trad and all control records).
    Full(VirtualTag),
    /// Two full tags on the first data record after switching to Trad:
    /// one for this record, one folding the not-yet-authenticated tail of
    /// the previous epoch.
    Dual { own: VirtualTag, tail: VirtualTag },
}

impl CarriedTag {
    pub fn wire_len(&self) -> usize {
        match self {
            CarriedTag::None => 0,
            CarriedTag::Aggregated(bytes) => bytes.len(),
            CarriedTag::Full(_) => TAG_LEN,
            CarriedTag::Dual { .. } => 2 * TAG_LEN,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            CarriedTag::None => Vec::new(),
            CarriedTag::Aggregated(bytes) => bytes.clone(),
            CarriedTag::Full(tag) => tag.0.to_vec(),
            CarriedTag::Dual { own, tail } => {
                let mut out = own.0.to_vec();
                out.extend_from_slice(&tail.0);
                out
            }
        }
    }

    /// Bit `index` of an aggregated tag, most-significant bit first.
    pub fn bit(&self, index: usize) -> Option<u8> {
        match self {
            CarriedTag::Aggregated(bytes) => {
                bytes.get(index / 8).map(|b| (b >> (7 - index % 8)) & 1)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("expected {expected} tags to aggregate, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("bit index {bit} out of range for a {bits}-bit tag")]
    BitIndexOutOfRange { bit: usize, bits: usize },
    #[error("operation requires an R2D2 scheme, got {0}")]
    WrongScheme(AggScheme),
}

/// Compute the 128-bit virtual tag of one record.
///
/// Deterministic in all four inputs; the sequence number and epoch are
/// bound into the PRF so replayed or re-epoched content yields a
/// different tag.
pub fn compute_virtual_tag(key: &Key, epoch: u64, seq: u64, record_plaintext: &[u8]) -> VirtualTag {
    VirtualTag(prf16(
        key,
        &[
            b"agg-vtag",
            &epoch.to_be_bytes(),
            &seq.to_be_bytes(),
            record_plaintext,
        ],
    ))
}

/// XOR-aggregate exactly `n` virtual tags into one carried tag.
pub fn agg_aggregate(tags: &[VirtualTag], n: usize) -> Result<CarriedTag, AuthError> {
    if tags.len() != n || n == 0 {
        return Err(AuthError::LengthMismatch {
            expected: n,
            got: tags.len(),
        });
    }
    Ok(CarriedTag::Aggregated(xor_tags(tags).0.to_vec()))
}

/// The ordered backward offsets feeding one carried-tag bit.
///
/// Offsets are distinct and lie in `[1, DEPENDENCY_WINDOW]`; entry `k`
/// selects the record `carrier_seq - offset[k]`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DependencySet {
    offsets: [u8; R2D2_CONTRIBUTORS],
}

impl DependencySet {
    pub fn offsets(&self) -> &[u8; R2D2_CONTRIBUTORS] {
        &self.offsets
    }

    pub fn contains(&self, offset: u8) -> bool {
        self.offsets.contains(&offset)
    }

    fn draw(rng: &mut ChaCha8Rng) -> DependencySet {
        let mut offsets = [0u8; R2D2_CONTRIBUTORS];
        let mut seen = [false; DEPENDENCY_WINDOW as usize + 1];
        let mut filled = 0;
        // Unbiased range reduction on the raw 32-bit stream; rejection keeps
        // the draw uniform and independent of any library sampler details.
        let window = DEPENDENCY_WINDOW as u32;
        let zone = u32::MAX - (u32::MAX % window);
        while filled < R2D2_CONTRIBUTORS {
            let v = rng.next_u32();
            if v >= zone {
                continue;
            }
            let offset = (v % window) as u8 + 1;
            if !seen[offset as usize] {
                seen[offset as usize] = true;
                offsets[filled] = offset;
                filled += 1;
            }
        }
        DependencySet { offsets }
    }
}

/// Derive the dependency sets for every bit of the tag carried by record
/// `carrier_seq`. Both peers derive identical sets from the shared seed.
pub fn r2d2_dependency_sets(seed: &Key, carrier_seq: u64, tag_bits: usize) -> Vec<DependencySet> {
    let stream_key = prf(
        seed,
        &[
            b"agg-deps",
            &carrier_seq.to_be_bytes(),
            &(tag_bits as u32).to_be_bytes(),
        ],
    );
    let mut rng = ChaCha8Rng::from_seed(stream_key);
    (0..tag_bits).map(|_| DependencySet::draw(&mut rng)).collect()
}

/// Dependency set for a single bit of a carried tag.
pub fn r2d2_dependency(
    seed: &Key,
    carrier_seq: u64,
    bit_index: usize,
    tag_bits: usize,
) -> Result<DependencySet, AuthError> {
    if bit_index >= tag_bits {
        return Err(AuthError::BitIndexOutOfRange {
            bit: bit_index,
            bits: tag_bits,
        });
    }
    Ok(r2d2_dependency_sets(seed, carrier_seq, tag_bits)[bit_index])
}

/// Ring of recent virtual tags kept by a sender (and mirrored by the
/// receiver's ledger) so carried tags and transition tags can be built.
#[derive(Clone, Debug)]
pub struct TagHistory {
    entries: VecDeque<(u64, VirtualTag)>,
    capacity: usize,
}

impl TagHistory {
    pub fn new(capacity: usize) -> TagHistory {
        TagHistory {
            entries: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, seq: u64, tag: VirtualTag) {
        if let Some(&(last, _)) = self.entries.back() {
            assert!(seq > last, "history sequence numbers must increase");
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((seq, tag));
    }

    pub fn get(&self, seq: u64) -> Option<VirtualTag> {
        self.entries
            .iter()
            .rev()
            .find(|(s, _)| *s == seq)
            .map(|(_, t)| *t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Build the carried tag for record `carrier_seq` under an R2D2 scheme.
///
/// Bit `j` XORs, over the 8 entries of its dependency set, bit
/// `(k*b + j) mod 128` of the virtual tag of record
/// `carrier_seq - D_j[k]`. Records from before the session (offset larger
/// than the sequence number) contribute all-zero tags, so the first
/// records of a stream carry well-defined tags.
///
/// The history must contain every referenced in-session record; senders
/// satisfy this by retaining at least [`DEPENDENCY_WINDOW`] tags.
pub fn r2d2_aggregate(
    history: &TagHistory,
    carrier_seq: u64,
    scheme: AggScheme,
    seed: &Key,
) -> Result<CarriedTag, AuthError> {
    let AggScheme::R2d2 { .. } = scheme else {
        return Err(AuthError::WrongScheme(scheme));
    };
    let bits = scheme.carried_bits().expect("checked R2D2 above");
    let sets = r2d2_dependency_sets(seed, carrier_seq, bits);
    let mut out = vec![0u8; bits / 8];
    for (j, set) in sets.iter().enumerate() {
        let mut bit = 0u8;
        for (k, &offset) in set.offsets().iter().enumerate() {
            let tag = match carrier_seq.checked_sub(u64::from(offset)) {
                None => VirtualTag::ZERO,
                Some(seq) => history.get(seq).unwrap_or_else(|| {
                    panic!("virtual tag for record {seq} missing from history")
                }),
            };
            bit ^= tag.bit((k * bits + j) % (TAG_LEN * 8));
        }
        out[j / 8] |= bit << (7 - j % 8);
    }
    Ok(CarriedTag::Aggregated(out))
}
