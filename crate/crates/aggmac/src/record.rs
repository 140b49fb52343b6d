//! Protected-record encoding and per-epoch key material.
//!
//! Records use the compact 2-byte header: one flags byte and one masked
//! low sequence byte, followed by the ciphertext. The payload is encrypted
//! with a length-preserving PRF keystream (no padding), and the carried
//! tag bytes are appended in the clear:
//!
//! ```text
//! flags | masked seq | enc(content_type || payload) | tag bytes
//! ```
//!
//! Before aggregation is negotiated the content type sits at the *end* of
//! the encrypted region ([`Layout::Standard`]); afterwards it moves to the
//! front ([`Layout::CtFirst`]) so a receiver can decrypt one byte and know
//! how to parse the rest, tags of varying width included.

use crate::auth::CarriedTag;
use crate::crypto::{prf, prf16, Key, KEY_LEN};

/// Link-layer MTU of the simulated radio.
pub const LINK_MTU: usize = 127;

/// Bytes consumed by link-layer framing, leaving [`FRAME_BUDGET`] for the
/// record. With a 16-byte tag the largest payload is 91 bytes; the
/// slimmest aggregated records stretch that to 104.
pub const LINK_OVERHEAD: usize = 17;

/// Maximum record size (header + ciphertext + tag).
pub const FRAME_BUDGET: usize = LINK_MTU - LINK_OVERHEAD;

/// Record header length: flags byte plus masked low sequence byte.
pub const HEADER_LEN: usize = 2;

pub const CONTENT_HANDSHAKE: u8 = 22;
pub const CONTENT_APPLICATION: u8 = 23;
pub const CONTENT_ACK: u8 = 26;

const FLAGS_BASE: u8 = 0b0010_0000;
const FLAG_EPOCH_MASK: u8 = 0b0000_0011;
const FLAG_HAS_TAG: u8 = 0b0000_0100;
const FLAG_DUAL_TAG: u8 = 0b0000_1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("record payload must not be empty")]
    EmptyPayload,
    #[error("record of {len} bytes exceeds the {budget}-byte frame budget")]
    FrameTooLarge { len: usize, budget: usize },
    #[error("frame of {0} bytes is shorter than the minimal record")]
    FrameTooShort(usize),
    #[error("unrecognized header flags {0:#04x}")]
    BadHeader(u8),
    #[error("ciphertext too short for a {tag_len}-byte tag")]
    TagUnderflow { tag_len: usize },
    #[error("epoch counter exhausted")]
    EpochOverflow,
}

/// Where the content type sits inside the encrypted region.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Layout {
    /// Content type trails the payload (pre-negotiation records).
    Standard,
    /// Content type leads the ciphertext (after aggregation is agreed).
    CtFirst,
}

/// Key material for one epoch of one direction.
///
/// The chained secret derives the next epoch; the three working keys are
/// derived from the secret under distinct labels, so knowing epoch `e+1`
/// requires epoch `e`'s secret.
#[derive(Clone)]
pub struct EpochKeys {
    epoch: u64,
    secret: Key,
    enc_key: Key,
    mac_key: Key,
    sn_key: Key,
}

impl EpochKeys {
    /// Derive the epoch-0 keys from a direction secret.
    pub fn initial(secret: Key) -> EpochKeys {
        EpochKeys {
            epoch: 0,
            enc_key: prf16(&secret, &[b"agg-enc"]),
            mac_key: prf16(&secret, &[b"agg-mac"]),
            sn_key: prf16(&secret, &[b"agg-sn"]),
            secret,
        }
    }

    /// Advance to the next epoch the way a key update would: chain the
    /// secret under a fixed label and re-derive the working keys.
    pub fn next_epoch(&self) -> Result<EpochKeys, CodecError> {
        if self.epoch == u64::MAX {
            return Err(CodecError::EpochOverflow);
        }
        let secret = prf16(&self.secret, &[b"agg-update"]);
        let mut next = EpochKeys::initial(secret);
        next.epoch = self.epoch + 1;
        Ok(next)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn mac_key(&self) -> &Key {
        &self.mac_key
    }
}

impl std::fmt::Debug for EpochKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Key bytes deliberately not printed.
        f.debug_struct("EpochKeys").field("epoch", &self.epoch).finish()
    }
}

fn keystream_xor(keys: &EpochKeys, seq: u64, data: &mut [u8]) {
    let mut block = 0u32;
    let mut offset = 0;
    while offset < data.len() {
        let ks = prf(
            &keys.enc_key,
            &[
                b"agg-ks",
                &keys.epoch.to_be_bytes(),
                &seq.to_be_bytes(),
                &block.to_be_bytes(),
            ],
        );
        for (d, k) in data[offset..].iter_mut().zip(ks.iter()) {
            *d ^= k;
        }
        offset += ks.len();
        block += 1;
    }
}

/// Mask for sequence-number encryption, derived from the ciphertext.
///
/// When the ciphertext reaches 16 bytes the mask input is simply its first
/// 16 bytes. Shorter ciphertexts are prefixed with the 8-byte big-endian
/// epoch number (so collisions cannot span epochs) and zero-padded.
pub fn seq_mask(keys: &EpochKeys, ciphertext: &[u8], epoch: u64) -> [u8; 2] {
    let input = mask_input(ciphertext, epoch);
    let out = prf(&keys.sn_key, &[b"agg-mask", &input]);
    [out[0], out[1]]
}

/// The exact 16 bytes fed to the masking PRF for a given ciphertext:
/// the ciphertext itself when long enough, otherwise the first 16 bytes
/// of `epoch || ciphertext || zero padding`. Exposed so collision
/// behaviour of short records can be measured.
pub fn mask_input(ciphertext: &[u8], epoch: u64) -> [u8; KEY_LEN] {
    let mut input = [0u8; KEY_LEN];
    if ciphertext.len() >= KEY_LEN {
        input.copy_from_slice(&ciphertext[..KEY_LEN]);
    } else {
        let take = ciphertext.len().min(KEY_LEN - 8);
        input[..8].copy_from_slice(&epoch.to_be_bytes());
        input[8..8 + take].copy_from_slice(&ciphertext[..take]);
    }
    input
}

/// A decoded record, fields recovered exactly as encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedRecord {
    pub seq: u64,
    pub content_type: u8,
    pub payload: Vec<u8>,
    pub tag: Vec<u8>,
    pub dual: bool,
}

/// Encode one protected record.
///
/// Encryption is a stream cipher keyed per (epoch, sequence): no length
/// expansion, no padding, so `decode(encode(x)) = x` field for field.
pub fn encode_record(
    keys: &EpochKeys,
    seq: u64,
    content_type: u8,
    payload: &[u8],
    carried: &CarriedTag,
    layout: Layout,
) -> Result<Vec<u8>, CodecError> {
    encode_record_with_budget(keys, seq, content_type, payload, carried, layout, FRAME_BUDGET)
}

pub fn encode_record_with_budget(
    keys: &EpochKeys,
    seq: u64,
    content_type: u8,
    payload: &[u8],
    carried: &CarriedTag,
    layout: Layout,
    budget: usize,
) -> Result<Vec<u8>, CodecError> {
    if payload.is_empty() {
        return Err(CodecError::EmptyPayload);
    }
    let tag_bytes = carried.to_bytes();
    let total = HEADER_LEN + 1 + payload.len() + tag_bytes.len();
    if total > budget {
        return Err(CodecError::FrameTooLarge {
            len: total,
            budget,
        });
    }

    let mut inner = Vec::with_capacity(1 + payload.len());
    match layout {
        Layout::CtFirst => {
            inner.push(content_type);
            inner.extend_from_slice(payload);
        }
        Layout::Standard => {
            inner.extend_from_slice(payload);
            inner.push(content_type);
        }
    }
    keystream_xor(keys, seq, &mut inner);

    let mut ciphertext = inner;
    ciphertext.extend_from_slice(&tag_bytes);

    let mut flags = FLAGS_BASE | (keys.epoch as u8 & FLAG_EPOCH_MASK);
    if !tag_bytes.is_empty() {
        flags |= FLAG_HAS_TAG;
    }
    if matches!(carried, CarriedTag::Dual { .. }) {
        flags |= FLAG_DUAL_TAG;
    }

    let mask = seq_mask(keys, &ciphertext, keys.epoch);
    let mut frame = Vec::with_capacity(HEADER_LEN + ciphertext.len());
    frame.push(flags);
    frame.push((seq & 0xff) as u8 ^ mask[0]);
    frame.extend_from_slice(&ciphertext);
    Ok(frame)
}

/// Epoch bits a receiver reads before choosing keys.
pub fn peek_epoch_bits(frame: &[u8]) -> Result<u8, CodecError> {
    if frame.len() < HEADER_LEN + 2 {
        return Err(CodecError::FrameTooShort(frame.len()));
    }
    if frame[0] & !(FLAG_EPOCH_MASK | FLAG_HAS_TAG | FLAG_DUAL_TAG) != FLAGS_BASE {
        return Err(CodecError::BadHeader(frame[0]));
    }
    Ok(frame[0] & FLAG_EPOCH_MASK)
}

/// Decode one record.
///
/// `resolve_seq` maps the unmasked low sequence byte to the full sequence
/// number (receivers track the next expected value). `tag_width` reports
/// the width of a present single tag given the decrypted content type and
/// sequence; it is only consulted when the header announces a tag.
pub fn decode_record(
    keys: &EpochKeys,
    frame: &[u8],
    layout: Layout,
    resolve_seq: impl FnOnce(u8) -> u64,
    tag_width: impl FnOnce(u8, u64) -> usize,
) -> Result<DecodedRecord, CodecError> {
    if frame.len() < HEADER_LEN + 2 {
        return Err(CodecError::FrameTooShort(frame.len()));
    }
    let flags = frame[0];
    if flags & !(FLAG_EPOCH_MASK | FLAG_HAS_TAG | FLAG_DUAL_TAG) != FLAGS_BASE {
        return Err(CodecError::BadHeader(flags));
    }
    let dual = flags & FLAG_DUAL_TAG != 0;
    let has_tag = flags & FLAG_HAS_TAG != 0;

    let ciphertext = &frame[HEADER_LEN..];
    let mask = seq_mask(keys, ciphertext, keys.epoch);
    let seq = resolve_seq(frame[1] ^ mask[0]);

    match layout {
        Layout::CtFirst => {
            // One decrypted byte reveals the content type; everything after
            // it can then be split into payload and tag.
            let mut first = [ciphertext[0]];
            keystream_xor(keys, seq, &mut first);
            let content_type = first[0];

            let tag_len = if dual {
                2 * crate::auth::TAG_LEN
            } else if has_tag {
                tag_width(content_type, seq)
            } else {
                0
            };
            let enc_len = ciphertext
                .len()
                .checked_sub(tag_len)
                .filter(|&n| n >= 2)
                .ok_or(CodecError::TagUnderflow { tag_len })?;

            let mut inner = ciphertext[..enc_len].to_vec();
            keystream_xor(keys, seq, &mut inner);
            Ok(DecodedRecord {
                seq,
                content_type,
                payload: inner[1..].to_vec(),
                tag: ciphertext[enc_len..].to_vec(),
                dual,
            })
        }
        Layout::Standard => {
            // Pre-negotiation records always end in a full tag.
            let tag_len = crate::auth::TAG_LEN;
            let enc_len = ciphertext
                .len()
                .checked_sub(tag_len)
                .filter(|&n| n >= 2)
                .ok_or(CodecError::TagUnderflow { tag_len })?;
            let mut inner = ciphertext[..enc_len].to_vec();
            keystream_xor(keys, seq, &mut inner);
            let content_type = *inner.last().expect("length checked above");
            inner.pop();
            Ok(DecodedRecord {
                seq,
                content_type,
                payload: inner,
                tag: ciphertext[enc_len..].to_vec(),
                dual,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{compute_virtual_tag, VirtualTag};
    use proptest::prelude::*;

    fn keys() -> EpochKeys {
        EpochKeys::initial([9u8; 16])
    }

    #[test]
    fn roundtrip_ct_first() {
        let k = keys();
        let tag = compute_virtual_tag(k.mac_key(), 0, 7, b"hello");
        let frame = encode_record(
            &k,
            7,
            CONTENT_APPLICATION,
            b"hello",
            &CarriedTag::Full(tag),
            Layout::CtFirst,
        )
        .unwrap();
        let decoded = decode_record(&k, &frame, Layout::CtFirst, |low| {
            assert_eq!(low, 7);
            7
        }, |_, _| 16)
        .unwrap();
        assert_eq!(decoded.seq, 7);
        assert_eq!(decoded.content_type, CONTENT_APPLICATION);
        assert_eq!(decoded.payload, b"hello");
        assert_eq!(decoded.tag, tag.0.to_vec());
        assert!(!decoded.dual);
    }

    #[test]
    fn roundtrip_standard() {
        let k = keys();
        let tag = VirtualTag([0xAA; 16]);
        let frame = encode_record(
            &k,
            3,
            CONTENT_HANDSHAKE,
            b"offer",
            &CarriedTag::Full(tag),
            Layout::Standard,
        )
        .unwrap();
        let decoded =
            decode_record(&k, &frame, Layout::Standard, |_| 3, |_, _| 16).unwrap();
        assert_eq!(decoded.content_type, CONTENT_HANDSHAKE);
        assert_eq!(decoded.payload, b"offer");
        assert_eq!(decoded.tag, tag.0.to_vec());
    }

    #[test]
    fn trad_frame_is_29_bytes_for_10_byte_payload() {
        let k = keys();
        let tag = VirtualTag([1; 16]);
        let frame = encode_record(
            &k,
            0,
            CONTENT_APPLICATION,
            &[0u8; 10],
            &CarriedTag::Full(tag),
            Layout::CtFirst,
        )
        .unwrap();
        // header 2 + content type 1 + payload 10 + tag 16
        assert_eq!(frame.len(), 29);
    }

    #[test]
    fn untagged_single_byte_record_is_two_byte_ciphertext() {
        let k = keys();
        let frame = encode_record(
            &k,
            5,
            CONTENT_APPLICATION,
            &[0x42],
            &CarriedTag::None,
            Layout::CtFirst,
        )
        .unwrap();
        assert_eq!(frame.len() - HEADER_LEN, 2);
        assert_eq!(frame.len(), 4);
    }

    #[test]
    fn length_is_preserved_exactly() {
        let k = keys();
        for payload_len in [1usize, 2, 17, 40, 91] {
            for tag in [
                CarriedTag::None,
                CarriedTag::Aggregated(vec![5; 3]),
                CarriedTag::Full(VirtualTag([2; 16])),
            ] {
                let payload = vec![7u8; payload_len];
                let Ok(frame) = encode_record(
                    &k,
                    1,
                    CONTENT_APPLICATION,
                    &payload,
                    &tag,
                    Layout::CtFirst,
                ) else {
                    assert!(HEADER_LEN + 1 + payload_len + tag.wire_len() > FRAME_BUDGET);
                    continue;
                };
                assert_eq!(
                    frame.len() - HEADER_LEN,
                    1 + payload_len + tag.wire_len()
                );
            }
        }
    }

    #[test]
    fn oversized_and_empty_records_are_rejected() {
        let k = keys();
        let err = encode_record(
            &k,
            0,
            CONTENT_APPLICATION,
            &[0u8; 92],
            &CarriedTag::Full(VirtualTag([0; 16])),
            Layout::CtFirst,
        )
        .unwrap_err();
        assert!(matches!(err, CodecError::FrameTooLarge { .. }));
        // 91 bytes with a full tag is exactly the budget.
        assert!(encode_record(
            &k,
            0,
            CONTENT_APPLICATION,
            &[0u8; 91],
            &CarriedTag::Full(VirtualTag([0; 16])),
            Layout::CtFirst,
        )
        .is_ok());
        assert_eq!(
            encode_record(&k, 0, CONTENT_APPLICATION, b"", &CarriedTag::None, Layout::CtFirst),
            Err(CodecError::EmptyPayload)
        );
    }

    #[test]
    fn mask_is_deterministic_and_epoch_bound() {
        let k = keys();
        let short = [0x01, 0x02];
        assert_eq!(seq_mask(&k, &short, 0), seq_mask(&k, &short, 0));
        assert_ne!(seq_mask(&k, &short, 0), seq_mask(&k, &short, 1));
        // Long ciphertexts ignore the epoch argument entirely.
        let long = [0x55u8; 20];
        assert_eq!(seq_mask(&k, &long, 0), seq_mask(&k, &long, 1));
    }

    #[test]
    fn mask_path_switches_at_16_bytes() {
        let fifteen = [3u8; 15];
        let sixteen = [3u8; 16];
        let inp15 = mask_input(&fifteen, 2);
        let inp16 = mask_input(&sixteen, 2);
        assert_eq!(&inp15[..8], &2u64.to_be_bytes());
        assert_eq!(&inp15[8..], &fifteen[..8]);
        assert_eq!(inp16, sixteen);

        // Short path pads with zeros when epoch plus ciphertext underfills.
        let two = [9u8, 8u8];
        let inp2 = mask_input(&two, 1);
        assert_eq!(&inp2[..8], &1u64.to_be_bytes());
        assert_eq!(&inp2[8..10], &two);
        assert_eq!(&inp2[10..], &[0u8; 6]);
    }

    #[test]
    fn epoch_chain_is_deterministic_and_distinct() {
        let a = EpochKeys::initial([4u8; 16]);
        let b = EpochKeys::initial([4u8; 16]);
        let a1 = a.next_epoch().unwrap();
        let b1 = b.next_epoch().unwrap();
        assert_eq!(a1.epoch(), 1);
        assert_eq!(a1.enc_key, b1.enc_key);
        assert_eq!(a1.sn_key, b1.sn_key);
        assert_ne!(a1.enc_key, a.enc_key);
        assert_ne!(a1.mac_key, a.mac_key);
        assert_ne!(a1.sn_key, a.sn_key);

        // A chain of three updates is reproducible from the initial secret.
        let mut chain = EpochKeys::initial([4u8; 16]);
        for _ in 0..3 {
            chain = chain.next_epoch().unwrap();
        }
        let again = EpochKeys::initial([4u8; 16])
            .next_epoch()
            .unwrap()
            .next_epoch()
            .unwrap()
            .next_epoch()
            .unwrap();
        assert_eq!(chain.epoch(), 3);
        assert_eq!(chain.enc_key, again.enc_key);
    }

    proptest! {
        #[test]
        fn roundtrip_any_payload_and_tag(
            payload in proptest::collection::vec(any::<u8>(), 1..60),
            tag_kind in 0u8..3,
            seq in 0u64..100_000,
            ct in prop_oneof![Just(CONTENT_APPLICATION), Just(CONTENT_HANDSHAKE), Just(CONTENT_ACK)],
        ) {
            let k = keys();
            let carried = match tag_kind {
                0 => CarriedTag::None,
                1 => CarriedTag::Aggregated(vec![0xC3; 4]),
                _ => CarriedTag::Full(VirtualTag([0x77; 16])),
            };
            let width = carried.wire_len();
            let frame = encode_record(&k, seq, ct, &payload, &carried, Layout::CtFirst).unwrap();
            let mut unmasked_low = None;
            let decoded = decode_record(&k, &frame, Layout::CtFirst,
                |low| { unmasked_low = Some(low); seq },
                |_, _| width).unwrap();
            prop_assert_eq!(unmasked_low, Some((seq & 0xff) as u8));
            prop_assert_eq!(decoded.seq, seq);
            prop_assert_eq!(decoded.content_type, ct);
            prop_assert_eq!(decoded.payload, payload);
            prop_assert_eq!(decoded.tag, carried.to_bytes());
        }
    }
}
