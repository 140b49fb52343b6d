//! Aggregation negotiation and in-session parameter updates.
//!
//! A client offers aggregation schemes per direction inside a handshake
//! extension; the server picks one scheme per direction (or `0x00` for
//! none). Servers that do not know the extension simply ignore it and the
//! session runs with full per-record tags.
//!
//! Once running, the *receiver* of a data stream may request different
//! parameters with an aggregation-update message. The requester derives a
//! new decryption epoch immediately; the data sender switches its
//! encryption epoch when the update arrives, acknowledges with the last
//! sequence number of the old epoch, and closes the old epoch out with a
//! scheme-specific transition tag so the trailing records still reach
//! full security.

use std::ops::RangeInclusive;

use crate::auth::{
    xor_tags, AggScheme, SchemeError, TagHistory, VirtualTag, R2D2_TRANSITION_SPAN,
    SCHEME_ID_AGG, SCHEME_ID_NONE, SCHEME_ID_R2D2, TAG_LEN,
};

/// Extension type value carried in the handshake.
pub const EXTENSION_TYPE: u8 = 0x64;

/// Handshake message type of an aggregation update.
pub const HANDSHAKE_AGGREGATION_UPDATE: u8 = 0x1A;

/// Handshake message type of the end-of-session finalization tag.
pub const HANDSHAKE_FINALIZE: u8 = 0x1B;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("truncated extension or update message")]
    Truncated,
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("offer lists must not be empty")]
    EmptyOffer,
    #[error("an update is already outstanding in this direction")]
    UpdateBusy,
    #[error("update retransmissions exhausted")]
    UpdateAborted,
    #[error("unexpected message type {0:#04x}")]
    UnexpectedMessage(u8),
}

fn encode_scheme_entry(scheme: &AggScheme, out: &mut Vec<u8>) {
    match *scheme {
        AggScheme::Trad => out.push(SCHEME_ID_NONE),
        AggScheme::Agg { n } => {
            out.push(SCHEME_ID_AGG);
            out.push(n);
        }
        AggScheme::R2d2 { o } => {
            out.push(SCHEME_ID_R2D2);
            out.push(8);
            out.push((o / 10) as u8);
        }
    }
}

fn decode_scheme_entry(bytes: &[u8]) -> Result<(AggScheme, usize), SessionError> {
    let id = *bytes.first().ok_or(SessionError::Truncated)?;
    match id {
        SCHEME_ID_NONE => Ok((AggScheme::Trad, 1)),
        SCHEME_ID_AGG => {
            let n = *bytes.get(1).ok_or(SessionError::Truncated)?;
            let scheme = AggScheme::Agg { n };
            scheme.validate()?;
            Ok((scheme, 2))
        }
        SCHEME_ID_R2D2 => {
            let n = *bytes.get(1).ok_or(SessionError::Truncated)?;
            if n != 8 {
                return Err(SchemeError::InvalidContributors(n).into());
            }
            let o = u16::from(*bytes.get(2).ok_or(SessionError::Truncated)?) * 10;
            let scheme = AggScheme::R2d2 { o };
            scheme.validate()?;
            Ok((scheme, 3))
        }
        other => Err(SchemeError::UnknownId(other).into()),
    }
}

/// The client's advertised schemes, per direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtensionOffer {
    pub server_to_client: Vec<AggScheme>,
    pub client_to_server: Vec<AggScheme>,
}

impl ExtensionOffer {
    /// Wire form: server-to-client entries, a null separator, then
    /// client-to-server entries. Offered entries are always aggregating
    /// schemes, so the separator byte is unambiguous.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for scheme in &self.server_to_client {
            encode_scheme_entry(scheme, &mut out);
        }
        out.push(SCHEME_ID_NONE);
        for scheme in &self.client_to_server {
            encode_scheme_entry(scheme, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<ExtensionOffer, SessionError> {
        let mut server_to_client = Vec::new();
        let mut client_to_server = Vec::new();
        let mut cursor = 0;
        let mut in_second_list = false;
        while cursor < bytes.len() {
            if bytes[cursor] == SCHEME_ID_NONE && !in_second_list {
                in_second_list = true;
                cursor += 1;
                continue;
            }
            let (scheme, used) = decode_scheme_entry(&bytes[cursor..])?;
            cursor += used;
            if in_second_list {
                client_to_server.push(scheme);
            } else {
                server_to_client.push(scheme);
            }
        }
        if server_to_client.is_empty() || client_to_server.is_empty() {
            return Err(SessionError::EmptyOffer);
        }
        Ok(ExtensionOffer {
            server_to_client,
            client_to_server,
        })
    }
}

/// The server's selection: exactly one scheme per direction, where
/// [`AggScheme::Trad`] stands for "no aggregation".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtensionResponse {
    pub server_to_client: AggScheme,
    pub client_to_server: AggScheme,
}

impl ExtensionResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode_scheme_entry(&self.server_to_client, &mut out);
        encode_scheme_entry(&self.client_to_server, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<ExtensionResponse, SessionError> {
        let (server_to_client, used) = decode_scheme_entry(bytes)?;
        let (client_to_server, used2) = decode_scheme_entry(&bytes[used..])?;
        if used + used2 != bytes.len() {
            return Err(SessionError::Truncated);
        }
        Ok(ExtensionResponse {
            server_to_client,
            client_to_server,
        })
    }
}

/// Server-side selection: per direction, the most preferred supported
/// scheme that the client offered, falling back to no aggregation.
pub fn negotiate(offer: &ExtensionOffer, preferences: &[AggScheme]) -> ExtensionResponse {
    let pick = |offered: &[AggScheme]| {
        preferences
            .iter()
            .find(|p| offered.contains(p))
            .copied()
            .unwrap_or(AggScheme::Trad)
    };
    ExtensionResponse {
        server_to_client: pick(&offer.server_to_client),
        client_to_server: pick(&offer.client_to_server),
    }
}

/// Body of an aggregation-update handshake message. The message sequence
/// number keeps retransmissions idempotent at the peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateRequest {
    pub msg_seq: u16,
    pub scheme: AggScheme,
}

impl UpdateRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![HANDSHAKE_AGGREGATION_UPDATE];
        out.extend_from_slice(&self.msg_seq.to_be_bytes());
        encode_scheme_entry(&self.scheme, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<UpdateRequest, SessionError> {
        if bytes.len() < 4 {
            return Err(SessionError::Truncated);
        }
        if bytes[0] != HANDSHAKE_AGGREGATION_UPDATE {
            return Err(SessionError::UnexpectedMessage(bytes[0]));
        }
        let msg_seq = u16::from_be_bytes([bytes[1], bytes[2]]);
        let (scheme, used) = decode_scheme_entry(&bytes[3..])?;
        if 3 + used != bytes.len() {
            return Err(SessionError::Truncated);
        }
        Ok(UpdateRequest { msg_seq, scheme })
    }
}

/// Acknowledgment of an update: echoes the message sequence, names the
/// last record of the previous epoch, and carries the old scheme's
/// transition tag when one is called for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateAck {
    pub msg_seq: u16,
    pub last_prev_epoch_seq: u64,
    pub transition_tag: Option<VirtualTag>,
}

impl UpdateAck {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.msg_seq.to_be_bytes());
        out.extend_from_slice(&self.last_prev_epoch_seq.to_be_bytes());
        if let Some(tag) = &self.transition_tag {
            out.extend_from_slice(&tag.0);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<UpdateAck, SessionError> {
        if bytes.len() != 10 && bytes.len() != 10 + TAG_LEN {
            return Err(SessionError::Truncated);
        }
        let msg_seq = u16::from_be_bytes([bytes[0], bytes[1]]);
        let mut seq_bytes = [0u8; 8];
        seq_bytes.copy_from_slice(&bytes[2..10]);
        let transition_tag = if bytes.len() == 10 + TAG_LEN {
            let mut tag = [0u8; TAG_LEN];
            tag.copy_from_slice(&bytes[10..]);
            Some(VirtualTag(tag))
        } else {
            None
        };
        Ok(UpdateAck {
            msg_seq,
            last_prev_epoch_seq: u64::from_be_bytes(seq_bytes),
            transition_tag,
        })
    }
}

/// End-of-session finalization: one full tag over a trailing range so a
/// stream can be closed out with everything verifiable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finalize {
    pub first_covered: u64,
    pub last_covered: u64,
    pub tag: VirtualTag,
}

impl Finalize {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![HANDSHAKE_FINALIZE];
        out.extend_from_slice(&self.first_covered.to_be_bytes());
        out.extend_from_slice(&self.last_covered.to_be_bytes());
        out.extend_from_slice(&self.tag.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Finalize, SessionError> {
        if bytes.len() != 1 + 16 + TAG_LEN {
            return Err(SessionError::Truncated);
        }
        if bytes[0] != HANDSHAKE_FINALIZE {
            return Err(SessionError::UnexpectedMessage(bytes[0]));
        }
        let mut a = [0u8; 8];
        let mut b = [0u8; 8];
        a.copy_from_slice(&bytes[1..9]);
        b.copy_from_slice(&bytes[9..17]);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[17..]);
        Ok(Finalize {
            first_covered: u64::from_be_bytes(a),
            last_covered: u64::from_be_bytes(b),
            tag: VirtualTag(tag),
        })
    }
}

/// How an old epoch's trailing records get authenticated after an update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionPlan {
    /// Nothing outstanding (old scheme was Trad, or the tail is empty).
    Nothing,
    /// The acknowledgment carries an aggregate over this range.
    TagOnAck(RangeInclusive<u64>),
    /// Switching to Trad: the first data record of the new epoch carries
    /// two tags, its own plus an aggregate over this range.
    DualOnFirstData(RangeInclusive<u64>),
}

/// Decide the transition mechanics when leaving `old_scheme` for
/// `new_scheme`, given the old era's first sequence and its last sent
/// sequence.
pub fn transition_plan(
    old_scheme: AggScheme,
    new_scheme: AggScheme,
    era_start: u64,
    last_seq: Option<u64>,
) -> TransitionPlan {
    let Some(last) = last_seq else {
        return TransitionPlan::Nothing;
    };
    if last < era_start {
        return TransitionPlan::Nothing;
    }
    match old_scheme {
        AggScheme::Trad => TransitionPlan::Nothing,
        AggScheme::Agg { n } => {
            let sent = last - era_start + 1;
            let tail = sent % u64::from(n);
            if tail == 0 {
                return TransitionPlan::Nothing;
            }
            let range = (last + 1 - tail)..=last;
            if new_scheme == AggScheme::Trad {
                TransitionPlan::DualOnFirstData(range)
            } else {
                TransitionPlan::TagOnAck(range)
            }
        }
        AggScheme::R2d2 { .. } => {
            let first = last
                .saturating_sub(R2D2_TRANSITION_SPAN - 1)
                .max(era_start);
            TransitionPlan::TagOnAck(first..=last)
        }
    }
}

/// XOR aggregate over a sequence range, if every tag is in the history.
pub fn aggregate_range(history: &TagHistory, range: RangeInclusive<u64>) -> Option<VirtualTag> {
    let mut tags = Vec::new();
    for seq in range {
        tags.push(history.get(seq)?);
    }
    if tags.is_empty() {
        return None;
    }
    Some(xor_tags(&tags))
}

/// Requester side of the update exchange. One outstanding update at a
/// time; retransmit on a slot-count timeout until acknowledged or out of
/// retries.
#[derive(Debug)]
pub struct UpdateInitiator {
    timeout_slots: u32,
    max_retries: u32,
    next_msg_seq: u16,
    pending: Option<PendingUpdate>,
}

#[derive(Debug)]
struct PendingUpdate {
    request: UpdateRequest,
    slots_waited: u32,
    retries: u32,
}

/// What the initiator wants done after a clock tick.
#[derive(Debug, PartialEq, Eq)]
pub enum TickAction {
    None,
    /// Send this request again.
    Retransmit(UpdateRequest),
    /// Retries exhausted; the session must be torn down.
    Abort,
}

/// A completed update as seen by the initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletedUpdate {
    pub scheme: AggScheme,
    pub last_prev_epoch_seq: u64,
}

impl UpdateInitiator {
    pub fn new(timeout_slots: u32, max_retries: u32) -> UpdateInitiator {
        UpdateInitiator {
            timeout_slots: timeout_slots.max(1),
            max_retries,
            next_msg_seq: 0,
            pending: None,
        }
    }

    pub fn is_busy(&self) -> bool {
        self.pending.is_some()
    }

    /// Start an update. Errors while a previous one is outstanding.
    pub fn request_update(&mut self, scheme: AggScheme) -> Result<UpdateRequest, SessionError> {
        if self.pending.is_some() {
            return Err(SessionError::UpdateBusy);
        }
        let request = UpdateRequest {
            msg_seq: self.next_msg_seq,
            scheme,
        };
        self.next_msg_seq = self.next_msg_seq.wrapping_add(1);
        self.pending = Some(PendingUpdate {
            request,
            slots_waited: 0,
            retries: 0,
        });
        Ok(request)
    }

    /// Advance the retransmission clock by one slot.
    pub fn tick(&mut self) -> TickAction {
        let Some(pending) = self.pending.as_mut() else {
            return TickAction::None;
        };
        pending.slots_waited += 1;
        if pending.slots_waited < self.timeout_slots {
            return TickAction::None;
        }
        if pending.retries >= self.max_retries {
            self.pending = None;
            return TickAction::Abort;
        }
        pending.retries += 1;
        pending.slots_waited = 0;
        TickAction::Retransmit(pending.request)
    }

    /// Process an acknowledgment; stale message sequences are ignored.
    pub fn on_ack(&mut self, msg_seq: u16, last_prev_epoch_seq: u64) -> Option<CompletedUpdate> {
        let pending = self.pending.as_ref()?;
        if pending.request.msg_seq != msg_seq {
            return None;
        }
        let scheme = pending.request.scheme;
        self.pending = None;
        Some(CompletedUpdate {
            scheme,
            last_prev_epoch_seq,
        })
    }
}

/// Responder side: applies an update once and re-acknowledges duplicates
/// with the very same body, so a lost acknowledgment costs nothing.
#[derive(Debug, Default)]
pub struct UpdateResponder {
    last_msg_seq: Option<u16>,
    last_ack: Option<UpdateAck>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum ResponderAction {
    /// First sight of this update: apply it and send the given ack.
    Apply(UpdateRequest),
    /// Retransmission of an already-applied update: resend the stored ack.
    RepeatAck(UpdateAck),
    /// Older than what was already applied; drop it.
    Stale,
}

impl UpdateResponder {
    pub fn on_update(&mut self, request: UpdateRequest) -> ResponderAction {
        match self.last_msg_seq {
            Some(last) if request.msg_seq == last => match &self.last_ack {
                Some(ack) => ResponderAction::RepeatAck(ack.clone()),
                None => ResponderAction::Stale,
            },
            Some(last) if request.msg_seq < last => ResponderAction::Stale,
            _ => ResponderAction::Apply(request),
        }
    }

    /// Record the acknowledgment actually sent, for idempotent replay.
    pub fn store_ack(&mut self, msg_seq: u16, ack: UpdateAck) {
        self.last_msg_seq = Some(msg_seq);
        self.last_ack = Some(ack);
    }
}
