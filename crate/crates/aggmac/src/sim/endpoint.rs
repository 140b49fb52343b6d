//! Sender and receiver endpoints wiring the record layer, the scheme
//! schedule, the update exchange, and the verification ledger together.
//!
//! Data flows one way (sender to receiver); the reverse direction carries
//! only control records (aggregation updates), always under full tags.
//! All records of a direction share one sequence space, control included,
//! so group boundaries and dependency windows are well defined even when
//! updates interleave with data.

use std::ops::RangeInclusive;

use crate::auth::{
    agg_aggregate, compute_virtual_tag, r2d2_aggregate, AggScheme, CarriedTag, TagHistory,
    VirtualTag, DEPENDENCY_WINDOW, TAG_LEN,
};
use crate::crypto::Key;
use crate::record::{
    decode_record, encode_record, peek_epoch_bits, CodecError, DecodedRecord, EpochKeys, Layout,
    CONTENT_ACK, CONTENT_APPLICATION, CONTENT_HANDSHAKE,
};
use crate::session::{
    aggregate_range, transition_plan, Finalize, ResponderAction, SessionError, TickAction,
    TransitionPlan, UpdateAck, UpdateInitiator, UpdateRequest, UpdateResponder,
};
use crate::verify::{EntryKind, LedgerConfig, LedgerEvent, VerifyState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

const HISTORY_CAPACITY: usize = 2 * DEPENDENCY_WINDOW as usize;

fn record_plaintext(content_type: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + payload.len());
    out.push(content_type);
    out.extend_from_slice(payload);
    out
}

/// Data-sending endpoint. Owns the encryption epoch of the data
/// direction and answers aggregation updates arriving on the reverse
/// channel.
pub struct DataSender {
    keys: EpochKeys,
    layout: Layout,
    scheme: AggScheme,
    era_start: u64,
    next_seq: u64,
    history: TagHistory,
    deps_seed: Key,
    pending_dual_tail: Option<VirtualTag>,
    responder: UpdateResponder,
    reverse_keys: EpochKeys,
    reverse_expected: u64,
    aggregated_frames: u64,
}

impl DataSender {
    pub fn new(
        keys: EpochKeys,
        reverse_keys: EpochKeys,
        layout: Layout,
        scheme: AggScheme,
        deps_seed: Key,
    ) -> DataSender {
        DataSender {
            keys,
            layout,
            scheme,
            era_start: 0,
            next_seq: 0,
            history: TagHistory::new(HISTORY_CAPACITY),
            deps_seed,
            pending_dual_tail: None,
            responder: UpdateResponder::default(),
            reverse_keys,
            reverse_expected: 0,
            aggregated_frames: 0,
        }
    }

    pub fn scheme(&self) -> AggScheme {
        self.scheme
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Records sent with an aggregated (non-full) tag so far.
    pub fn aggregated_frames(&self) -> u64 {
        self.aggregated_frames
    }

    fn make_tag(&mut self, content_type: u8, payload: &[u8]) -> (u64, VirtualTag) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let vtag = compute_virtual_tag(
            self.keys.mac_key(),
            self.keys.epoch(),
            seq,
            &record_plaintext(content_type, payload),
        );
        self.history.push(seq, vtag);
        (seq, vtag)
    }

    /// Protect and frame one application record.
    pub fn send_data(&mut self, payload: &[u8]) -> Result<Vec<u8>, SimError> {
        let (seq, vtag) = self.make_tag(CONTENT_APPLICATION, payload);
        let carried = if let Some(tail) = self.pending_dual_tail.take() {
            CarriedTag::Dual { own: vtag, tail }
        } else {
            match self.scheme {
                AggScheme::Trad => CarriedTag::Full(vtag),
                AggScheme::Agg { n } => {
                    if self.scheme.is_carrier(seq - self.era_start) {
                        let first = seq + 1 - u64::from(n);
                        let tags: Vec<VirtualTag> = (first..=seq)
                            .map(|s| self.history.get(s).expect("history covers the group"))
                            .collect();
                        agg_aggregate(&tags, n as usize)
                            .expect("group length matches by construction")
                    } else {
                        CarriedTag::None
                    }
                }
                AggScheme::R2d2 { .. } => {
                    r2d2_aggregate(&self.history, seq, self.scheme, &self.deps_seed)
                        .expect("scheme checked")
                }
            }
        };
        if matches!(carried, CarriedTag::None | CarriedTag::Aggregated(_)) {
            self.aggregated_frames += 1;
        }
        Ok(encode_record(
            &self.keys,
            seq,
            CONTENT_APPLICATION,
            payload,
            &carried,
            self.layout,
        )?)
    }

    fn send_control(&mut self, content_type: u8, body: &[u8]) -> Result<Vec<u8>, SimError> {
        let (seq, vtag) = self.make_tag(content_type, body);
        Ok(encode_record(
            &self.keys,
            seq,
            content_type,
            body,
            &CarriedTag::Full(vtag),
            self.layout,
        )?)
    }

    /// Handle one frame from the reverse channel (aggregation updates).
    /// Returns the acknowledgment frame to transmit, if any.
    pub fn on_reverse_frame(&mut self, frame: &[u8]) -> Result<Option<Vec<u8>>, SimError> {
        let expected = self.reverse_expected;
        let decoded = decode_record(
            &self.reverse_keys,
            frame,
            self.layout,
            |low| resolve_seq(expected, low),
            |_, _| TAG_LEN,
        )?;
        if decoded.seq < self.reverse_expected {
            return Ok(None); // stale
        }
        self.reverse_expected = decoded.seq + 1;
        let vtag = compute_virtual_tag(
            self.reverse_keys.mac_key(),
            self.reverse_keys.epoch(),
            decoded.seq,
            &record_plaintext(decoded.content_type, &decoded.payload),
        );
        if decoded.tag != vtag.0.to_vec() {
            return Ok(None); // invalid control record; silently discarded
        }
        if decoded.content_type != CONTENT_HANDSHAKE {
            return Ok(None);
        }
        let request = UpdateRequest::decode(&decoded.payload)?;
        match self.responder.on_update(request) {
            ResponderAction::Apply(request) => self.apply_update(request).map(Some),
            ResponderAction::RepeatAck(ack) => {
                Ok(Some(self.send_control(CONTENT_ACK, &ack.encode())?))
            }
            ResponderAction::Stale => Ok(None),
        }
    }

    fn apply_update(&mut self, request: UpdateRequest) -> Result<Vec<u8>, SimError> {
        if self.next_seq == 0 {
            return Err(SimError::Protocol(
                "aggregation update before any traffic".into(),
            ));
        }
        let last = self.next_seq - 1;
        let plan = transition_plan(self.scheme, request.scheme, self.era_start, Some(last));
        let mut transition_tag = None;
        match plan {
            TransitionPlan::Nothing => {}
            TransitionPlan::TagOnAck(range) => {
                transition_tag = Some(
                    aggregate_range(&self.history, range)
                        .expect("sender history covers its own tail"),
                );
            }
            TransitionPlan::DualOnFirstData(range) => {
                self.pending_dual_tail = Some(
                    aggregate_range(&self.history, range)
                        .expect("sender history covers its own tail"),
                );
            }
        }

        self.keys = self.keys.next_epoch()?;
        self.scheme = request.scheme;
        self.era_start = self.next_seq;

        let ack = UpdateAck {
            msg_seq: request.msg_seq,
            last_prev_epoch_seq: last,
            transition_tag,
        };
        self.responder.store_ack(request.msg_seq, ack.clone());
        self.send_control(CONTENT_ACK, &ack.encode())
    }

    /// Close the stream out: one full tag over whatever trailing records
    /// could still be waiting for coverage. Returns `None` when nothing
    /// needs flushing (Trad, or an exactly-aligned aggregation group).
    pub fn finalize(&mut self) -> Result<Option<Vec<u8>>, SimError> {
        if self.next_seq == 0 {
            return Ok(None);
        }
        let last = self.next_seq - 1;
        let range: Option<RangeInclusive<u64>> = match self.scheme {
            AggScheme::Trad => None,
            AggScheme::Agg { n } => {
                let tail = (last - self.era_start + 1) % u64::from(n);
                (tail > 0).then(|| (last + 1 - tail)..=last)
            }
            AggScheme::R2d2 { .. } => {
                let first = last
                    .saturating_sub(DEPENDENCY_WINDOW - 1)
                    .max(self.era_start);
                Some(first..=last)
            }
        };
        let Some(range) = range else { return Ok(None) };
        let fin = Finalize {
            first_covered: *range.start(),
            last_covered: *range.end(),
            tag: aggregate_range(&self.history, range)
                .expect("sender history covers the finalize range"),
        };
        Ok(Some(self.send_control(CONTENT_HANDSHAKE, &fin.encode())?))
    }
}

fn resolve_seq(expected: u64, low: u8) -> u64 {
    let delta = low.wrapping_sub((expected & 0xff) as u8);
    expected + u64::from(delta)
}

/// What the receiver observed and produced for one incoming frame.
#[derive(Debug, Default)]
pub struct ReceiverOutput {
    pub events: Vec<LedgerEvent>,
    /// Delivery outcomes inferred in order: one `false` per sequence gap,
    /// then `true` for the received record. Feed these to an adaptation
    /// controller.
    pub observed: Vec<bool>,
    /// The frame was undecodable or failed its full-tag check.
    pub rejected: bool,
}

struct PendingReceiverUpdate {
    msg_seq: u16,
    scheme: AggScheme,
    new_keys: EpochKeys,
    old_scheme: AggScheme,
    old_era_start: u64,
}

struct BufferedRecord {
    seq: u64,
    vtag: VirtualTag,
    payload: Vec<u8>,
    carried: CarriedTag,
    dual_tail: Option<VirtualTag>,
    kind: EntryKind,
}

/// Data-receiving endpoint: decodes frames, keeps the verification
/// ledger, and runs the initiator side of aggregation updates.
pub struct DataReceiver {
    keys: EpochKeys,
    pending: Option<PendingReceiverUpdate>,
    layout: Layout,
    scheme: AggScheme,
    era_start: u64,
    expected_seq: u64,
    ledger: VerifyState,
    expire_horizon: Option<u64>,
    buffered: Vec<BufferedRecord>,
    dual_range: Option<RangeInclusive<u64>>,
    initiator: UpdateInitiator,
    reverse_keys: EpochKeys,
    reverse_next_seq: u64,
    reverse_history: TagHistory,
}

impl DataReceiver {
    pub fn new(
        keys: EpochKeys,
        reverse_keys: EpochKeys,
        layout: Layout,
        scheme: AggScheme,
        deps_seed: Key,
        ledger_config: LedgerConfig,
        timeout_slots: u32,
    ) -> DataReceiver {
        DataReceiver {
            keys,
            pending: None,
            layout,
            scheme,
            era_start: 0,
            expected_seq: 0,
            ledger: VerifyState::new(ledger_config, deps_seed, scheme),
            expire_horizon: Some(DEPENDENCY_WINDOW + 8),
            buffered: Vec::new(),
            dual_range: None,
            initiator: UpdateInitiator::new(timeout_slots, 5),
            reverse_keys,
            reverse_next_seq: 0,
            reverse_history: TagHistory::new(HISTORY_CAPACITY),
        }
    }

    pub fn scheme(&self) -> AggScheme {
        self.scheme
    }

    pub fn ledger(&self) -> &VerifyState {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut VerifyState {
        &mut self.ledger
    }

    /// `None` disables expiry entirely (keep every record for post-run
    /// inspection).
    pub fn set_expire_horizon(&mut self, horizon: Option<u64>) {
        self.expire_horizon = horizon;
    }

    pub fn update_in_flight(&self) -> bool {
        self.pending.is_some()
    }

    /// Ask the data sender to switch schemes. Returns the update frame to
    /// transmit on the reverse channel.
    pub fn request_update(&mut self, scheme: AggScheme) -> Result<Vec<u8>, SimError> {
        let request = self.initiator.request_update(scheme)?;
        let new_keys = self.keys.next_epoch()?;
        self.pending = Some(PendingReceiverUpdate {
            msg_seq: request.msg_seq,
            scheme,
            new_keys,
            old_scheme: self.scheme,
            old_era_start: self.era_start,
        });
        self.encode_reverse(&request.encode())
    }

    /// Advance the retransmission clock one packet slot.
    pub fn tick(&mut self) -> Result<Option<Vec<u8>>, SimError> {
        match self.initiator.tick() {
            TickAction::None => Ok(None),
            TickAction::Retransmit(request) => Ok(Some(self.encode_reverse(&request.encode())?)),
            TickAction::Abort => Err(SessionError::UpdateAborted.into()),
        }
    }

    fn encode_reverse(&mut self, body: &[u8]) -> Result<Vec<u8>, SimError> {
        let seq = self.reverse_next_seq;
        self.reverse_next_seq += 1;
        let vtag = compute_virtual_tag(
            self.reverse_keys.mac_key(),
            self.reverse_keys.epoch(),
            seq,
            &record_plaintext(CONTENT_HANDSHAKE, body),
        );
        self.reverse_history.push(seq, vtag);
        Ok(encode_record(
            &self.reverse_keys,
            seq,
            CONTENT_HANDSHAKE,
            body,
            &CarriedTag::Full(vtag),
            self.layout,
        )?)
    }

    /// Process one frame from the data channel.
    pub fn on_frame(&mut self, frame: &[u8]) -> ReceiverOutput {
        let mut out = ReceiverOutput::default();
        let Ok(epoch_bits) = peek_epoch_bits(frame) else {
            out.rejected = true;
            return out;
        };

        let (keys, frame_scheme, in_pending_epoch) = if epoch_bits == (self.keys.epoch() & 3) as u8
        {
            (self.keys.clone(), self.scheme, false)
        } else if let Some(pending) = self
            .pending
            .as_ref()
            .filter(|p| (p.new_keys.epoch() & 3) as u8 == epoch_bits)
        {
            (pending.new_keys.clone(), pending.scheme, true)
        } else {
            out.rejected = true;
            return out;
        };

        let expected = self.expected_seq;
        let decoded = match decode_record(
            &keys,
            frame,
            self.layout,
            |low| resolve_seq(expected, low),
            |content_type, _| match (content_type, frame_scheme) {
                (CONTENT_APPLICATION, AggScheme::R2d2 { .. }) => {
                    frame_scheme.carried_tag_len(0)
                }
                _ => TAG_LEN,
            },
        ) {
            Ok(decoded) => decoded,
            Err(_) => {
                out.rejected = true;
                return out;
            }
        };

        // Sequence gaps are observed losses; the record itself a delivery.
        for _ in self.expected_seq..decoded.seq {
            out.observed.push(false);
        }
        out.observed.push(true);
        self.expected_seq = decoded.seq + 1;

        let vtag = compute_virtual_tag(
            keys.mac_key(),
            keys.epoch(),
            decoded.seq,
            &record_plaintext(decoded.content_type, &decoded.payload),
        );

        if decoded.content_type == CONTENT_APPLICATION {
            self.handle_data(decoded, vtag, frame_scheme, in_pending_epoch, &mut out);
        } else {
            self.handle_control(decoded, vtag, in_pending_epoch, &mut out);
        }

        if let Some(horizon) = self.expire_horizon {
            let events = self.ledger.expire(horizon);
            out.events.extend(events);
        }
        out
    }

    fn handle_data(
        &mut self,
        decoded: DecodedRecord,
        vtag: VirtualTag,
        frame_scheme: AggScheme,
        in_pending_epoch: bool,
        out: &mut ReceiverOutput,
    ) {
        let (carried, dual_tail) = match Self::parse_carried(&decoded, frame_scheme) {
            Ok(pair) => pair,
            Err(()) => {
                out.rejected = true;
                return;
            }
        };
        if in_pending_epoch {
            // Group alignment for the new era is unknown until the
            // acknowledgment names the last old-epoch record; park the
            // record and replay it once the update completes.
            self.buffered.push(BufferedRecord {
                seq: decoded.seq,
                vtag,
                payload: decoded.payload,
                carried,
                dual_tail,
                kind: EntryKind::Data,
            });
            return;
        }
        out.events.extend(self.ledger.ingest(
            decoded.seq,
            EntryKind::Data,
            &decoded.payload,
            vtag,
            &carried,
        ));
        self.apply_dual_tail(decoded.seq, dual_tail, out);
    }

    fn parse_carried(
        decoded: &DecodedRecord,
        frame_scheme: AggScheme,
    ) -> Result<(CarriedTag, Option<VirtualTag>), ()> {
        if decoded.dual {
            if decoded.tag.len() != 2 * TAG_LEN {
                return Err(());
            }
            let mut own = [0u8; TAG_LEN];
            let mut tail = [0u8; TAG_LEN];
            own.copy_from_slice(&decoded.tag[..TAG_LEN]);
            tail.copy_from_slice(&decoded.tag[TAG_LEN..]);
            return Ok((
                CarriedTag::Dual {
                    own: VirtualTag(own),
                    tail: VirtualTag(tail),
                },
                Some(VirtualTag(tail)),
            ));
        }
        let carried = match frame_scheme {
            AggScheme::Trad => {
                if decoded.tag.len() != TAG_LEN {
                    return Err(());
                }
                let mut tag = [0u8; TAG_LEN];
                tag.copy_from_slice(&decoded.tag);
                CarriedTag::Full(VirtualTag(tag))
            }
            AggScheme::Agg { .. } => {
                if decoded.tag.is_empty() {
                    CarriedTag::None
                } else if decoded.tag.len() == TAG_LEN {
                    CarriedTag::Aggregated(decoded.tag.clone())
                } else {
                    return Err(());
                }
            }
            AggScheme::R2d2 { .. } => {
                if decoded.tag.len() != frame_scheme.carried_tag_len(0) {
                    return Err(());
                }
                CarriedTag::Aggregated(decoded.tag.clone())
            }
        };
        Ok((carried, None))
    }

    fn apply_dual_tail(&mut self, seq: u64, tail: Option<VirtualTag>, out: &mut ReceiverOutput) {
        // The tail aggregate rides only the first data record of a Trad
        // era; whether or not that record arrived intact, the opportunity
        // is gone afterwards.
        if let Some(range) = self.dual_range.take() {
            if let Some(tail) = tail {
                out.events
                    .extend(self.ledger.apply_transition_tag(range, &tail, seq));
            }
        }
    }

    fn handle_control(
        &mut self,
        decoded: DecodedRecord,
        vtag: VirtualTag,
        in_pending_epoch: bool,
        out: &mut ReceiverOutput,
    ) {
        if decoded.tag != vtag.0.to_vec() {
            out.rejected = true;
            return;
        }
        match decoded.content_type {
            CONTENT_ACK => {
                if in_pending_epoch {
                    self.complete_update(&decoded, vtag, out);
                } else {
                    // An acknowledgment we no longer wait for; keep the
                    // record for its tag only.
                    out.events.extend(self.ledger.ingest(
                        decoded.seq,
                        EntryKind::Control,
                        &[],
                        vtag,
                        &CarriedTag::None,
                    ));
                }
            }
            CONTENT_HANDSHAKE => {
                out.events.extend(self.ledger.ingest(
                    decoded.seq,
                    EntryKind::Control,
                    &[],
                    vtag,
                    &CarriedTag::None,
                ));
                if let Ok(fin) = Finalize::decode(&decoded.payload) {
                    out.events.extend(self.ledger.apply_transition_tag(
                        fin.first_covered..=fin.last_covered,
                        &fin.tag,
                        decoded.seq,
                    ));
                }
            }
            _ => {
                out.events.extend(self.ledger.ingest(
                    decoded.seq,
                    EntryKind::Control,
                    &[],
                    vtag,
                    &CarriedTag::None,
                ));
            }
        }
    }

    fn complete_update(&mut self, decoded: &DecodedRecord, vtag: VirtualTag, out: &mut ReceiverOutput) {
        let Ok(ack) = UpdateAck::decode(&decoded.payload) else {
            out.rejected = true;
            return;
        };
        let Some(pending) = self.pending.as_ref() else {
            return;
        };
        if pending.msg_seq != ack.msg_seq {
            return;
        }
        let Some(_completed) = self.initiator.on_ack(ack.msg_seq, ack.last_prev_epoch_seq)
        else {
            return;
        };
        let pending = self.pending.take().expect("checked above");
        let last = ack.last_prev_epoch_seq;
        let era_start = last + 1;

        // Seal the old epoch: from here on only the new keys are accepted.
        self.keys = pending.new_keys;
        self.scheme = pending.scheme;
        self.era_start = era_start;
        self.ledger.set_scheme(era_start, pending.scheme);

        // The acknowledgment itself is the first record of the new era.
        out.events.extend(self.ledger.ingest(
            decoded.seq,
            EntryKind::Control,
            &[],
            vtag,
            &CarriedTag::None,
        ));

        // Close the old era out per its scheme.
        match transition_plan(pending.old_scheme, pending.scheme, pending.old_era_start, Some(last))
        {
            TransitionPlan::Nothing => {}
            TransitionPlan::TagOnAck(range) => {
                if let Some(tag) = &ack.transition_tag {
                    out.events
                        .extend(self.ledger.apply_transition_tag(range, tag, decoded.seq));
                }
            }
            TransitionPlan::DualOnFirstData(range) => {
                self.dual_range = Some(range);
            }
        }

        // Replay data records that arrived under the new epoch before the
        // acknowledgment did.
        let buffered = std::mem::take(&mut self.buffered);
        for record in buffered {
            out.events.extend(self.ledger.ingest(
                record.seq,
                record.kind,
                &record.payload,
                record.vtag,
                &record.carried,
            ));
            self.apply_dual_tail(record.seq, record.dual_tail, out);
        }
    }
}
