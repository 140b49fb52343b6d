//! Receiver-side verification ledger.
//!
//! Every received record lands here with its recomputed virtual tag. The
//! ledger accumulates *security bits* per record as carried tags check
//! out: a full tag grants 128 bits at once, an Agg group check grants 128
//! to every member, and each matching R2D2 carried bit grants one bit to
//! each of its eight contributors. Delivery to the upper layer is driven
//! by the configured mode: buffered (hold until 128 bits) or optimistic
//! (hand over at a threshold, refute retroactively if a later check
//! fails).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::RangeInclusive;

use crate::auth::{
    r2d2_dependency_sets, xor_tags, AggScheme, CarriedTag, VirtualTag, TAG_LEN,
};
use crate::crypto::Key;

/// Security target in bits: a record is fully verified at or above this.
pub const FULL_SECURITY_BITS: u32 = (TAG_LEN * 8) as u32;

/// How records are handed to the upper layer.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DeliveryMode {
    /// Hold payloads until they reach full security.
    Buffered,
    /// Hand payloads over once they reach `threshold_bits`; a threshold of
    /// zero releases everything on arrival.
    Optimistic { threshold_bits: u32 },
}

/// What to do when a tag check fails.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum FailurePolicy {
    /// Drop the affected records without telling the peer (recommended).
    #[default]
    SilentDiscard,
    /// Additionally surface a fatal alert to tear the session down.
    FatalAlert,
}

#[derive(Clone, Copy, Debug)]
pub struct LedgerConfig {
    pub mode: DeliveryMode,
    pub policy: FailurePolicy,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            mode: DeliveryMode::Buffered,
            policy: FailurePolicy::SilentDiscard,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EntryStatus {
    Pending,
    Delivered,
    Discarded,
    Refuted,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EntryKind {
    Data,
    /// Handshake, acknowledgment, and update records: verified on arrival
    /// by their full tag, tracked only so their virtual tags can serve as
    /// aggregation contributors.
    Control,
}

/// Reported security of one record, capped at the 128-bit target.
/// Refuted records report zero regardless of earlier accumulation.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SecurityLevel {
    pub bits: u32,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerEvent {
    /// Payload handed to the upper layer.
    Delivered { seq: u64, bits: u32 },
    /// Record first reached full security; `via_seq` is the record whose
    /// arrival completed the verification.
    Authenticated { seq: u64, via_seq: u64 },
    /// A tag check failed; all involved records are refuted.
    Refuted {
        first_seq: u64,
        seqs: Vec<u64>,
        bytes_since_first: u64,
    },
    /// Duplicate sequence number ignored.
    Duplicate { seq: u64 },
    /// Pending record given up on (verification material lost).
    Discarded { seq: u64 },
    /// Failure policy demands tearing the session down.
    FatalAlert { first_seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("sequence number {0} is not known to the ledger")]
    UnknownSeq(u64),
}

struct Entry {
    payload: Vec<u8>,
    vtag: VirtualTag,
    bits: u32,
    status: EntryStatus,
    delivered: bool,
    authenticated_at: Option<u64>,
    arrival_index: u64,
    kind: EntryKind,
    group_tag: Option<Vec<u8>>,
}

/// Callback invoked when already-delivered data is refuted retroactively:
/// `(first_suspect_seq, bytes_delivered_since_first_malicious)`. Must not
/// re-enter the ledger.
pub type RefutationSink = Box<dyn FnMut(u64, u64)>;

pub struct VerifyState {
    cfg: LedgerConfig,
    deps_seed: Key,
    entries: BTreeMap<u64, Entry>,
    /// Scheme eras: `(first_seq, scheme)`, ascending. Group alignment and
    /// carried-tag widths follow the era a record was sent in.
    eras: Vec<(u64, AggScheme)>,
    arrival_counter: u64,
    evicted_below: u64,
    delivery_log: BTreeMap<u64, usize>,
    sink: Option<RefutationSink>,
}

impl fmt::Debug for VerifyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VerifyState")
            .field("entries", &self.entries.len())
            .field("eras", &self.eras)
            .field("arrival_counter", &self.arrival_counter)
            .finish()
    }
}

impl VerifyState {
    pub fn new(cfg: LedgerConfig, deps_seed: Key, initial_scheme: AggScheme) -> VerifyState {
        VerifyState {
            cfg,
            deps_seed,
            entries: BTreeMap::new(),
            eras: vec![(0, initial_scheme)],
            arrival_counter: 0,
            evicted_below: 0,
            delivery_log: BTreeMap::new(),
            sink: None,
        }
    }

    pub fn set_refutation_sink(&mut self, sink: RefutationSink) {
        self.sink = Some(sink);
    }

    /// Install a new scheme era beginning at `first_seq`.
    pub fn set_scheme(&mut self, first_seq: u64, scheme: AggScheme) {
        if let Some(&(last_start, last_scheme)) = self.eras.last() {
            if last_scheme == scheme && last_start <= first_seq {
                return;
            }
            assert!(first_seq > last_start, "eras must begin at increasing sequences");
        }
        self.eras.push((first_seq, scheme));
    }

    pub fn era_of(&self, seq: u64) -> (u64, AggScheme) {
        let idx = self
            .eras
            .partition_point(|&(start, _)| start <= seq)
            .saturating_sub(1);
        self.eras[idx]
    }

    /// Feed one received record into the ledger.
    pub fn ingest(
        &mut self,
        seq: u64,
        kind: EntryKind,
        payload: &[u8],
        vtag: VirtualTag,
        carried: &CarriedTag,
    ) -> Vec<LedgerEvent> {
        let mut events = Vec::new();
        if self.entries.contains_key(&seq) || seq < self.evicted_below {
            events.push(LedgerEvent::Duplicate { seq });
            return events;
        }
        self.arrival_counter += 1;
        let mut entry = Entry {
            payload: match kind {
                EntryKind::Data => payload.to_vec(),
                EntryKind::Control => Vec::new(),
            },
            vtag,
            bits: 0,
            status: EntryStatus::Pending,
            delivered: false,
            authenticated_at: None,
            arrival_index: self.arrival_counter,
            kind,
            group_tag: None,
        };
        if kind == EntryKind::Control {
            // Control records arrive with a full tag already checked by the
            // record layer; they are kept for their virtual tags only.
            entry.bits = FULL_SECURITY_BITS;
            entry.status = EntryStatus::Delivered;
            entry.delivered = true;
        }
        self.entries.insert(seq, entry);

        let mut touched = vec![seq];
        match carried {
            CarriedTag::None => {}
            CarriedTag::Full(tag) | CarriedTag::Dual { own: tag, .. } => {
                if kind == EntryKind::Data {
                    if *tag == vtag {
                        self.grant_full(seq, seq);
                    } else {
                        self.refute(&[seq], &mut events);
                    }
                }
            }
            CarriedTag::Aggregated(bytes) => {
                let (era_start, scheme) = self.era_of(seq);
                match scheme {
                    AggScheme::Agg { n } => {
                        self.entries.get_mut(&seq).expect("just inserted").group_tag =
                            Some(bytes.clone());
                        self.check_group(seq, era_start, n, &mut touched, &mut events);
                    }
                    AggScheme::R2d2 { .. } => {
                        self.check_bits(seq, scheme, carried, &mut touched, &mut events);
                    }
                    AggScheme::Trad => {
                        // An aggregated tag where a full tag belongs cannot
                        // be checked; the record simply never verifies.
                    }
                }
            }
        }

        for s in touched {
            self.sweep(s, seq, &mut events);
        }
        events
    }

    /// Apply a transition or finalization tag: a full 16-byte XOR
    /// aggregate over `range`. Verifiable only when every record in the
    /// range is present; on success all of them reach full security.
    pub fn apply_transition_tag(
        &mut self,
        range: RangeInclusive<u64>,
        tag: &VirtualTag,
        via_seq: u64,
    ) -> Vec<LedgerEvent> {
        let mut events = Vec::new();
        let mut tags = Vec::new();
        for seq in range.clone() {
            match self.entries.get(&seq) {
                Some(entry) => tags.push(entry.vtag),
                None => return events,
            }
        }
        if tags.is_empty() {
            return events;
        }
        let seqs: Vec<u64> = range.clone().collect();
        if xor_tags(&tags) == *tag {
            for &seq in &seqs {
                self.grant_full(seq, via_seq);
                self.sweep(seq, via_seq, &mut events);
            }
        } else {
            self.refute(&seqs, &mut events);
        }
        events
    }

    /// Current security level of a record, capped at 128 bits.
    pub fn security_of(&self, seq: u64) -> Result<SecurityLevel, LedgerError> {
        let entry = self.entries.get(&seq).ok_or(LedgerError::UnknownSeq(seq))?;
        let bits = match entry.status {
            EntryStatus::Refuted => 0,
            _ => entry.bits.min(FULL_SECURITY_BITS),
        };
        Ok(SecurityLevel {
            bits,
            status: entry.status,
        })
    }

    /// Uncapped accumulated bits, for accounting checks.
    pub fn raw_bits(&self, seq: u64) -> Result<u32, LedgerError> {
        self.entries
            .get(&seq)
            .map(|e| e.bits)
            .ok_or(LedgerError::UnknownSeq(seq))
    }

    pub fn status_of(&self, seq: u64) -> Result<EntryStatus, LedgerError> {
        self.entries
            .get(&seq)
            .map(|e| e.status)
            .ok_or(LedgerError::UnknownSeq(seq))
    }

    /// Buffered payload access (delivered entries retain their payload
    /// until expiry).
    pub fn payload_of(&self, seq: u64) -> Option<&[u8]> {
        self.entries.get(&seq).map(|e| e.payload.as_slice())
    }

    /// Drop records older than `horizon` arrivals. Pending data records
    /// are reported discarded: whatever tag material they were waiting
    /// for is considered definitively lost. Delivered-but-unconfirmed
    /// records (optimistic mode) leave silently.
    pub fn expire(&mut self, horizon: u64) -> Vec<LedgerEvent> {
        let mut events = Vec::new();
        let cutoff = self.arrival_counter.saturating_sub(horizon);
        let stale: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| e.arrival_index < cutoff)
            .map(|(&s, _)| s)
            .collect();
        for seq in stale {
            let entry = self.entries.remove(&seq).expect("listed above");
            if entry.kind == EntryKind::Data
                && entry.status == EntryStatus::Pending
                && !entry.delivered
            {
                events.push(LedgerEvent::Discarded { seq });
            }
            self.evicted_below = self.evicted_below.max(seq + 1);
        }
        let floor = self.evicted_below;
        self.delivery_log.retain(|&s, _| s >= floor);
        events
    }

    fn grant_full(&mut self, seq: u64, via_seq: u64) {
        let entry = self.entries.get_mut(&seq).expect("granting unknown seq");
        entry.bits = entry.bits.max(FULL_SECURITY_BITS);
        if entry.authenticated_at.is_none() {
            entry.authenticated_at = Some(via_seq);
        }
    }

    /// Agg group check, triggered by the carrier's arrival.
    fn check_group(
        &mut self,
        carrier_seq: u64,
        era_start: u64,
        n: u8,
        touched: &mut Vec<u64>,
        events: &mut Vec<LedgerEvent>,
    ) {
        let n = u64::from(n);
        let index = carrier_seq - era_start;
        if (index + 1) % n != 0 {
            return;
        }
        let first = carrier_seq + 1 - n;
        let seqs: Vec<u64> = (first..=carrier_seq).collect();
        let mut tags = Vec::with_capacity(seqs.len());
        for &s in &seqs {
            match self.entries.get(&s) {
                Some(e) => tags.push(e.vtag),
                None => return, // a member is missing; never verifiable
            }
        }
        let carried = self
            .entries
            .get(&carrier_seq)
            .and_then(|e| e.group_tag.clone())
            .expect("carrier stored its tag before the check");
        if xor_tags(&tags).0.as_slice() == carried.as_slice() {
            for &s in &seqs {
                self.grant_full(s, carrier_seq);
                touched.push(s);
            }
        } else {
            self.refute(&seqs, events);
        }
    }

    /// R2D2 per-bit checks, triggered by each tagged record's arrival.
    fn check_bits(
        &mut self,
        carrier_seq: u64,
        scheme: AggScheme,
        carried: &CarriedTag,
        touched: &mut Vec<u64>,
        events: &mut Vec<LedgerEvent>,
    ) {
        let bits = scheme.carried_bits().expect("R2D2 era");
        let sets = r2d2_dependency_sets(&self.deps_seed, carrier_seq, bits);
        let mut to_refute: Vec<u64> = Vec::new();
        for (j, set) in sets.iter().enumerate() {
            let Some(sent_bit) = carried.bit(j) else { return };
            let mut acc = 0u8;
            let mut contributors = Vec::with_capacity(set.offsets().len());
            let mut verifiable = true;
            for (k, &offset) in set.offsets().iter().enumerate() {
                match carrier_seq.checked_sub(u64::from(offset)) {
                    // Pre-session records contribute all-zero tags.
                    None => {}
                    Some(s) => match self.entries.get(&s) {
                        Some(entry) => {
                            acc ^= entry.vtag.bit((k * bits + j) % (TAG_LEN * 8));
                            contributors.push(s);
                        }
                        None => {
                            verifiable = false;
                            break;
                        }
                    },
                }
            }
            if !verifiable {
                continue;
            }
            if acc == sent_bit {
                for s in contributors {
                    let entry = self.entries.get_mut(&s).expect("checked present");
                    entry.bits += 1;
                    touched.push(s);
                }
            } else {
                to_refute.extend(contributors);
            }
        }
        if !to_refute.is_empty() {
            to_refute.sort_unstable();
            to_refute.dedup();
            self.refute(&to_refute, events);
        }
    }

    fn refute(&mut self, seqs: &[u64], events: &mut Vec<LedgerEvent>) {
        let mut newly = Vec::new();
        for &seq in seqs {
            let entry = self.entries.get_mut(&seq).expect("refuting unknown seq");
            if entry.status != EntryStatus::Refuted {
                entry.status = EntryStatus::Refuted;
                newly.push(seq);
            }
        }
        let Some(&first) = newly.first() else { return };
        let bytes_since_first: u64 = self
            .delivery_log
            .range(first..)
            .map(|(_, &len)| len as u64)
            .sum();
        if bytes_since_first > 0 {
            if let Some(sink) = self.sink.as_mut() {
                sink(first, bytes_since_first);
            }
        }
        events.push(LedgerEvent::Refuted {
            first_seq: first,
            seqs: newly,
            bytes_since_first,
        });
        if matches!(self.cfg.policy, FailurePolicy::FatalAlert) {
            events.push(LedgerEvent::FatalAlert { first_seq: first });
        }
    }

    /// Emit delivery/authentication events for a record whose bits may
    /// have changed.
    fn sweep(&mut self, seq: u64, via_seq: u64, events: &mut Vec<LedgerEvent>) {
        let mode = self.cfg.mode;
        let Some(entry) = self.entries.get_mut(&seq) else { return };
        if entry.kind != EntryKind::Data
            || matches!(entry.status, EntryStatus::Refuted | EntryStatus::Discarded)
        {
            return;
        }
        if entry.bits >= FULL_SECURITY_BITS && entry.authenticated_at.is_none() {
            entry.authenticated_at = Some(via_seq);
        }
        // Authenticated fires exactly once, at the crossing.
        if entry.bits >= FULL_SECURITY_BITS && entry.authenticated_at == Some(via_seq) {
            let already = events.iter().any(
                |e| matches!(e, LedgerEvent::Authenticated { seq: s, .. } if *s == seq),
            );
            if !already {
                events.push(LedgerEvent::Authenticated { seq, via_seq });
            }
        }
        let threshold = match mode {
            DeliveryMode::Buffered => FULL_SECURITY_BITS,
            DeliveryMode::Optimistic { threshold_bits } => threshold_bits,
        };
        if !entry.delivered && entry.bits >= threshold {
            entry.delivered = true;
            entry.status = EntryStatus::Delivered;
            let len = entry.payload.len();
            let bits = entry.bits.min(FULL_SECURITY_BITS);
            self.delivery_log.insert(seq, len);
            events.push(LedgerEvent::Delivered { seq, bits });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{
        agg_aggregate, compute_virtual_tag, r2d2_aggregate, r2d2_dependency_sets, TagHistory,
        DEPENDENCY_WINDOW,
    };
    use std::cell::RefCell;
    use std::rc::Rc;

    const KEY: Key = [5u8; 16];
    const SEED: Key = [6u8; 16];

    fn vtag(seq: u64) -> VirtualTag {
        compute_virtual_tag(&KEY, 1, seq, &[23, seq as u8])
    }

    fn buffered(scheme: AggScheme) -> VerifyState {
        VerifyState::new(LedgerConfig::default(), SEED, scheme)
    }

    fn optimistic(scheme: AggScheme, threshold: u32) -> VerifyState {
        VerifyState::new(
            LedgerConfig {
                mode: DeliveryMode::Optimistic {
                    threshold_bits: threshold,
                },
                policy: FailurePolicy::SilentDiscard,
            },
            SEED,
            scheme,
        )
    }

    /// Drive a lossless or lossy Agg(n) stream through a ledger.
    fn run_agg(
        state: &mut VerifyState,
        n: u8,
        count: u64,
        drop: impl Fn(u64) -> bool,
    ) -> Vec<LedgerEvent> {
        let scheme = AggScheme::Agg { n };
        let mut events = Vec::new();
        let mut group: Vec<VirtualTag> = Vec::new();
        for seq in 0..count {
            let tag = vtag(seq);
            group.push(tag);
            let carried = if scheme.is_carrier(seq) {
                let agg = agg_aggregate(&group, n as usize).unwrap();
                group.clear();
                agg
            } else {
                CarriedTag::None
            };
            if !drop(seq) {
                events.extend(state.ingest(seq, EntryKind::Data, &[seq as u8; 4], tag, &carried));
            }
        }
        events
    }

    /// Drive an R2D2 stream; returns emitted events.
    fn run_r2d2(
        state: &mut VerifyState,
        o: u16,
        count: u64,
        drop: impl Fn(u64) -> bool,
    ) -> Vec<LedgerEvent> {
        let scheme = AggScheme::R2d2 { o };
        let mut history = TagHistory::new(64);
        let mut events = Vec::new();
        for seq in 0..count {
            let tag = vtag(seq);
            history.push(seq, tag);
            let carried = r2d2_aggregate(&history, seq, scheme, &SEED).unwrap();
            if !drop(seq) {
                events.extend(state.ingest(seq, EntryKind::Data, &[seq as u8; 4], tag, &carried));
            }
        }
        events
    }

    /// Independent bit-accounting oracle: how many security bits should
    /// `target` have after the stream, given which records were delivered.
    fn r2d2_oracle_bits(target: u64, count: u64, o: u16, dropped: &dyn Fn(u64) -> bool) -> u32 {
        let bits = AggScheme::R2d2 { o }.carried_bits().unwrap();
        let mut granted = 0u32;
        for carrier in target + 1..count {
            if carrier - target > DEPENDENCY_WINDOW || dropped(carrier) {
                continue;
            }
            for set in r2d2_dependency_sets(&SEED, carrier, bits) {
                let covers = set.contains((carrier - target) as u8);
                let all_present = set.offsets().iter().all(|&off| {
                    match carrier.checked_sub(u64::from(off)) {
                        None => true,
                        Some(s) => !dropped(s),
                    }
                });
                if covers && all_present {
                    granted += 1;
                }
            }
        }
        granted
    }

    #[test]
    fn agg2_complete_group_delivers_both_at_full_security() {
        let mut state = buffered(AggScheme::Agg { n: 2 });
        let events = run_agg(&mut state, 2, 2, |_| false);
        for seq in 0..2 {
            let level = state.security_of(seq).unwrap();
            assert_eq!(level.bits, 128);
            assert_eq!(level.status, EntryStatus::Delivered);
        }
        assert_eq!(
            events
                .iter()
                .filter(|e| matches!(e, LedgerEvent::Delivered { .. }))
                .count(),
            2
        );
    }

    #[test]
    fn agg8_lost_member_leaves_survivors_at_zero() {
        let mut state = buffered(AggScheme::Agg { n: 8 });
        run_agg(&mut state, 8, 8, |seq| seq == 3);
        for seq in 0..8u64 {
            if seq == 3 {
                assert!(state.security_of(seq).is_err());
            } else {
                let level = state.security_of(seq).unwrap();
                assert_eq!(level.bits, 0, "seq {seq}");
                assert_eq!(level.status, EntryStatus::Pending);
            }
        }
    }

    #[test]
    fn r2d2_lossless_stream_reaches_full_security() {
        let count = 100u64;
        let mut state = buffered(AggScheme::R2d2 { o: 100 });
        run_r2d2(&mut state, 100, count, |_| false);
        for seq in 0..count {
            let raw = state.raw_bits(seq).unwrap();
            let oracle = r2d2_oracle_bits(seq, count, 100, &|_| false);
            assert_eq!(raw, oracle, "seq {seq}");
            if count - seq > DEPENDENCY_WINDOW {
                assert!(raw >= 128, "seq {seq} only reached {raw} bits");
                assert_eq!(state.security_of(seq).unwrap().bits, 128);
            }
        }
    }

    #[test]
    fn r2d2_lossy_accounting_matches_oracle() {
        let count = 120u64;
        let drop = |seq: u64| seq % 17 == 5;
        let mut state = buffered(AggScheme::R2d2 { o: 50 });
        run_r2d2(&mut state, 50, count, drop);
        for seq in 0..count {
            if drop(seq) {
                assert!(state.security_of(seq).is_err());
                continue;
            }
            assert_eq!(
                state.raw_bits(seq).unwrap(),
                r2d2_oracle_bits(seq, count, 50, &drop),
                "seq {seq}"
            );
        }
    }

    #[test]
    fn security_is_zero_before_any_covering_tag() {
        let mut state = buffered(AggScheme::R2d2 { o: 100 });
        run_r2d2(&mut state, 100, 1, |_| false);
        assert_eq!(state.security_of(0).unwrap().bits, 0);
    }

    #[test]
    fn failed_group_check_refutes_members() {
        let mut state = buffered(AggScheme::Agg { n: 2 });
        let t0 = vtag(0);
        let t1 = vtag(1);
        state.ingest(0, EntryKind::Data, &[0; 4], t0, &CarriedTag::None);
        // Corrupt the carried tag.
        let mut agg = xor_tags(&[t0, t1]);
        agg.0[5] ^= 0x10;
        let events = state.ingest(
            1,
            EntryKind::Data,
            &[1; 4],
            t1,
            &CarriedTag::Aggregated(agg.0.to_vec()),
        );
        assert!(events
            .iter()
            .any(|e| matches!(e, LedgerEvent::Refuted { first_seq: 0, .. })));
        for seq in 0..2 {
            let level = state.security_of(seq).unwrap();
            assert_eq!(level.bits, 0);
            assert_eq!(level.status, EntryStatus::Refuted);
        }
    }

    #[test]
    fn one_verified_covering_tag_grants_oracle_bits() {
        // After exactly one covering tag verifies, each contributor holds
        // exactly the bits that tag granted it, and a fully verified o=0
        // tag distributes 16 bits x 8 contributors in total.
        let count = 40u64;
        let mut state = buffered(AggScheme::R2d2 { o: 0 });
        let mut history = TagHistory::new(64);
        for seq in 0..count {
            let tag = vtag(seq);
            history.push(seq, tag);
            let carried = if seq == count - 1 {
                r2d2_aggregate(&history, seq, AggScheme::R2d2 { o: 0 }, &SEED).unwrap()
            } else {
                CarriedTag::None
            };
            state.ingest(seq, EntryKind::Data, &[1; 4], tag, &carried);
        }
        let carrier = count - 1;
        let sets = r2d2_dependency_sets(&SEED, carrier, 16);
        let mut total = 0u32;
        for seq in 0..carrier {
            let expect: u32 = sets
                .iter()
                .filter(|set| set.contains((carrier - seq) as u8))
                .count() as u32;
            assert_eq!(state.raw_bits(seq).unwrap(), expect, "seq {seq}");
            total += expect;
        }
        assert_eq!(total, 16 * 8);
    }

    #[test]
    fn security_of_unknown_seq_is_an_error() {
        let state = buffered(AggScheme::Trad);
        assert_eq!(state.security_of(7), Err(LedgerError::UnknownSeq(7)));
    }

    #[test]
    fn duplicates_are_ignored() {
        let mut state = buffered(AggScheme::Trad);
        let t = vtag(0);
        state.ingest(0, EntryKind::Data, &[1; 4], t, &CarriedTag::Full(t));
        let events = state.ingest(0, EntryKind::Data, &[9; 4], t, &CarriedTag::Full(t));
        assert_eq!(events, vec![LedgerEvent::Duplicate { seq: 0 }]);
        assert_eq!(state.payload_of(0).unwrap(), &[1; 4]);
    }

    #[test]
    fn expire_on_empty_ledger_is_quiet() {
        let mut state = buffered(AggScheme::Agg { n: 8 });
        assert!(state.expire(10).is_empty());
    }

    #[test]
    fn expire_discards_stuck_group_members() {
        // First group loses one member; later groups complete normally.
        // Once the horizon passes, only the seven stuck survivors are
        // reported discarded.
        let mut state = buffered(AggScheme::Agg { n: 8 });
        run_agg(&mut state, 8, 48, |seq| seq == 0);
        let events = state.expire(8);
        let discards = events
            .iter()
            .filter(|e| matches!(e, LedgerEvent::Discarded { .. }))
            .count();
        assert_eq!(discards, 7);
    }

    #[test]
    fn lossless_r2d2_with_window_horizon_never_discards() {
        let mut state = buffered(AggScheme::R2d2 { o: 100 });
        let scheme = AggScheme::R2d2 { o: 100 };
        let mut history = TagHistory::new(64);
        let mut discards = 0;
        for seq in 0..200u64 {
            let tag = vtag(seq);
            history.push(seq, tag);
            let carried = r2d2_aggregate(&history, seq, scheme, &SEED).unwrap();
            state.ingest(seq, EntryKind::Data, &[0; 4], tag, &carried);
            discards += state
                .expire(DEPENDENCY_WINDOW)
                .iter()
                .filter(|e| matches!(e, LedgerEvent::Discarded { .. }))
                .count();
        }
        assert_eq!(discards, 0);
    }

    #[test]
    fn monotone_bits_across_a_lossy_stream() {
        let drop = |seq: u64| seq % 7 == 3;
        let mut state = buffered(AggScheme::R2d2 { o: 150 });
        let scheme = AggScheme::R2d2 { o: 150 };
        let mut history = TagHistory::new(64);
        let mut last_bits: BTreeMap<u64, u32> = BTreeMap::new();
        for seq in 0..150u64 {
            let tag = vtag(seq);
            history.push(seq, tag);
            let carried = r2d2_aggregate(&history, seq, scheme, &SEED).unwrap();
            if !drop(seq) {
                state.ingest(seq, EntryKind::Data, &[0; 4], tag, &carried);
            }
            for (&s, prev) in last_bits.iter_mut() {
                if let Ok(bits) = state.raw_bits(s) {
                    assert!(bits >= *prev, "seq {s} regressed {prev} -> {bits}");
                    *prev = bits;
                }
            }
            if !drop(seq) {
                last_bits.insert(seq, state.raw_bits(seq).unwrap());
            }
        }
    }

    #[test]
    fn optimistic_threshold_zero_delivers_on_arrival() {
        let mut state = optimistic(AggScheme::R2d2 { o: 100 }, 0);
        let events = run_r2d2(&mut state, 100, 3, |_| false);
        let delivered: Vec<u64> = events
            .iter()
            .filter_map(|e| match e {
                LedgerEvent::Delivered { seq, .. } => Some(*seq),
                _ => None,
            })
            .collect();
        assert_eq!(delivered, vec![0, 1, 2]);
    }

    #[test]
    fn refutation_reports_bytes_since_first_malicious() {
        // Optimistic delivery, then a failed group check; the sink must see
        // the sum of delivered payload bytes from the first refuted seq on.
        let seen: Rc<RefCell<Vec<(u64, u64)>>> = Rc::new(RefCell::new(Vec::new()));
        let seen_in_sink = Rc::clone(&seen);
        let mut state = optimistic(AggScheme::Agg { n: 4 }, 0);
        state.set_refutation_sink(Box::new(move |first, bytes| {
            seen_in_sink.borrow_mut().push((first, bytes));
        }));

        let payloads: Vec<Vec<u8>> = (0..4u64).map(|s| vec![s as u8; 3 + s as usize]).collect();
        let tags: Vec<VirtualTag> = (0..4).map(vtag).collect();
        let mut replay_log: Vec<(u64, usize)> = Vec::new();
        for seq in 0..4u64 {
            let carried = if seq == 3 {
                // Tamper: sender aggregates a wrong tag.
                let mut wrong = tags.clone();
                wrong[1].0[0] ^= 1;
                agg_aggregate(&wrong, 4).unwrap()
            } else {
                CarriedTag::None
            };
            let events = state.ingest(
                seq,
                EntryKind::Data,
                &payloads[seq as usize],
                tags[seq as usize],
                &carried,
            );
            for event in &events {
                if let LedgerEvent::Delivered { seq, .. } = event {
                    replay_log.push((*seq, payloads[*seq as usize].len()));
                }
            }
        }
        let calls = seen.borrow();
        assert_eq!(calls.len(), 1);
        let (first, bytes) = calls[0];
        assert_eq!(first, 0);
        let expect: u64 = replay_log
            .iter()
            .filter(|(s, _)| *s >= first)
            .map(|(_, len)| *len as u64)
            .sum();
        assert_eq!(bytes, expect);
    }

    #[test]
    fn fatal_alert_policy_emits_alert() {
        let mut state = VerifyState::new(
            LedgerConfig {
                mode: DeliveryMode::Buffered,
                policy: FailurePolicy::FatalAlert,
            },
            SEED,
            AggScheme::Trad,
        );
        let t = vtag(0);
        let mut wrong = t;
        wrong.0[0] ^= 4;
        let events = state.ingest(0, EntryKind::Data, &[1; 4], t, &CarriedTag::Full(wrong));
        assert!(events
            .iter()
            .any(|e| matches!(e, LedgerEvent::FatalAlert { .. })));
    }

    #[test]
    fn transition_tag_grants_and_refutes() {
        let mut state = buffered(AggScheme::Agg { n: 8 });
        let tags: Vec<VirtualTag> = (0..3).map(vtag).collect();
        for seq in 0..3u64 {
            state.ingest(seq, EntryKind::Data, &[0; 4], tags[seq as usize], &CarriedTag::None);
        }
        let good = xor_tags(&tags);
        let events = state.apply_transition_tag(0..=2, &good, 10);
        assert_eq!(
            events
                .iter()
                .filter(|e| matches!(e, LedgerEvent::Authenticated { .. }))
                .count(),
            3
        );
        for seq in 0..3 {
            assert_eq!(state.security_of(seq).unwrap().bits, 128);
        }

        // A wrong transition tag refutes the whole range.
        let mut state = buffered(AggScheme::Agg { n: 8 });
        for seq in 0..3u64 {
            state.ingest(seq, EntryKind::Data, &[0; 4], tags[seq as usize], &CarriedTag::None);
        }
        let mut bad = good;
        bad.0[3] ^= 2;
        let events = state.apply_transition_tag(0..=2, &bad, 10);
        assert!(events
            .iter()
            .any(|e| matches!(e, LedgerEvent::Refuted { first_seq: 0, .. })));
    }

    #[test]
    fn transition_tag_with_missing_member_is_inert() {
        let mut state = buffered(AggScheme::Agg { n: 8 });
        state.ingest(0, EntryKind::Data, &[0; 4], vtag(0), &CarriedTag::None);
        state.ingest(2, EntryKind::Data, &[0; 4], vtag(2), &CarriedTag::None);
        let events = state.apply_transition_tag(0..=2, &xor_tags(&[vtag(0), vtag(2)]), 9);
        assert!(events.is_empty());
        assert_eq!(state.security_of(0).unwrap().bits, 0);
    }

    #[test]
    fn agg_levels_are_all_or_nothing_under_random_loss() {
        use rand_chacha::rand_core::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let mask: u64 = rng.next_u64();
            let drop = move |seq: u64| mask >> (seq % 64) & 1 == 1;
            let mut state = buffered(AggScheme::Agg { n: 4 });
            run_agg(&mut state, 4, 64, drop);
            for seq in 0..64u64 {
                if let Ok(level) = state.security_of(seq) {
                    assert!(level.bits == 0 || level.bits == 128);
                }
            }
        }
    }
}
