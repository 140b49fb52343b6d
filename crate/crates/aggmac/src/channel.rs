//! Bursty lossy-channel simulation.
//!
//! Losses come from a two-state Markov process (good/bad) with
//! state-dependent loss probabilities, scaled by a packet-length profile:
//! longer packets see proportionally higher error rates, anchored to
//! measured rates at reference lengths. All randomness flows through a
//! seeded integer generator compared against fixed-point thresholds, so a
//! `(params, seed)` pair reproduces the same trace on any platform.
//!
//! One uniform draw per packet decides delivery for *every* length at
//! once, which is what lets experiments stitch outcomes for different
//! record sizes onto identical channel dynamics.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("length profile needs at least one anchor")]
    EmptyProfile,
    #[error("length profile must be non-decreasing in packet length")]
    ProfileNotMonotone,
    #[error("length profile rates must be positive")]
    NonPositiveRate,
    #[error("unknown channel preset {0:?}")]
    UnknownPreset(String),
    #[error("cannot parse channel data: {0}")]
    Parse(String),
}

/// Transition and loss probabilities of the two-state process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GilbertElliotParams {
    pub p_good_to_bad: f64,
    pub p_bad_to_good: f64,
    pub loss_good: f64,
    pub loss_bad: f64,
}

impl GilbertElliotParams {
    /// Length-independent loss at rate `p` (degenerate single state).
    pub fn uniform(p: f64) -> GilbertElliotParams {
        GilbertElliotParams {
            p_good_to_bad: 0.0,
            p_bad_to_good: 1.0,
            loss_good: p,
            loss_bad: p,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        for p in [
            self.p_good_to_bad,
            self.p_bad_to_good,
            self.loss_good,
            self.loss_bad,
        ] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(ChannelError::InvalidProbability(p));
            }
        }
        Ok(())
    }

    /// Long-run share of packets sent while the channel is bad.
    pub fn stationary_bad_share(&self) -> f64 {
        let denom = self.p_good_to_bad + self.p_bad_to_good;
        if denom == 0.0 {
            return 0.0;
        }
        self.p_good_to_bad / denom
    }

    /// Closed-form stationary loss rate at length scale 1.
    pub fn stationary_loss(&self) -> f64 {
        let bad = self.stationary_bad_share();
        bad * self.loss_bad + (1.0 - bad) * self.loss_good
    }
}

/// Measured packet error rate as a function of packet length, interpolated
/// piecewise-linearly between anchors and clamped outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthProfile {
    anchors: Vec<(u32, f64)>,
    reference_len: u32,
}

impl LengthProfile {
    pub fn new(mut anchors: Vec<(u32, f64)>, reference_len: u32) -> Result<Self, ChannelError> {
        if anchors.is_empty() {
            return Err(ChannelError::EmptyProfile);
        }
        anchors.sort_by_key(|&(len, _)| len);
        for pair in anchors.windows(2) {
            if pair[1].1 < pair[0].1 {
                return Err(ChannelError::ProfileNotMonotone);
            }
        }
        if anchors.iter().any(|&(_, per)| per <= 0.0) {
            return Err(ChannelError::NonPositiveRate);
        }
        Ok(LengthProfile {
            anchors,
            reference_len,
        })
    }

    /// A profile that ignores packet length entirely.
    pub fn flat() -> LengthProfile {
        LengthProfile {
            anchors: vec![(1, 1.0)],
            reference_len: 1,
        }
    }

    /// Interpolated error rate at `len`, clamped to the anchor range.
    pub fn per_at(&self, len: u32) -> f64 {
        let first = self.anchors[0];
        let last = *self.anchors.last().expect("non-empty");
        if len <= first.0 {
            return first.1;
        }
        if len >= last.0 {
            return last.1;
        }
        for pair in self.anchors.windows(2) {
            let (l0, p0) = pair[0];
            let (l1, p1) = pair[1];
            if len <= l1 {
                let t = f64::from(len - l0) / f64::from(l1 - l0);
                return p0 + t * (p1 - p0);
            }
        }
        last.1
    }

    /// Multiplier applied to state loss probabilities for `len`.
    pub fn scale(&self, len: u32) -> f64 {
        self.per_at(len) / self.per_at(self.reference_len)
    }
}

const FRACTION_BITS: u32 = 53;

/// Bernoulli draw via fixed-point threshold comparison on 53 random bits.
fn below(draw53: u64, p: f64) -> bool {
    let threshold = (p.clamp(0.0, 1.0) * (1u64 << FRACTION_BITS) as f64) as u64;
    draw53 < threshold
}

/// One packet's worth of channel randomness: the state after the
/// transition and the uniform draw deciding delivery for any length.
#[derive(Debug, Clone, Copy)]
pub struct PacketDraw {
    pub in_bad: bool,
    draw53: u64,
}

impl PacketDraw {
    /// Would a packet of `len` bytes survive this draw?
    pub fn delivered(&self, params: &GilbertElliotParams, profile: &LengthProfile, len: u32) -> bool {
        let loss = if self.in_bad {
            params.loss_bad
        } else {
            params.loss_good
        };
        !below(self.draw53, loss * profile.scale(len))
    }
}

/// The channel state machine producing per-packet drop decisions.
#[derive(Debug, Clone)]
pub struct GilbertElliot {
    params: GilbertElliotParams,
    profile: LengthProfile,
    in_bad: bool,
    rng: ChaCha8Rng,
}

impl GilbertElliot {
    pub fn new(
        params: GilbertElliotParams,
        profile: LengthProfile,
        seed: u64,
    ) -> Result<GilbertElliot, ChannelError> {
        params.validate()?;
        Ok(GilbertElliot {
            params,
            profile,
            in_bad: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn params(&self) -> &GilbertElliotParams {
        &self.params
    }

    pub fn profile(&self) -> &LengthProfile {
        &self.profile
    }

    /// Swap channel parameters mid-stream (scheduled scenarios). State and
    /// randomness carry over so runs with different record sizes stay
    /// comparable packet for packet.
    pub fn set_params(&mut self, params: GilbertElliotParams) -> Result<(), ChannelError> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    /// Advance one packet slot: state transition first, then the loss draw.
    pub fn draw(&mut self) -> PacketDraw {
        let transition = self.rng.next_u64() >> (64 - FRACTION_BITS);
        let flip = if self.in_bad {
            self.params.p_bad_to_good
        } else {
            self.params.p_good_to_bad
        };
        if below(transition, flip) {
            self.in_bad = !self.in_bad;
        }
        PacketDraw {
            in_bad: self.in_bad,
            draw53: self.rng.next_u64() >> (64 - FRACTION_BITS),
        }
    }

    /// Step the channel for one packet of `len` bytes.
    pub fn step(&mut self, len: u32) -> bool {
        let draw = self.draw();
        draw.delivered(&self.params, &self.profile, len)
    }
}

/// A binary loss trace for one packet length, with enough metadata to
/// regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub params: GilbertElliotParams,
    pub seed: u64,
    pub packet_len: u32,
    pub outcomes: Vec<bool>,
}

impl LossTrace {
    pub fn generate(
        params: GilbertElliotParams,
        profile: &LengthProfile,
        packet_len: u32,
        packets: usize,
        seed: u64,
    ) -> Result<LossTrace, ChannelError> {
        let mut channel = GilbertElliot::new(params, profile.clone(), seed)?;
        let outcomes = (0..packets).map(|_| channel.step(packet_len)).collect();
        Ok(LossTrace {
            params,
            seed,
            packet_len,
            outcomes,
        })
    }

    pub fn realized_per(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        let lost = self.outcomes.iter().filter(|&&d| !d).count();
        lost as f64 / self.outcomes.len() as f64
    }

    /// One line per packet: `1` delivered, `0` dropped, preceded by a
    /// comment header recording the generating parameters.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# gilbert-elliot p_gb={} p_bg={} loss_good={} loss_bad={} len={} seed={}\n",
            self.params.p_good_to_bad,
            self.params.p_bad_to_good,
            self.params.loss_good,
            self.params.loss_bad,
            self.packet_len,
            self.seed,
        ));
        for &delivered in &self.outcomes {
            out.push(if delivered { '1' } else { '0' });
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<LossTrace, ChannelError> {
        let mut params = GilbertElliotParams::uniform(0.0);
        let mut seed = 0u64;
        let mut packet_len = 0u32;
        let mut outcomes = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    let Some((key, value)) = field.split_once('=') else {
                        continue;
                    };
                    let parse =
                        |v: &str| v.parse::<f64>().map_err(|e| ChannelError::Parse(e.to_string()));
                    match key {
                        "p_gb" => params.p_good_to_bad = parse(value)?,
                        "p_bg" => params.p_bad_to_good = parse(value)?,
                        "loss_good" => params.loss_good = parse(value)?,
                        "loss_bad" => params.loss_bad = parse(value)?,
                        "len" => {
                            packet_len = value
                                .parse()
                                .map_err(|e: std::num::ParseIntError| {
                                    ChannelError::Parse(e.to_string())
                                })?
                        }
                        "seed" => {
                            seed = value.parse().map_err(|e: std::num::ParseIntError| {
                                ChannelError::Parse(e.to_string())
                            })?
                        }
                        _ => {}
                    }
                }
                continue;
            }
            match line {
                "1" => outcomes.push(true),
                "0" => outcomes.push(false),
                other => return Err(ChannelError::Parse(format!("bad trace line {other:?}"))),
            }
        }
        Ok(LossTrace {
            params,
            seed,
            packet_len,
            outcomes,
        })
    }
}

/// One sampled channel: parameters plus realized error rates at the
/// lengths of interest, evaluated on shared per-packet draws.
#[derive(Debug, Clone)]
pub struct ChannelTrace {
    pub params: GilbertElliotParams,
    pub seed: u64,
    pub per_by_length: Vec<(u32, f64)>,
}

/// Uniform ranges the channel sampler draws parameters from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSampler {
    pub bad_share: (f64, f64),
    pub p_bad_to_good: (f64, f64),
    pub loss_good: (f64, f64),
    pub loss_bad: (f64, f64),
}

impl Default for ChannelSampler {
    fn default() -> Self {
        // Wide enough that realized error rates span well below 0.5% up
        // past 15%.
        ChannelSampler {
            bad_share: (0.02, 0.35),
            p_bad_to_good: (0.02, 0.2),
            loss_good: (0.001, 0.06),
            loss_bad: (0.15, 0.5),
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    let u = (rng.next_u64() >> (64 - FRACTION_BITS)) as f64 / (1u64 << FRACTION_BITS) as f64;
    range.0 + u * (range.1 - range.0)
}

impl ChannelSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> GilbertElliotParams {
        let bad_share = uniform_in(rng, self.bad_share);
        let p_bad_to_good = uniform_in(rng, self.p_bad_to_good);
        let p_good_to_bad = p_bad_to_good * bad_share / (1.0 - bad_share);
        GilbertElliotParams {
            p_good_to_bad,
            p_bad_to_good,
            loss_good: uniform_in(rng, self.loss_good),
            loss_bad: uniform_in(rng, self.loss_bad),
        }
    }
}

/// Sample `count` channels and record their realized error rates at each
/// requested length, every length sharing the same per-packet draws.
pub fn generate_traces(
    count: usize,
    sampler: &ChannelSampler,
    lengths: &[u32],
    profile: &LengthProfile,
    packets_per_trace: usize,
    base_seed: u64,
) -> Result<Vec<ChannelTrace>, ChannelError> {
    let mut sample_rng = ChaCha8Rng::seed_from_u64(base_seed);
    let mut traces = Vec::with_capacity(count);
    for index in 0..count {
        let params = sampler.sample(&mut sample_rng);
        let seed = base_seed.wrapping_add(1_000_003).wrapping_mul(31).wrapping_add(index as u64);
        let mut channel = GilbertElliot::new(params, profile.clone(), seed)?;
        let mut lost = vec![0u64; lengths.len()];
        for _ in 0..packets_per_trace {
            let draw = channel.draw();
            for (slot, &len) in lengths.iter().enumerate() {
                if !draw.delivered(&params, profile, len) {
                    lost[slot] += 1;
                }
            }
        }
        let per_by_length = lengths
            .iter()
            .zip(lost)
            .map(|(&len, lost)| (len, lost as f64 / packets_per_trace as f64))
            .collect();
        traces.push(ChannelTrace {
            params,
            seed,
            per_by_length,
        });
    }
    Ok(traces)
}

/// A named channel configuration: process parameters plus length profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPreset {
    pub p_good_to_bad: f64,
    pub p_bad_to_good: f64,
    pub loss_good: f64,
    pub loss_bad: f64,
    pub reference_len: u32,
    pub profile: Vec<(u32, f64)>,
}

impl ChannelPreset {
    pub fn params(&self) -> GilbertElliotParams {
        GilbertElliotParams {
            p_good_to_bad: self.p_good_to_bad,
            p_bad_to_good: self.p_bad_to_good,
            loss_good: self.loss_good,
            loss_bad: self.loss_bad,
        }
    }

    pub fn length_profile(&self) -> Result<LengthProfile, ChannelError> {
        LengthProfile::new(self.profile.clone(), self.reference_len)
    }
}

/// Parse a presets file: one TOML table per named preset.
pub fn parse_presets(text: &str) -> Result<BTreeMap<String, ChannelPreset>, ChannelError> {
    toml::from_str(text).map_err(|e| ChannelError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> GilbertElliotParams {
        GilbertElliotParams {
            p_good_to_bad: 0.0026316,
            p_bad_to_good: 0.05,
            loss_good: 0.005,
            loss_bad: 0.3,
        }
    }

    #[test]
    fn zero_loss_delivers_everything() {
        let params = GilbertElliotParams {
            p_good_to_bad: 0.3,
            p_bad_to_good: 0.3,
            loss_good: 0.0,
            loss_bad: 0.0,
        };
        let mut channel = GilbertElliot::new(params, LengthProfile::flat(), 1).unwrap();
        assert!((0..10_000).all(|_| channel.step(30)));
    }

    #[test]
    fn single_state_loss_obeys_the_law_of_large_numbers() {
        let mut channel =
            GilbertElliot::new(GilbertElliotParams::uniform(0.05), LengthProfile::flat(), 7)
                .unwrap();
        let n = 100_000;
        let lost = (0..n).filter(|_| !channel.step(30)).count();
        let per = lost as f64 / n as f64;
        assert!((per - 0.05).abs() < 0.005, "realized {per}");
    }

    #[test]
    fn stationary_loss_matches_closed_form() {
        let params = two_state();
        let expect = params.stationary_loss();
        let mut channel = GilbertElliot::new(params, LengthProfile::flat(), 12).unwrap();
        let n = 2_000_000u64;
        let lost = (0..n).filter(|_| !channel.step(48)).count();
        let per = lost as f64 / n as f64;

        // Binomial sigma corrected for Markov correlation:
        // Cov_k = lambda^k * pi_g * pi_b * (loss_bad - loss_good)^2.
        let lambda = 1.0 - params.p_good_to_bad - params.p_bad_to_good;
        let pi_b = params.stationary_bad_share();
        let var1 = expect * (1.0 - expect);
        let cov_sum = pi_b * (1.0 - pi_b)
            * (params.loss_bad - params.loss_good).powi(2)
            * lambda
            / (1.0 - lambda);
        let sigma = ((var1 + 2.0 * cov_sum) / n as f64).sqrt();
        assert!(
            (per - expect).abs() < 3.0 * sigma,
            "realized {per}, expected {expect} +- {}",
            3.0 * sigma
        );
        assert!((per - expect).abs() / expect < 0.05);
    }

    #[test]
    fn identical_seed_gives_identical_traces() {
        let profile = LengthProfile::new(vec![(4, 0.0065), (108, 0.0381)], 48).unwrap();
        let a = LossTrace::generate(two_state(), &profile, 29, 5_000, 99).unwrap();
        let b = LossTrace::generate(two_state(), &profile, 29, 5_000, 99).unwrap();
        assert_eq!(a, b);
        let c = LossTrace::generate(two_state(), &profile, 29, 5_000, 100).unwrap();
        assert_ne!(a.outcomes, c.outcomes);
    }

    #[test]
    fn shared_draws_make_loss_monotone_in_length() {
        let profile = LengthProfile::new(vec![(4, 0.0065), (108, 0.0381)], 48).unwrap();
        let params = two_state();
        let mut channel = GilbertElliot::new(params, profile.clone(), 5).unwrap();
        for _ in 0..50_000 {
            let draw = channel.draw();
            let short = draw.delivered(&params, &profile, 10);
            let long = draw.delivered(&params, &profile, 100);
            // A draw that drops the short packet drops the long one too.
            assert!(short || !long);
        }
    }

    #[test]
    fn profile_interpolates_and_clamps() {
        let profile = LengthProfile::new(vec![(4, 0.01), (104, 0.05)], 4).unwrap();
        assert!((profile.per_at(4) - 0.01).abs() < 1e-12);
        assert!((profile.per_at(104) - 0.05).abs() < 1e-12);
        assert!((profile.per_at(54) - 0.03).abs() < 1e-12);
        assert!((profile.per_at(1) - 0.01).abs() < 1e-12);
        assert!((profile.per_at(400) - 0.05).abs() < 1e-12);
        assert!(
            LengthProfile::new(vec![(4, 0.05), (104, 0.01)], 4).is_err(),
            "decreasing profiles are invalid"
        );
    }

    #[test]
    fn trace_file_roundtrip() {
        let profile = LengthProfile::flat();
        let trace =
            LossTrace::generate(GilbertElliotParams::uniform(0.2), &profile, 30, 500, 3).unwrap();
        let text = trace.to_file_string();
        assert!(text.starts_with('#'));
        let parsed = LossTrace::from_file_string(&text).unwrap();
        assert_eq!(parsed, trace);
    }

    #[test]
    fn sampled_channels_cover_the_documented_span() {
        let profile = LengthProfile::new(vec![(4, 0.0065), (108, 0.0381)], 48).unwrap();
        let traces = generate_traces(
            10_000,
            &ChannelSampler::default(),
            &[48],
            &profile,
            1_500,
            424_242,
        )
        .unwrap();
        assert_eq!(traces.len(), 10_000);
        let pers: Vec<f64> = traces.iter().map(|t| t.per_by_length[0].1).collect();
        let min = pers.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = pers.iter().cloned().fold(0.0, f64::max);
        assert!(min <= 0.005, "min realized PER {min}");
        assert!(max >= 0.15, "max realized PER {max}");
    }

    #[test]
    fn presets_parse_and_land_on_measured_anchors() {
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../config/presets.toml"
        ))
        .expect("shipped presets");
        let presets = parse_presets(&text).unwrap();
        for (name, lo, hi) in [("good", 0.0065, 0.0381), ("bad", 0.0435, 0.1352)] {
            let preset = presets.get(name).unwrap();
            let profile = preset.length_profile().unwrap();
            assert!((profile.per_at(4) - lo).abs() / lo < 1e-9);
            assert!((profile.per_at(108) - hi).abs() / hi < 1e-9);

            // Realized rates at the anchor lengths track the anchors.
            let params = preset.params();
            for (len, anchor) in [(4u32, lo), (108u32, hi)] {
                let trace = LossTrace::generate(params, &profile, len, 400_000, 17).unwrap();
                let realized = trace.realized_per();
                assert!(
                    (realized - anchor).abs() / anchor < 0.10,
                    "{name}@{len}: realized {realized}, anchor {anchor}"
                );
            }
        }
    }
}
