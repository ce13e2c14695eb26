//! Discrete-event model of the inter-anchor calibration round.
//!
//! A start command makes one anchor the initiator. It runs a burst of `k`
//! single-sided TWR exchanges with each other anchor in counter-clockwise id
//! order and broadcasts each pair's statistics before moving on. When done
//! it passes the token to the next id and becomes a responder. The round ends
//! when the token returns to the anchor that was started, which goes idle
//! until the next start command.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autocalib::{DistanceStatsMatrix, PairStats};
use crate::error::{Error, Result};
use crate::geometry::{distance, AnchorId, Point2};
use crate::ranging::{simulate_measurement, ss_twr_distance, RangingModel, TwrTimings};

/// Responder processing delay used to synthesize SS-TWR timings, seconds.
pub const DEFAULT_REPLY_DELAY: f64 = 300e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Initiator,
    Responder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProtocolMessage {
    /// Host trigger over UART.
    StartCommand { target: AnchorId },
    Poll { from: AnchorId, to: AnchorId },
    Response { from: AnchorId, to: AnchorId, timings: TwrTimings },
    /// Sent to every other anchor.
    StatsBroadcast {
        from: AnchorId,
        about: (AnchorId, AnchorId),
        stats: PairStats,
    },
    TokenPass { from: AnchorId, to: AnchorId },
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::StartCommand { .. } => "start",
            ProtocolMessage::Poll { .. } => "poll",
            ProtocolMessage::Response { .. } => "response",
            ProtocolMessage::StatsBroadcast { .. } => "stats",
            ProtocolMessage::TokenPass { .. } => "token",
        }
    }

    pub fn sender(&self) -> Option<AnchorId> {
        match *self {
            ProtocolMessage::StartCommand { .. } => None,
            ProtocolMessage::Poll { from, .. }
            | ProtocolMessage::Response { from, .. }
            | ProtocolMessage::StatsBroadcast { from, .. }
            | ProtocolMessage::TokenPass { from, .. } => Some(from),
        }
    }

    /// `None` for broadcasts.
    pub fn recipient(&self) -> Option<AnchorId> {
        match *self {
            ProtocolMessage::StartCommand { target } => Some(target),
            ProtocolMessage::Poll { to, .. }
            | ProtocolMessage::Response { to, .. }
            | ProtocolMessage::TokenPass { to, .. } => Some(to),
            ProtocolMessage::StatsBroadcast { .. } => None,
        }
    }

    pub fn is_addressed_to(&self, id: AnchorId) -> bool {
        match self.recipient() {
            Some(to) => to == id,
            None => self.sender() != Some(id),
        }
    }
}

/// Source of ranging exchanges: what a responder's reply looks like to the
/// initiator that polled it.
pub trait Radio {
    fn exchange(&mut self, initiator: AnchorId, responder: AnchorId) -> TwrTimings;
}

/// Radio that samples biased, noisy ranges between known true positions and
/// back-computes the SS-TWR timings that would yield them.
pub struct SimulatedRadio<'a, R: Rng + ?Sized> {
    pub positions: &'a [Point2],
    pub model: &'a RangingModel,
    pub rng: &'a mut R,
    pub reply_delay: f64,
}

impl<R: Rng + ?Sized> Radio for SimulatedRadio<'_, R> {
    fn exchange(&mut self, initiator: AnchorId, responder: AnchorId) -> TwrTimings {
        let true_d = distance(self.positions[initiator.index()], self.positions[responder.index()]);
        let measured = simulate_measurement(true_d, self.model, self.rng).max(0.0);
        TwrTimings::for_distance(measured, self.reply_delay)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorNodeState {
    pub id: AnchorId,
    pub n_anchors: usize,
    pub k_measurements: usize,
    pub mode: Mode,
    pub pending_target: Option<AnchorId>,
    /// Everything this node has measured itself or heard broadcast.
    pub collected: DistanceStatsMatrix,
    burst: Vec<f64>,
    started_round: bool,
}

impl AnchorNodeState {
    pub fn new(id: AnchorId, n_anchors: usize, k_measurements: usize) -> Result<Self> {
        if id.index() >= n_anchors {
            return Err(Error::InvalidValue(format!("anchor id {id} out of range for {n_anchors} anchors")));
        }
        if k_measurements == 0 {
            return Err(Error::InvalidValue("at least one measurement per pair is required".into()));
        }
        Ok(Self {
            id,
            n_anchors,
            k_measurements,
            mode: Mode::Idle,
            pending_target: None,
            collected: DistanceStatsMatrix::new(n_anchors)?,
            burst: Vec::with_capacity(k_measurements),
            started_round: false,
        })
    }

    fn violation(&self, reason: impl Into<String>) -> Error {
        Error::ProtocolViolation {
            node: self.id.index(),
            reason: reason.into(),
        }
    }

    fn poll(&self, to: AnchorId) -> ProtocolMessage {
        ProtocolMessage::Poll { from: self.id, to }
    }

    fn become_initiator(&mut self) -> Vec<ProtocolMessage> {
        self.mode = Mode::Initiator;
        let first = self.id.next(self.n_anchors);
        self.pending_target = Some(first);
        self.burst.clear();
        vec![self.poll(first)]
    }

    /// Applies one incoming message. Pure given the radio: the same state,
    /// message and radio draws always produce the same result.
    pub fn handle(
        mut self,
        msg: &ProtocolMessage,
        _now: f64,
        radio: &mut dyn Radio,
    ) -> Result<(Self, Vec<ProtocolMessage>)> {
        if !msg.is_addressed_to(self.id) {
            return Err(self.violation(format!("received {} not addressed to it", msg.kind())));
        }
        let out = match *msg {
            ProtocolMessage::StartCommand { .. } => {
                if self.mode != Mode::Idle {
                    return Err(self.violation(format!("start command while {:?}", self.mode)));
                }
                self.started_round = true;
                self.become_initiator()
            }
            ProtocolMessage::Poll { from, .. } => {
                if self.mode == Mode::Initiator {
                    return Err(self.violation(format!("poll from {from} while initiator")));
                }
                self.mode = Mode::Responder;
                let timings = radio.exchange(from, self.id);
                vec![ProtocolMessage::Response {
                    from: self.id,
                    to: from,
                    timings,
                }]
            }
            ProtocolMessage::Response { from, timings, .. } => {
                if self.mode != Mode::Initiator {
                    return Err(self.violation(format!("response from {from} while {:?}", self.mode)));
                }
                if self.pending_target != Some(from) {
                    return Err(self.violation(format!(
                        "response from {from} but waiting on {:?}",
                        self.pending_target
                    )));
                }
                let d = ss_twr_distance(&timings).map_err(|e| self.violation(e.to_string()))?;
                self.burst.push(d);
                if self.burst.len() < self.k_measurements {
                    vec![self.poll(from)]
                } else {
                    self.finish_burst(from)?
                }
            }
            ProtocolMessage::StatsBroadcast { about, stats, .. } => {
                self.collected
                    .set(about.0.index(), about.1.index(), stats)
                    .map_err(|e| self.violation(e.to_string()))?;
                Vec::new()
            }
            ProtocolMessage::TokenPass { from, .. } => {
                if self.mode == Mode::Initiator {
                    return Err(self.violation(format!("token from {from} while initiator")));
                }
                if self.started_round {
                    self.started_round = false;
                    self.mode = Mode::Idle;
                    Vec::new()
                } else {
                    if self.mode == Mode::Idle && self.id.index() == 0 {
                        return Err(self.violation("token reached an idle origin anchor"));
                    }
                    self.become_initiator()
                }
            }
        };
        Ok((self, out))
    }

    fn finish_burst(&mut self, target: AnchorId) -> Result<Vec<ProtocolMessage>> {
        let stats = PairStats::from_samples(&self.burst).expect("burst is non-empty");
        self.burst.clear();
        self.collected
            .set(self.id.index(), target.index(), stats)
            .map_err(|e| self.violation(e.to_string()))?;
        let mut out = vec![ProtocolMessage::StatsBroadcast {
            from: self.id,
            about: (self.id, target),
            stats,
        }];
        let next = target.next(self.n_anchors);
        if next == self.id {
            self.pending_target = None;
            self.mode = Mode::Responder;
            out.push(ProtocolMessage::TokenPass {
                from: self.id,
                to: self.id.next(self.n_anchors),
            });
        } else {
            self.pending_target = Some(next);
            out.push(self.poll(next));
        }
        Ok(out)
    }
}

/// Free-function form of [`AnchorNodeState::handle`].
pub fn handle_event(
    state: AnchorNodeState,
    msg: &ProtocolMessage,
    now: f64,
    radio: &mut dyn Radio,
) -> Result<(AnchorNodeState, Vec<ProtocolMessage>)> {
    state.handle(msg, now, radio)
}

/// Delivery policy for the simulated medium.
pub trait Channel {
    /// Delay before `msg` arrives, or `None` to drop it.
    fn delay(&mut self, msg: &ProtocolMessage, now: f64) -> Option<f64>;
}

/// Instantaneous, lossless, ordered delivery.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdealChannel;

impl Channel for IdealChannel {
    fn delay(&mut self, _msg: &ProtocolMessage, _now: f64) -> Option<f64> {
        Some(0.0)
    }
}

/// Round latency `base + per_measurement·k`, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base: f64,
    pub per_measurement: f64,
}

impl LatencyModel {
    /// Line through two measured `(k, latency)` points.
    pub fn through(k0: f64, t0: f64, k1: f64, t1: f64) -> Self {
        let per_measurement = (t1 - t0) / (k1 - k0);
        Self {
            base: t0 - k0 * per_measurement,
            per_measurement,
        }
    }

    /// Measured DWM1001 firmware latencies: 0.9 s with 5 measurements per
    /// pair, 2.5 s with 50.
    pub fn dwm1001() -> Self {
        Self::through(5.0, 0.9, 50.0, 2.5)
    }

    pub fn estimate(&self, k_measurements: f64) -> f64 {
        self.base + self.per_measurement * k_measurements
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self::dwm1001()
    }
}

pub fn estimate_latency(k_measurements: usize) -> f64 {
    LatencyModel::dwm1001().estimate(k_measurements as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MessageCounts {
    pub start_commands: usize,
    pub polls: usize,
    pub responses: usize,
    pub stats_broadcasts: usize,
    pub token_passes: usize,
}

impl MessageCounts {
    fn record(&mut self, msg: &ProtocolMessage) {
        match msg {
            ProtocolMessage::StartCommand { .. } => self.start_commands += 1,
            ProtocolMessage::Poll { .. } => self.polls += 1,
            ProtocolMessage::Response { .. } => self.responses += 1,
            ProtocolMessage::StatsBroadcast { .. } => self.stats_broadcasts += 1,
            ProtocolMessage::TokenPass { .. } => self.token_passes += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub message: ProtocolMessage,
}

/// Everything observed while running one round to quiescence.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub nodes: Vec<AnchorNodeState>,
    pub counts: MessageCounts,
    pub trace: Vec<TraceEvent>,
    /// Largest number of simultaneous initiators seen after any event.
    pub max_initiators: usize,
    pub latency: f64,
}

impl RoundOutcome {
    /// The statistics every node agrees on. Fails if any node is missing data
    /// or disagrees with node 0.
    pub fn consensus(&self) -> Result<DistanceStatsMatrix> {
        let reference = &self.nodes[0].collected;
        if let Some((i, j)) = reference.first_missing_pair() {
            return Err(Error::MissingPair(i, j));
        }
        for node in &self.nodes[1..] {
            if node.collected != *reference {
                return Err(Error::ProtocolViolation {
                    node: node.id.index(),
                    reason: "statistics differ from anchor 0".into(),
                });
            }
        }
        Ok(reference.clone())
    }

    /// `time_s,type,from,to` rows.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time_s,type,from,to")?;
        for ev in &self.trace {
            let from = ev.message.sender().map_or("host".to_string(), |a| a.to_string());
            let to = ev.message.recipient().map_or("all".to_string(), |a| a.to_string());
            writeln!(w, "{},{},{from},{to}", crate::fmt_sig(ev.time), ev.message.kind())?;
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Scheduled {
    time: f64,
    seq: u64,
    message: ProtocolMessage,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Runs one round, started at `origin`, until no message is in flight.
pub fn simulate_round(
    n_anchors: usize,
    k_measurements: usize,
    origin: AnchorId,
    radio: &mut dyn Radio,
    channel: &mut dyn Channel,
) -> Result<RoundOutcome> {
    if n_anchors < 3 {
        return Err(Error::InsufficientData(format!(
            "a calibration round needs at least 3 anchors, got {n_anchors}"
        )));
    }
    let mut nodes = (0..n_anchors)
        .map(|i| AnchorNodeState::new(AnchorId(i), n_anchors, k_measurements).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let pairs = n_anchors * (n_anchors - 1);
    // closed-form message total plus the start command
    let event_budget = 2 * pairs * k_measurements + pairs * (n_anchors - 1) + n_anchors + 1;

    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;
    let mut counts = MessageCounts::default();
    let mut trace = Vec::new();
    let mut max_initiators = 0;
    let mut events = 0usize;

    let mut schedule = |queue: &mut BinaryHeap<Scheduled>,
                        counts: &mut MessageCounts,
                        channel: &mut dyn Channel,
                        msg: ProtocolMessage,
                        now: f64| {
        counts.record(&msg);
        if let Some(delay) = channel.delay(&msg, now) {
            queue.push(Scheduled {
                time: now + delay,
                seq,
                message: msg,
            });
            seq += 1;
        }
    };
    schedule(
        &mut queue,
        &mut counts,
        channel,
        ProtocolMessage::StartCommand { target: origin },
        0.0,
    );

    while let Some(Scheduled { time, message, .. }) = queue.pop() {
        trace.push(TraceEvent { time, message });
        let recipients: Vec<usize> = match message.recipient() {
            Some(to) => vec![to.index()],
            None => (0..n_anchors).filter(|&i| message.is_addressed_to(AnchorId(i))).collect(),
        };
        for idx in recipients {
            events += 1;
            if events > event_budget {
                return Err(Error::ProtocolViolation {
                    node: idx,
                    reason: format!("round exceeded {event_budget} deliveries"),
                });
            }
            let state = nodes[idx].take().expect("node state present");
            let (state, out) = state.handle(&message, time, radio)?;
            nodes[idx] = Some(state);
            for msg in out {
                schedule(&mut queue, &mut counts, channel, msg, time);
            }
        }
        let initiators = nodes
            .iter()
            .filter(|n| n.as_ref().is_some_and(|n| n.mode == Mode::Initiator))
            .count();
        max_initiators = max_initiators.max(initiators);
        if initiators > 1 {
            return Err(Error::ProtocolViolation {
                node: origin.index(),
                reason: format!("{initiators} simultaneous initiators"),
            });
        }
        let ranging_in_flight = queue
            .iter()
            .any(|s| matches!(s.message, ProtocolMessage::Poll { .. } | ProtocolMessage::Response { .. }));
        if initiators == 0 && ranging_in_flight {
            return Err(Error::ProtocolViolation {
                node: origin.index(),
                reason: "messages in flight with no initiator".into(),
            });
        }
    }

    Ok(RoundOutcome {
        nodes: nodes.into_iter().map(|n| n.expect("node state present")).collect(),
        counts,
        trace,
        max_initiators,
        latency: estimate_latency(k_measurements),
    })
}

/// Simulates a full round over an ideal channel between anchors at
/// `true_positions` and returns the shared statistics and the expected
/// round latency.
pub fn run_calibration_round<R: Rng + ?Sized>(
    n_anchors: usize,
    k_measurements: usize,
    true_positions: &[Point2],
    ranging_model: &RangingModel,
    rng: &mut R,
) -> Result<(DistanceStatsMatrix, f64)> {
    let outcome = run_calibration_round_detailed(n_anchors, k_measurements, true_positions, ranging_model, rng)?;
    Ok((outcome.consensus()?, outcome.latency))
}

pub fn run_calibration_round_detailed<R: Rng + ?Sized>(
    n_anchors: usize,
    k_measurements: usize,
    true_positions: &[Point2],
    ranging_model: &RangingModel,
    rng: &mut R,
) -> Result<RoundOutcome> {
    if true_positions.len() != n_anchors {
        return Err(Error::LengthMismatch {
            expected: n_anchors,
            actual: true_positions.len(),
        });
    }
    let mut radio = SimulatedRadio {
        positions: true_positions,
        model: ranging_model,
        rng,
        reply_delay: DEFAULT_REPLY_DELAY,
    };
    simulate_round(n_anchors, k_measurements, AnchorId(0), &mut radio, &mut IdealChannel)
}
