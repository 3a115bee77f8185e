//! UDP transport: `replay` streams a recorded sequence as sensor
//! packets, `ingest` reassembles a stream into a frame-aligned sequence.
//!
//! Clock model: each sensor stamps packets with its own device clock,
//! `device = host * (1 + drift_ppm * 1e-6) + offset_us`. Sync pulses are
//! shared events: every sensor emits a pulse packet carrying the same
//! round number (`seq`) and its local timestamp of the round. The
//! auxiliary sensor is the house reference: the ingester takes the
//! auxiliary pulse's device timestamp as the round's host time, so all
//! recovered offsets and drifts are relative to the auxiliary clock and
//! no wall-clock reading enters the pipeline.
//!
//! Fault injection (drop, corrupt, duplicate) applies to data packets
//! only; sync pulses always go out clean so fault experiments stress
//! reassembly rather than the clock fit.

use std::collections::BTreeMap;
use std::net::UdpSocket;
use std::time::{Duration, Instant};

use faceimu_core::calib::RawSequence;
use faceimu_core::rng::SeededRng;
use faceimu_core::stream::{
    assemble_frames, decode_packet, detect_tap, encode_packet, estimate_clock, ClockEntry,
    ClockModel, FrameBuffer, PacketKind, Provenance, PulseObservation, SensorPacket, StreamError,
    TapEvent, TimedSample, PACKET_LEN, TAP_DEFAULT_K,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("socket {addr}: {source}")]
    Socket { addr: String, source: std::io::Error },
    #[error("no packets received before the deadline")]
    NoPackets,
    #[error("no data packets decoded (received {rejected} rejects)")]
    NoData { rejected: usize },
    #[error(transparent)]
    Stream(#[from] StreamError),
}

/// Per-sensor injected clock parameters for replay.
#[derive(Debug, Clone, Default)]
pub struct ClockInjection {
    pub offset_us: BTreeMap<u8, f64>,
    pub drift_ppm: BTreeMap<u8, f64>,
}

impl ClockInjection {
    // Wire timestamps are integer microseconds, so round once here; the
    // sub-microsecond truncation is the replay path's only clock error.
    fn device_time(&self, sensor: u8, host_us: f64) -> u64 {
        let offset = self.offset_us.get(&sensor).copied().unwrap_or(0.0);
        let drift = self.drift_ppm.get(&sensor).copied().unwrap_or(0.0);
        (host_us * (1.0 + drift * 1e-6) + offset).round().max(0.0) as u64
    }
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub port: u16,
    pub fps: f64,
    /// Sync rounds spread evenly across the clip.
    pub sync_rounds: usize,
    pub clocks: ClockInjection,
    /// Probability a data packet is silently dropped.
    pub drop_rate: f64,
    /// Probability one random byte of a data packet is flipped.
    pub corrupt_rate: f64,
    /// Probability a data packet is sent twice.
    pub duplicate_rate: f64,
    pub seed: u64,
    /// Sleep between frames; 0 streams as fast as the socket allows.
    pub pace_us: u64,
    /// Emit a tap-marker packet from `tap_sensor` at this frame.
    pub tap_frame: Option<usize>,
    pub tap_sensor: u8,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            port: faceimu_core::stream::DEFAULT_PORT,
            fps: 60.0,
            sync_rounds: 20,
            clocks: ClockInjection::default(),
            drop_rate: 0.0,
            corrupt_rate: 0.0,
            duplicate_rate: 0.0,
            seed: 0,
            pace_us: 300,
            tap_frame: None,
            tap_sensor: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayStats {
    pub sent: usize,
    pub dropped: usize,
    pub corrupted: usize,
    pub duplicated: usize,
    pub pulses: usize,
}

/// Stream a sequence to 127.0.0.1:port. Frame f of sensor s becomes a
/// data packet with seq=f and that sensor's device timestamp of the
/// frame instant; sync rounds interleave at their scheduled times.
pub fn replay(seq: &RawSequence, opts: &ReplayOptions) -> Result<ReplayStats, NetError> {
    let socket = UdpSocket::bind("127.0.0.1:0")
        .map_err(|e| NetError::Socket { addr: "127.0.0.1:0".into(), source: e })?;
    let target = format!("127.0.0.1:{}", opts.port);
    socket
        .connect(&target)
        .map_err(|e| NetError::Socket { addr: target.clone(), source: e })?;

    let mut rng = SeededRng::new(opts.seed);
    let mut stats = ReplayStats::default();
    let frames = seq.num_frames();
    let sensors = seq.num_sensors();
    let period_us = 1e6 / opts.fps;
    let clip_us = frames as f64 * period_us;

    // Pulse rounds at (r + 0.5) / rounds of the clip.
    let mut pulse_times: Vec<(f64, u32)> = (0..opts.sync_rounds)
        .map(|r| ((r as f64 + 0.5) / opts.sync_rounds as f64 * clip_us, r as u32))
        .collect();
    pulse_times.reverse(); // pop() yields earliest first

    let send = |buf: &[u8], stats: &mut ReplayStats| -> Result<(), NetError> {
        socket
            .send(buf)
            .map_err(|e| NetError::Socket { addr: target.clone(), source: e })?;
        stats.sent += 1;
        Ok(())
    };

    for f in 0..frames {
        let host_us = f as f64 * period_us;
        while pulse_times.last().is_some_and(|&(t, _)| t <= host_us) {
            let (t, round) = pulse_times.pop().expect("checked non-empty");
            for s in 0..sensors {
                let p = SensorPacket {
                    kind: PacketKind::SyncPulse,
                    sensor_id: s as u8,
                    seq: round,
                    device_timestamp_us: opts.clocks.device_time(s as u8, t),
                    q: [1.0, 0.0, 0.0, 0.0],
                    a: [0.0; 3],
                };
                send(&encode_packet(&p), &mut stats)?;
                stats.pulses += 1;
            }
        }
        if opts.tap_frame == Some(f) {
            let p = SensorPacket {
                kind: PacketKind::TapMarker,
                sensor_id: opts.tap_sensor,
                seq: f as u32,
                device_timestamp_us: opts.clocks.device_time(opts.tap_sensor, host_us),
                q: [1.0, 0.0, 0.0, 0.0],
                a: [0.0; 3],
            };
            send(&encode_packet(&p), &mut stats)?;
        }
        for s in 0..sensors {
            let sample = &seq.samples[s][f];
            let p = SensorPacket {
                kind: PacketKind::Data,
                sensor_id: s as u8,
                seq: f as u32,
                device_timestamp_us: opts.clocks.device_time(s as u8, host_us),
                q: [sample.q.w as f32, sample.q.x as f32, sample.q.y as f32, sample.q.z as f32],
                a: [sample.a.x as f32, sample.a.y as f32, sample.a.z as f32],
            };
            if opts.drop_rate > 0.0 && rng.uniform() < opts.drop_rate {
                stats.dropped += 1;
                continue;
            }
            let mut buf = encode_packet(&p);
            if opts.corrupt_rate > 0.0 && rng.uniform() < opts.corrupt_rate {
                let byte = rng.below(PACKET_LEN);
                let bit = rng.below(8);
                buf[byte] ^= 1 << bit;
                stats.corrupted += 1;
                // Corrupted packets are never duplicated, so every reject
                // at the receiver traces back to exactly one corruption.
                send(&buf, &mut stats)?;
                continue;
            }
            send(&buf, &mut stats)?;
            if opts.duplicate_rate > 0.0 && rng.uniform() < opts.duplicate_rate {
                send(&buf, &mut stats)?;
                stats.duplicated += 1;
            }
        }
        if opts.pace_us > 0 {
            std::thread::sleep(Duration::from_micros(opts.pace_us));
        }
    }
    // Flush any pulses scheduled at the very end of the clip.
    while let Some((t, round)) = pulse_times.pop() {
        for s in 0..sensors {
            let p = SensorPacket {
                kind: PacketKind::SyncPulse,
                sensor_id: s as u8,
                seq: round,
                device_timestamp_us: opts.clocks.device_time(s as u8, t),
                q: [1.0, 0.0, 0.0, 0.0],
                a: [0.0; 3],
            };
            send(&encode_packet(&p), &mut stats)?;
            stats.pulses += 1;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub port: u16,
    pub fps: f64,
    /// Auxiliary (house-clock) sensor id.
    pub aux_index: u8,
    /// Stop after this much silence once at least one packet arrived.
    pub idle_timeout: Duration,
    /// Hard deadline for the whole receive phase.
    pub max_wait: Duration,
    /// Detect the alignment tap on this sensor's acceleration series.
    pub tap_sensor: Option<u8>,
    pub tap_k: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            port: faceimu_core::stream::DEFAULT_PORT,
            fps: 60.0,
            aux_index: 0,
            idle_timeout: Duration::from_millis(500),
            max_wait: Duration::from_secs(60),
            tap_sensor: Some(8),
            tap_k: TAP_DEFAULT_K,
        }
    }
}

#[derive(Debug)]
pub struct IngestOutcome {
    pub frames: FrameBuffer,
    pub clock: ClockModel,
    pub tap: Option<TapEvent>,
    /// Grid frame of the first tap-marker packet, if one arrived.
    pub tap_marker_frame: Option<usize>,
    pub packets_received: usize,
    pub packets_rejected: usize,
    pub duplicates_dropped: usize,
}

impl IngestOutcome {
    pub fn provenance_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for frame in &self.frames.frames {
            for p in &frame.provenance {
                match p {
                    Provenance::Measured => counts.0 += 1,
                    Provenance::Interpolated => counts.1 += 1,
                    Provenance::Held => counts.2 += 1,
                }
            }
        }
        counts
    }
}

/// Bind the port and return the socket early so a caller can start the
/// sender only once the receiver is guaranteed to be listening.
pub fn bind_ingest_socket(port: u16) -> Result<UdpSocket, NetError> {
    let addr = format!("127.0.0.1:{port}");
    UdpSocket::bind(&addr).map_err(|e| NetError::Socket { addr, source: e })
}

/// Receive until idle, then fit clocks, assemble the frame grid, and
/// locate the alignment tap.
pub fn ingest(socket: &UdpSocket, opts: &IngestOptions) -> Result<IngestOutcome, NetError> {
    socket
        .set_read_timeout(Some(Duration::from_millis(50)))
        .map_err(|e| NetError::Socket { addr: "read-timeout".into(), source: e })?;

    let mut data: BTreeMap<u8, BTreeMap<u32, SensorPacket>> = BTreeMap::new();
    let mut pulses: BTreeMap<u32, Vec<SensorPacket>> = BTreeMap::new();
    let mut taps: Vec<SensorPacket> = Vec::new();
    let mut received = 0usize;
    let mut rejected = 0usize;
    let mut duplicates = 0usize;

    let start = Instant::now();
    let mut last_packet: Option<Instant> = None;
    let mut buf = [0u8; 2 * PACKET_LEN];
    loop {
        if start.elapsed() > opts.max_wait {
            break;
        }
        if let Some(t) = last_packet {
            if t.elapsed() > opts.idle_timeout {
                break;
            }
        }
        let n = match socket.recv(&mut buf) {
            Ok(n) => n,
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                continue;
            }
            Err(e) => return Err(NetError::Socket { addr: "recv".into(), source: e }),
        };
        last_packet = Some(Instant::now());
        received += 1;
        let packet = match decode_packet(&buf[..n]) {
            Ok(p) => p,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        match packet.kind {
            PacketKind::Data => {
                // Keep-first: retransmits and duplicates are ignored.
                let per_sensor = data.entry(packet.sensor_id).or_default();
                if per_sensor.contains_key(&packet.seq) {
                    duplicates += 1;
                } else {
                    per_sensor.insert(packet.seq, packet);
                }
            }
            PacketKind::SyncPulse => pulses.entry(packet.seq).or_default().push(packet),
            PacketKind::TapMarker => taps.push(packet),
        }
    }

    if received == 0 {
        return Err(NetError::NoPackets);
    }
    if data.is_empty() {
        return Err(NetError::NoData { rejected });
    }

    // Rounds where the auxiliary sensor reported define the host time.
    let mut observations = Vec::new();
    for round in pulses.values() {
        let Some(aux) = round.iter().find(|p| p.sensor_id == opts.aux_index) else {
            continue;
        };
        for p in round {
            observations.push(PulseObservation {
                sensor_id: p.sensor_id,
                host_time_us: aux.device_timestamp_us as f64,
                device_timestamp_us: p.device_timestamp_us as f64,
            });
        }
    }
    let sensor_count = data.keys().max().map(|&m| m + 1).unwrap_or(0);
    let mut clock = ClockModel::identity(sensor_count);
    if !observations.is_empty() {
        let fitted = estimate_clock(&observations)?;
        for (sensor, entry) in fitted.entries {
            clock.entries.insert(sensor, entry);
        }
    }

    let mut streams: Vec<Vec<TimedSample>> = Vec::with_capacity(sensor_count as usize);
    for sensor in 0..sensor_count {
        let Some(packets) = data.get(&sensor) else {
            return Err(NetError::Stream(StreamError::EmptyStream { sensor: sensor as usize }));
        };
        let entry = clock.entries.get(&sensor).copied().unwrap_or(ClockEntry::IDENTITY);
        let stream = packets
            .values()
            .map(|p| TimedSample {
                host_time_us: entry.device_to_host(p.device_timestamp_us as f64),
                sample: p.sample(),
            })
            .collect();
        streams.push(stream);
    }
    let frames = assemble_frames(&streams, opts.fps)?;

    let tap = opts.tap_sensor.and_then(|sensor| {
        let idx = sensor as usize;
        if idx >= frames.frames.first().map_or(0, |f| f.samples.len()) {
            return None;
        }
        let mags: Vec<f64> =
            frames.frames.iter().map(|f| f.samples[idx].a.norm()).collect();
        detect_tap(&mags, opts.tap_k).ok()
    });

    let tap_marker_frame = taps.first().map(|p| {
        let entry =
            clock.entries.get(&p.sensor_id).copied().unwrap_or(ClockEntry::IDENTITY);
        let host = entry.device_to_host(p.device_timestamp_us as f64);
        let period_us = 1e6 / frames.fps;
        let frame = (host - frames.start_host_us) / period_us;
        frame.round().max(0.0) as usize
    });

    Ok(IngestOutcome {
        frames,
        clock,
        tap,
        tap_marker_frame,
        packets_received: received,
        packets_rejected: rejected,
        duplicates_dropped: duplicates,
    })
}

/// Replay into an in-process ingester over loopback, returning both
/// sides. Used by the CLI tests and the acceptance suite; the CLI
/// subcommands drive the same two functions from separate processes.
pub fn loopback_round_trip(
    seq: &RawSequence,
    replay_opts: &ReplayOptions,
    ingest_opts: &IngestOptions,
) -> Result<(ReplayStats, IngestOutcome), NetError> {
    let socket = bind_ingest_socket(ingest_opts.port)?;
    let local_port = socket
        .local_addr()
        .map_err(|e| NetError::Socket { addr: "local_addr".into(), source: e })?
        .port();
    let mut replay_opts = replay_opts.clone();
    replay_opts.port = local_port;
    let seq_clone = seq.clone();
    let sender = std::thread::spawn(move || replay(&seq_clone, &replay_opts));
    let outcome = ingest(&socket, ingest_opts);
    let stats = sender.join().expect("replay thread must not panic")?;
    let outcome = outcome?;
    Ok((stats, outcome))
}
