//! NewReno-style congestion control (slow start, congestion avoidance,
//! fast retransmit/recovery, RTO with exponential backoff, no SACK).

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcpConfig {
    pub mss: u64,
    pub init_cwnd_segments: u64,
    pub init_ssthresh_bytes: u64,
    pub init_rto_ms: f64,
    pub min_rto_ms: f64,
    pub max_rto_ms: f64,
    pub dupack_threshold: u32,
}

impl Default for TcpConfig {
    fn default() -> Self {
        TcpConfig {
            mss: 1472,
            init_cwnd_segments: 1,
            init_ssthresh_bytes: 64 * 1024,
            init_rto_ms: 100.0,
            min_rto_ms: 10.0,
            max_rto_ms: 2000.0,
            dupack_threshold: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TcpEvent {
    /// Cumulative ack covering `segments` new segments.
    Ack { segments: u64 },
    /// The duplicate ack that reaches the fast-retransmit threshold.
    TripleDupAck,
    Timeout,
}

/// Congestion window state in bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct NewReno {
    pub mss: f64,
    pub cwnd: f64,
    pub ssthresh: f64,
}

impl NewReno {
    pub fn new(config: &TcpConfig) -> Self {
        let mss = config.mss as f64;
        NewReno {
            mss,
            cwnd: mss * config.init_cwnd_segments as f64,
            ssthresh: config.init_ssthresh_bytes as f64,
        }
    }

    pub fn in_slow_start(&self) -> bool {
        self.cwnd < self.ssthresh
    }

    pub fn on_event(&mut self, event: TcpEvent) {
        match event {
            TcpEvent::Ack { segments } => {
                for _ in 0..segments {
                    if self.in_slow_start() {
                        self.cwnd += self.mss;
                    } else {
                        self.cwnd += self.mss * self.mss / self.cwnd;
                    }
                }
            }
            TcpEvent::TripleDupAck => {
                self.ssthresh = (self.cwnd / 2.0).max(2.0 * self.mss);
                self.cwnd = self.ssthresh;
            }
            TcpEvent::Timeout => {
                self.ssthresh = (self.cwnd / 2.0).max(2.0 * self.mss);
                self.cwnd = self.mss;
            }
        }
    }

    /// Whole segments allowed in flight.
    pub fn window_segments(&self) -> u64 {
        ((self.cwnd / self.mss).floor() as u64).max(1)
    }
}

/// Retransmission timer estimator (smoothed RTT, RTT variance).
#[derive(Clone, Debug, PartialEq)]
pub struct RtoEstimator {
    srtt_ns: Option<f64>,
    rttvar_ns: f64,
    pub rto_ns: f64,
    min_ns: f64,
    max_ns: f64,
}

impl RtoEstimator {
    pub fn new(config: &TcpConfig) -> Self {
        RtoEstimator {
            srtt_ns: None,
            rttvar_ns: 0.0,
            rto_ns: config.init_rto_ms * 1e6,
            min_ns: config.min_rto_ms * 1e6,
            max_ns: config.max_rto_ms * 1e6,
        }
    }

    pub fn sample(&mut self, rtt_ns: f64) {
        match self.srtt_ns {
            None => {
                self.srtt_ns = Some(rtt_ns);
                self.rttvar_ns = rtt_ns / 2.0;
            }
            Some(srtt) => {
                self.rttvar_ns = 0.75 * self.rttvar_ns + 0.25 * (srtt - rtt_ns).abs();
                self.srtt_ns = Some(0.875 * srtt + 0.125 * rtt_ns);
            }
        }
        let srtt = self.srtt_ns.unwrap_or(rtt_ns);
        self.rto_ns = (srtt + 4.0 * self.rttvar_ns).clamp(self.min_ns, self.max_ns);
    }

    pub fn backoff(&mut self) {
        self.rto_ns = (self.rto_ns * 2.0).min(self.max_ns);
    }

    pub fn srtt_ns(&self) -> Option<f64> {
        self.srtt_ns
    }
}
