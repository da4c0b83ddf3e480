//! Lock-free latency histogram: log-linear buckets over microseconds.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::Serialize;

/// Sub-buckets per power of two.
const SUB: u64 = 8;
const LINEAR: u64 = 2 * SUB;
/// Covers up to 2^40 µs, far beyond any request.
const BUCKETS: usize = (LINEAR + (40 - 4) * SUB) as usize;

fn bucket_of(us: u64) -> usize {
    if us < LINEAR {
        return us as usize;
    }
    let e = 63 - u64::from(us.leading_zeros());
    let sub = (us >> (e - 3)) & (SUB - 1);
    ((LINEAR + (e - 4) * SUB + sub) as usize).min(BUCKETS - 1)
}

/// Lower edge of a bucket, in microseconds.
fn bucket_floor(i: usize) -> u64 {
    let i = i as u64;
    if i < LINEAR {
        return i;
    }
    let e = (i - LINEAR) / SUB + 4;
    let sub = (i - LINEAR) % SUB;
    (1 << e) | (sub << (e - 3))
}

fn bucket_mid_ms(i: usize) -> f64 {
    let lo = bucket_floor(i) as f64;
    let hi = if i + 1 < BUCKETS { bucket_floor(i + 1) as f64 } else { lo };
    (lo + hi) / 2.0 / 1000.0
}

pub struct LatencyHistogram {
    counts: Vec<AtomicU64>,
    total_us: AtomicU64,
    errors: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencySummary {
    pub requests: u64,
    pub errors: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self {
            counts: (0..BUCKETS).map(|_| AtomicU64::new(0)).collect(),
            total_us: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        }
    }
}

impl LatencyHistogram {
    pub fn record(&self, elapsed: Duration) {
        let us = elapsed.as_micros().min(u128::from(u64::MAX)) as u64;
        self.counts[bucket_of(us)].fetch_add(1, Ordering::Relaxed);
        self.total_us.fetch_add(us, Ordering::Relaxed);
    }

    pub fn record_error(&self) {
        self.errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn summary(&self) -> LatencySummary {
        let counts: Vec<u64> = self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect();
        let n: u64 = counts.iter().sum();
        let quantile = |q: f64| {
            if n == 0 {
                return 0.0;
            }
            let rank = ((q * n as f64).ceil() as u64).max(1);
            let mut seen = 0;
            for (i, &c) in counts.iter().enumerate() {
                seen += c;
                if seen >= rank {
                    return bucket_mid_ms(i);
                }
            }
            bucket_mid_ms(BUCKETS - 1)
        };
        LatencySummary {
            requests: n,
            errors: self.errors.load(Ordering::Relaxed),
            mean_ms: if n == 0 {
                0.0
            } else {
                self.total_us.load(Ordering::Relaxed) as f64 / n as f64 / 1000.0
            },
            p50_ms: quantile(0.50),
            p95_ms: quantile(0.95),
            p99_ms: quantile(0.99),
        }
    }
}
