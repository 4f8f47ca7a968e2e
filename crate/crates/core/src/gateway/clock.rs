use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Time source for rate limiting and backoff.
pub trait Clock: Send + Sync {
    /// Monotonic time since the clock was created.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
    /// Wall-clock Unix seconds.
    fn unix_now(&self) -> u64;
}

#[derive(Debug)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }

    fn unix_now(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// Simulated clock: `sleep` returns immediately after moving time forward.
///
/// Time only advances through `sleep` or [`SimClock::advance`]. A sleeping
/// caller wakes at `max(now, call_time + d)`, so concurrent sleepers never
/// move time backwards.
#[derive(Debug, Default)]
pub struct SimClock {
    nanos: AtomicU64,
    epoch: u64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulated clock whose `unix_now` starts at `epoch`.
    pub fn with_epoch(epoch: u64) -> Self {
        Self {
            nanos: AtomicU64::new(0),
            epoch,
        }
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        let target = self.nanos.load(Ordering::SeqCst) + d.as_nanos() as u64;
        self.nanos.fetch_max(target, Ordering::SeqCst);
    }

    fn unix_now(&self) -> u64 {
        self.epoch + self.now().as_secs()
    }
}
