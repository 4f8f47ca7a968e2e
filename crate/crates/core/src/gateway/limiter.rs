//! Per-endpoint admission control: an in-flight cap plus a sliding 60 s
//! request window.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::clock::Clock;

pub const RATE_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug)]
pub struct EndpointLimiter {
    max_in_flight: usize,
    requests_per_minute: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
    // issue times inside the current window, oldest first
    window: Mutex<VecDeque<Duration>>,
}

/// Holds one in-flight slot until dropped.
#[must_use]
pub struct Permit<'a> {
    limiter: &'a EndpointLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().unwrap();
        *n -= 1;
        self.limiter.released.notify_one();
    }
}

impl EndpointLimiter {
    pub fn new(max_in_flight: usize, requests_per_minute: usize) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            requests_per_minute: requests_per_minute.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            window: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks until both an in-flight slot and a rate-window slot are free.
    pub fn acquire(&self, clock: &dyn Clock) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.max_in_flight {
                n = self.released.wait(n).unwrap();
            }
            *n += 1;
        }
        let permit = Permit { limiter: self };
        loop {
            let wait = {
                let mut window = self.window.lock().unwrap();
                let now = clock.now();
                while window.front().is_some_and(|&t| t + RATE_WINDOW <= now) {
                    window.pop_front();
                }
                if window.len() < self.requests_per_minute {
                    window.push_back(now);
                    return permit;
                }
                window[0] + RATE_WINDOW - now
            };
            clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::clock::SimClock;

    #[test]
    fn window_blocks_until_oldest_expires() {
        let clock = SimClock::new();
        let lim = EndpointLimiter::new(4, 2);
        drop(lim.acquire(&clock));
        drop(lim.acquire(&clock));
        assert_eq!(clock.now(), Duration::ZERO);
        drop(lim.acquire(&clock));
        assert_eq!(clock.now(), RATE_WINDOW);
    }
}
