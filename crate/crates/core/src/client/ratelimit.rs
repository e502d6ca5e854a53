use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub const WINDOW: Duration = Duration::from_secs(60);

/// Time source. Swappable so limiter and backoff tests run on virtual time.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Clock that only moves when someone sleeps on it. Records every sleep.
#[derive(Debug, Default)]
pub struct VirtualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl VirtualClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn advance(&self, by: Duration) {
        self.state.lock().unwrap().0 += by;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().unwrap().1.clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().0
    }

    fn sleep(&self, duration: Duration) {
        let mut s = self.state.lock().unwrap();
        s.0 += duration;
        s.1.push(duration);
    }
}

/// Sliding-window limiter: at most `limit` acquisitions in any half-open
/// window of 60 seconds. Keeps the start time of the last `limit` grants.
pub struct RateLimiter {
    limit: usize,
    clock: Arc<dyn Clock>,
    grants: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        let limit = requests_per_minute.max(1) as usize;
        Self { limit, clock, grants: Mutex::new(VecDeque::with_capacity(limit)) }
    }

    /// Block until a request may start, then record it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut grants = self.grants.lock().unwrap();
                let now = self.clock.now();
                while grants.front().is_some_and(|&t| t + WINDOW <= now) {
                    grants.pop_front();
                }
                if grants.len() < self.limit {
                    grants.push_back(now);
                    return;
                }
                *grants.front().expect("limit >= 1") + WINDOW - now
            };
            self.clock.sleep(wait);
        }
    }
}
