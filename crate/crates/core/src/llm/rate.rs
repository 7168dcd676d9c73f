use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Token bucket. Admission is serialized; callers sleep outside the lock.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    capacity: f64,
    state: Mutex<Bucket>,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

impl RateLimiter {
    /// `rate` requests per second; `rate <= 0` admits everything immediately.
    pub fn new(rate: f64) -> Self {
        let capacity = rate.max(1.0);
        RateLimiter {
            rate,
            capacity,
            state: Mutex::new(Bucket {
                tokens: capacity,
                last: Instant::now(),
            }),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(0.0)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Reserves one token and returns how long the caller must wait for it.
    pub fn reserve(&self) -> Duration {
        if self.rate <= 0.0 || !self.rate.is_finite() {
            return Duration::ZERO;
        }
        let mut b = self.state.lock().unwrap();
        let now = Instant::now();
        let elapsed = now.duration_since(b.last).as_secs_f64();
        b.tokens = (b.tokens + elapsed * self.rate).min(self.capacity);
        b.last = now;
        b.tokens -= 1.0;
        if b.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-b.tokens / self.rate)
        }
    }

    pub fn acquire(&self) {
        let wait = self.reserve();
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// One shared limiter per endpoint.
#[derive(Debug, Default)]
pub struct LimiterRegistry {
    limiters: Mutex<HashMap<String, Arc<RateLimiter>>>,
}

impl LimiterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first caller for an endpoint fixes its rate.
    pub fn for_endpoint(&self, endpoint: &str, rate: f64) -> Arc<RateLimiter> {
        self.limiters
            .lock()
            .unwrap()
            .entry(endpoint.to_owned())
            .or_insert_with(|| Arc::new(RateLimiter::new(rate)))
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burst_then_paced() {
        let l = RateLimiter::new(10.0);
        for _ in 0..10 {
            assert_eq!(l.reserve(), Duration::ZERO);
        }
        let w = l.reserve();
        assert!(w > Duration::from_millis(50) && w <= Duration::from_millis(101), "{w:?}");
        let w2 = l.reserve();
        assert!(w2 > w);
    }

    #[test]
    fn unlimited_never_waits() {
        let l = RateLimiter::unlimited();
        for _ in 0..1000 {
            assert_eq!(l.reserve(), Duration::ZERO);
        }
    }

    #[test]
    fn registry_shares_per_endpoint() {
        let r = LimiterRegistry::new();
        let a = r.for_endpoint("https://a", 5.0);
        let b = r.for_endpoint("https://a", 1.0);
        let c = r.for_endpoint("https://c", 1.0);
        assert!(Arc::ptr_eq(&a, &b));
        assert!(!Arc::ptr_eq(&a, &c));
        assert_eq!(b.rate(), 5.0);
    }
}
