use std::sync::{Condvar, Mutex};

/// Counting semaphore capping simultaneous in-flight requests to one endpoint.
#[derive(Debug)]
pub struct InFlightLimiter {
    capacity: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks until a slot is free; the slot is released when the permit drops.
    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.capacity {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit { limiter: self }
    }

    fn release(&self) {
        let mut n = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.freed.notify_one();
    }
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        self.limiter.release();
    }
}
