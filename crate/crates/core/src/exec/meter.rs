//! Deterministic resource metering.
//!
//! Memory is the byte size of live backend allocations. Time is a virtual
//! cost: every backend counts the scalar operations its own kernels perform,
//! and one million operations is reported as one millisecond.

pub const OPS_PER_MS: f64 = 1e6;

#[derive(Debug, Clone, Default)]
pub struct Meter {
    live: u64,
    peak: u64,
    ops: u64,
}

impl Meter {
    pub fn alloc(&mut self, bytes: u64) {
        self.live += bytes;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, bytes: u64) {
        self.live = self.live.saturating_sub(bytes);
    }

    pub fn live(&self) -> u64 {
        self.live
    }

    /// Peak since the last call, then restart the window at the live size.
    pub fn take_peak(&mut self) -> u64 {
        let p = self.peak.max(self.live);
        self.peak = self.live;
        p
    }

    pub fn count(&mut self, ops: u64) {
        self.ops += ops;
    }

    /// Operations since the last call, in virtual milliseconds.
    pub fn take_ms(&mut self) -> f64 {
        let ms = self.ops as f64 / OPS_PER_MS;
        self.ops = 0;
        ms
    }
}
