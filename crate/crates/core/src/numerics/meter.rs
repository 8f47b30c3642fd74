//! Allocation counter for attention score matrices.
//!
//! Every score buffer the attention kernel materializes registers its element
//! count here while it is alive. The counter is per thread, so concurrent tests
//! do not interfere with each other.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Score-matrix elements currently allocated on this thread.
pub fn live_elements() -> usize {
    LIVE.with(Cell::get)
}

/// Largest live element count since the last [`reset_peak`].
pub fn peak_elements() -> usize {
    PEAK.with(Cell::get)
}

/// Restarts peak tracking from the current live count.
pub fn reset_peak() {
    let live = live_elements();
    PEAK.with(|p| p.set(live));
}

/// Row-major score storage `[chunks × heads × k × k]` tracked by the meter.
#[derive(Debug)]
pub struct ScoreBuffer {
    data: Vec<f64>,
}

impl ScoreBuffer {
    pub fn zeros(len: usize) -> Self {
        LIVE.with(|l| {
            let now = l.get() + len;
            l.set(now);
            PEAK.with(|p| p.set(p.get().max(now)));
        });
        ScoreBuffer {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Drop for ScoreBuffer {
    fn drop(&mut self) {
        let len = self.data.len();
        LIVE.with(|l| l.set(l.get() - len));
    }
}
