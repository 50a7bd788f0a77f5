//! Live-buffer accounting for the memory-parity contract.
//!
//! During an ensemble-compression synchronization a worker may hold at most
//! two model-sized buffers (its parameters and the velocity/gradient
//! accumulator) plus one running output sum. The counters here are
//! thread-local, so each worker's sync — which runs entirely on one thread —
//! gets its own tally regardless of the execution mode.

use std::cell::Cell;

thread_local! {
    static MODEL_CUR: Cell<usize> = const { Cell::new(0) };
    static MODEL_PEAK: Cell<usize> = const { Cell::new(0) };
    static OUTPUT_CUR: Cell<usize> = const { Cell::new(0) };
    static OUTPUT_PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Peak counts observed since the last [`reset`] on this thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferPeaks {
    /// Model-sized (parameter-vector-sized) buffers live at once.
    pub model_buffers: usize,
    /// Running output-sum objects (per-example probability accumulators)
    /// live at once.
    pub output_sums: usize,
}

/// Zero the counters on the current thread.
pub fn reset() {
    MODEL_CUR.with(|c| c.set(0));
    MODEL_PEAK.with(|c| c.set(0));
    OUTPUT_CUR.with(|c| c.set(0));
    OUTPUT_PEAK.with(|c| c.set(0));
}

/// Read the peaks recorded on the current thread since the last reset.
pub fn peaks() -> BufferPeaks {
    BufferPeaks {
        model_buffers: MODEL_PEAK.with(Cell::get),
        output_sums: OUTPUT_PEAK.with(Cell::get),
    }
}

/// Guard marking one live model-sized buffer.
#[must_use]
pub struct ModelBufferGuard(());

/// Guard marking one live running output sum.
#[must_use]
pub struct OutputSumGuard(());

pub fn track_model_buffer() -> ModelBufferGuard {
    MODEL_CUR.with(|c| {
        let cur = c.get() + 1;
        c.set(cur);
        MODEL_PEAK.with(|p| p.set(p.get().max(cur)));
    });
    ModelBufferGuard(())
}

pub fn track_output_sum() -> OutputSumGuard {
    OUTPUT_CUR.with(|c| {
        let cur = c.get() + 1;
        c.set(cur);
        OUTPUT_PEAK.with(|p| p.set(p.get().max(cur)));
    });
    OutputSumGuard(())
}

impl Drop for ModelBufferGuard {
    fn drop(&mut self) {
        MODEL_CUR.with(|c| c.set(c.get() - 1));
    }
}

impl Drop for OutputSumGuard {
    fn drop(&mut self) {
        OUTPUT_CUR.with(|c| c.set(c.get() - 1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_follow_nesting() {
        reset();
        {
            let _a = track_model_buffer();
            {
                let _b = track_model_buffer();
                let _s = track_output_sum();
            }
            let _c = track_model_buffer();
        }
        let p = peaks();
        assert_eq!(p.model_buffers, 2);
        assert_eq!(p.output_sums, 1);
        reset();
        assert_eq!(peaks(), BufferPeaks::default());
    }
}
