use serde::{Deserialize, Serialize};

use crate::roofline::BatchEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestState {
    Waiting,
    Prefilling,
    Decoding,
    Finished,
}

/// One serving request and its progress.
///
/// A preempted request keeps its emitted tokens but loses its KV cache; on
/// resume it re-prefills the prompt plus every token generated so far
/// (`replay`) before decoding again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_ms: f64,
    pub prompt_len: u64,
    pub output_len: u64,
    /// Prompt tokens whose KV is cached.
    pub prefilled: u64,
    pub generated: u64,
    pub state: RequestState,
    /// Token emission timestamps, ms.
    pub emissions: Vec<f64>,
    /// Generated tokens that must be recomputed after a preemption.
    pub replay: u64,
    /// Tokens prefilled towards `prompt_len + replay`.
    pub progress: u64,
    /// Most prompt tokens ever prefilled; anything below it is recomputation.
    pub prompt_high_water: u64,
    pub preemptions: u32,
}

impl Request {
    pub fn new(id: u64, arrival_ms: f64, prompt_len: u64, output_len: u64) -> Self {
        Request {
            id,
            arrival_ms,
            prompt_len,
            output_len,
            prefilled: 0,
            generated: 0,
            state: RequestState::Waiting,
            emissions: Vec::new(),
            replay: 0,
            progress: 0,
            prompt_high_water: 0,
            preemptions: 0,
        }
    }

    pub fn prefill_target(&self) -> u64 {
        self.prompt_len + self.replay
    }

    pub fn prefill_remaining(&self) -> u64 {
        self.prefill_target() - self.progress
    }

    pub fn remaining_output(&self) -> u64 {
        self.output_len - self.generated
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    /// Context length seen by the next forward pass.
    pub fn cached(&self) -> u64 {
        match self.state {
            RequestState::Decoding | RequestState::Finished => self.prefilled + self.generated,
            RequestState::Waiting | RequestState::Prefilling => self.progress,
        }
    }

    /// The prefill slice of `q` tokens starting at the current progress.
    pub fn prefill_entry(&self, q: u64) -> BatchEntry {
        BatchEntry::prefill(self.id, q, self.progress, q == self.prefill_remaining())
    }

    pub fn decode_entry(&self) -> BatchEntry {
        BatchEntry::decode(self.id, self.cached())
    }

    /// Applies a prefill slice. Returns true when the prompt is complete,
    /// in which case the caller must record the resulting token with [`emit`].
    ///
    /// [`emit`]: Request::emit
    pub fn advance_prefill(&mut self, q: u64) -> bool {
        debug_assert!(q <= self.prefill_remaining());
        self.progress += q;
        self.prefilled = self.progress.min(self.prompt_len);
        self.prompt_high_water = self.prompt_high_water.max(self.prefilled);
        self.state = RequestState::Prefilling;
        if self.progress == self.prefill_target() {
            self.replay = 0;
            self.progress = self.prompt_len;
            self.state = RequestState::Decoding;
            true
        } else {
            false
        }
    }

    /// Records one output token at `t_ms`.
    pub fn emit(&mut self, t_ms: f64) {
        debug_assert!(self.generated < self.output_len);
        debug_assert!(self.emissions.last().is_none_or(|&last| t_ms > last));
        self.generated += 1;
        self.emissions.push(t_ms);
        if self.generated == self.output_len {
            self.state = RequestState::Finished;
        }
    }

    /// Drops all cached state; emitted tokens are kept and replayed later.
    pub fn preempt(&mut self) {
        self.replay = self.generated;
        self.progress = 0;
        self.prefilled = 0;
        self.state = RequestState::Waiting;
        self.preemptions += 1;
    }

    pub fn ttft_ms(&self) -> Option<f64> {
        self.emissions.first().map(|&t| t - self.arrival_ms)
    }

    pub fn tbt_samples(&self) -> impl Iterator<Item = f64> + '_ {
        self.emissions.windows(2).map(|w| w[1] - w[0])
    }
}
