use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RequestState {
    Queued,
    Prefilling,
    Running,
    Preempted,
    Done,
}

/// One simulated request and its lifecycle timestamps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Request {
    pub id: u64,
    pub arrival: f64,
    pub input_len: u64,
    pub output_len: u64,
    pub generated: u64,
    pub state: RequestState,
    /// First admission into a batch.
    pub t_first_sched: Option<f64>,
    /// Completion of the last decode step.
    pub t_done: Option<f64>,
    pub preemptions: u64,
}

impl Request {
    pub fn new(id: u64, arrival: f64, input_len: u64, output_len: u64) -> Self {
        Self {
            id,
            arrival,
            input_len,
            output_len,
            generated: 0,
            state: RequestState::Queued,
            t_first_sched: None,
            t_done: None,
            preemptions: 0,
        }
    }

    /// Tokens whose KV is resident while the request runs.
    pub fn context_len(&self) -> u64 {
        self.input_len + self.generated
    }

    pub fn is_done(&self) -> bool {
        self.state == RequestState::Done
    }

    /// End-to-end latency, once done.
    pub fn latency(&self) -> Option<f64> {
        self.t_done.map(|t| t - self.arrival)
    }
}
