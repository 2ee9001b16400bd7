//! Request trace generation: closed-loop batches, Poisson open-loop arrivals
//! and length-only CSV traces.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::engine::Request;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ArrivalRate {
    /// Every request arrives at t = 0.
    Infinite,
    /// Requests per second of a Poisson process.
    PerSecond(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadSpec {
    pub n_requests: u64,
    pub input_len: u64,
    pub output_len: u64,
    pub arrival_rate: ArrivalRate,
    pub seed: u64,
}

impl WorkloadSpec {
    /// 500 closed-loop requests of 512 prompt and 256 generated tokens.
    pub fn closed_loop(n_requests: u64, input_len: u64, output_len: u64) -> Self {
        Self {
            n_requests,
            input_len,
            output_len,
            arrival_rate: ArrivalRate::Infinite,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.output_len == 0 {
            return Err(Error::Config("workload lengths must be at least 1".into()));
        }
        if let ArrivalRate::PerSecond(rate) = self.arrival_rate {
            if !(rate.is_finite() && rate > 0.0) {
                return Err(Error::Config(format!("arrival rate must be positive, got {rate}")));
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> u64 {
        self.input_len + self.output_len
    }
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self::closed_loop(500, 512, 256)
    }
}

/// Generates a fixed-shape trace. Finite rates draw i.i.d. exponential gaps
/// from a ChaCha8 stream seeded with `spec.seed`.
pub fn synthetic(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let arrivals: Vec<f64> = match spec.arrival_rate {
        ArrivalRate::Infinite => vec![0.0; spec.n_requests as usize],
        ArrivalRate::PerSecond(rate) => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let gaps = Exp::new(rate).map_err(|e| Error::Config(e.to_string()))?;
            let mut t = 0.0;
            (0..spec.n_requests)
                .map(|_| {
                    t += gaps.sample(&mut rng);
                    t
                })
                .collect()
        }
    };
    Ok(arrivals
        .into_iter()
        .enumerate()
        .map(|(id, arrival)| Request::new(id as u64, arrival, spec.input_len, spec.output_len))
        .collect())
}

const TRACE_HEADER: [&str; 3] = ["arrival_seconds", "input_len", "output_len"];

/// Reads a `arrival_seconds,input_len,output_len` CSV (header optional).
/// Ids follow file order; the result is sorted by arrival, then id.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                path: path.to_path_buf(),
                row: 0,
                message: format!("{other:?}"),
            },
        })?;

    let mut requests = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: idx + 1,
            message: e.to_string(),
        })?;
        let row = record.position().map_or(idx + 1, |p| p.line() as usize);
        if idx == 0 && record.iter().eq(TRACE_HEADER.iter().copied()) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", record.len())));
        }
        let arrival: f64 = record[0]
            .parse()
            .map_err(|_| parse_err(format!("arrival {:?} is not a number", &record[0])))?;
        let input_len: u64 = record[1]
            .parse()
            .map_err(|_| parse_err(format!("input_len {:?} is not an integer", &record[1])))?;
        let output_len: u64 = record[2]
            .parse()
            .map_err(|_| parse_err(format!("output_len {:?} is not an integer", &record[2])))?;

        let invalid = |field, message: &str| Error::Validation {
            path: path.to_path_buf(),
            row,
            field,
            message: message.to_string(),
        };
        if !(arrival.is_finite() && arrival >= 0.0) {
            return Err(invalid("arrival_seconds", "must be finite and non-negative"));
        }
        if input_len == 0 {
            return Err(invalid("input_len", "must be at least 1"));
        }
        if output_len == 0 {
            return Err(invalid("output_len", "must be at least 1"));
        }
        requests.push(Request::new(requests.len() as u64, arrival, input_len, output_len));
    }
    sort_by_arrival(&mut requests);
    Ok(requests)
}

/// Writes a trace in the format `load_trace` reads.
pub fn write_trace(path: impl AsRef<Path>, requests: &[Request]) -> Result<()> {
    let mut out = String::from("arrival_seconds,input_len,output_len\n");
    for r in requests {
        out.push_str(&format!("{},{},{}\n", r.arrival, r.input_len, r.output_len));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// FCFS order: arrival time, then id.
pub fn sort_by_arrival(requests: &mut [Request]) {
    requests.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
}
