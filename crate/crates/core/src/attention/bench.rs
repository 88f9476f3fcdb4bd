//! Wall-clock sequence-length scaling of the attention forms.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use super::kernels::{
    gla_forward_chunked, gla_forward_recurrent, softmax_attention_causal, AttnInputs, ChunkPlan,
};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const MIN_TIMED: Duration = Duration::from_millis(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    GlaRecurrent,
    GlaChunked,
    SoftmaxCausal,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::GlaChunked,
        Method::GlaRecurrent,
        Method::SoftmaxCausal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::GlaRecurrent => "gla_recurrent",
            Method::GlaChunked => "gla_chunked",
            Method::SoftmaxCausal => "softmax_causal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown bench method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchDims {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub chunk: usize,
}

impl Default for BenchDims {
    fn default() -> Self {
        Self {
            heads: 2,
            d_k: 16,
            d_v: 16,
            chunk: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: &'static str,
    pub seq_len: usize,
    /// Median seconds per call.
    pub median_seconds: f64,
    pub reps: usize,
    /// Calls per timed repetition, raised above 1 when a call is under 1 ms.
    pub inner_iters: usize,
    pub checksum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Least-squares slope of log(time) against log(T), per method.
    pub slopes: Vec<(&'static str, f64)>,
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn bench_inputs(seq_len: usize, dims: BenchDims) -> AttnInputs<f32> {
    let mut rng = Rng::derive(0xBE7C, seq_len as u64);
    AttnInputs::random(
        &mut rng,
        seq_len,
        dims.heads,
        dims.d_k,
        dims.d_v,
        (0.9, 0.999),
    )
}

fn run(method: Method, x: &AttnInputs<f32>, chunk: usize) -> Result<Vec<f32>> {
    match method {
        Method::GlaRecurrent => gla_forward_recurrent(x),
        Method::GlaChunked => gla_forward_chunked(x, ChunkPlan::new(chunk.min(x.seq_len))),
        Method::SoftmaxCausal => {
            softmax_attention_causal(&x.q, &x.k, &x.v, x.seq_len, x.heads, x.d_k, x.d_v)
        }
    }
}

/// Time every method at every length, sequentially on the calling thread.
pub fn bench_scaling(
    methods: &[Method],
    lengths: &[usize],
    dims: BenchDims,
    reps: usize,
) -> Result<BenchReport> {
    if lengths.len() < 4 {
        return Err(Error::contract("benchmark needs at least 4 lengths"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract(
            "benchmark lengths must be strictly increasing",
        ));
    }
    if reps < 3 {
        return Err(Error::contract("benchmark needs at least 3 repetitions"));
    }
    let mut records = Vec::new();
    let mut slopes = Vec::new();
    for &method in methods {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &t in lengths {
            let x = bench_inputs(t, dims);
            let out = run(method, &x, dims.chunk)?;
            let checksum: f64 = out.iter().map(|&v| v as f64).sum();
            // Calibrate the number of calls per repetition.
            let mut inner = 1usize;
            loop {
                let start = Instant::now();
                for _ in 0..inner {
                    black_box(run(method, black_box(&x), dims.chunk)?);
                }
                if start.elapsed() >= MIN_TIMED || inner >= 1 << 20 {
                    break;
                }
                inner *= 2;
            }
            let mut times: Vec<f64> = (0..reps)
                .map(|_| {
                    let start = Instant::now();
                    for _ in 0..inner {
                        black_box(run(method, black_box(&x), dims.chunk)?);
                    }
                    Ok(start.elapsed().as_secs_f64() / inner as f64)
                })
                .collect::<Result<_>>()?;
            times.sort_by(f64::total_cmp);
            let median = times[reps / 2];
            xs.push((t as f64).ln());
            ys.push(median.ln());
            records.push(BenchRecord {
                method: method.name(),
                seq_len: t,
                median_seconds: median,
                reps,
                inner_iters: inner,
                checksum,
            });
        }
        slopes.push((method.name(), fit_slope(&xs, &ys)));
    }
    Ok(BenchReport { records, slopes })
}

impl BenchReport {
    pub fn slope(&self, method: Method) -> Option<f64> {
        self.slopes
            .iter()
            .find(|(m, _)| *m == method.name())
            .map(|&(_, s)| s)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,seq_len,median_seconds,reps,checksum\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.9e},{},{:.6e}",
                r.method, r.seq_len, r.median_seconds, r.reps, r.checksum
            );
        }
        for r in self.records.iter().filter(|r| r.inner_iters > 1) {
            let _ = writeln!(
                s,
                "# note {} seq_len={} timed over {} inner iterations",
                r.method, r.seq_len, r.inner_iters
            );
        }
        for (m, slope) in &self.slopes {
            let _ = writeln!(s, "# slope {m} {slope:.4}");
        }
        s
    }
}
