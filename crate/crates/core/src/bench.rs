//! Per-layer timing of the feed-forward block against the recurrent block.
//!
//! Every case is timed in the same round-robin pass so slow drifts in machine
//! load hit all rows alike. The starting case rotates each round.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{scan_backward, scan_forward_into, Ffn, GateActivation, ParamStore, SwishRnn};
use crate::numerics::{Tape, Tensor};

pub const MIN_WARMUP: usize = 5;
pub const MIN_REPS: usize = 30;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub d: usize,
    pub d_prime: usize,
    pub d_ffn: usize,
    pub steps: Vec<usize>,
    pub schedule: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub backward: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_len: 512,
            d: 768,
            d_prime: 2048,
            d_ffn: 3072,
            steps: vec![1, 2, 4],
            schedule: vec![1, 2, 4],
            warmup: MIN_WARMUP,
            reps: MIN_REPS,
            backward: false,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.d == 0 || self.d_prime == 0 || self.d_ffn == 0 {
            return Err(Error::Config("bench dimensions must be positive".into()));
        }
        if self.steps.iter().chain(&self.schedule).any(|&k| k == 0) {
            return Err(Error::Config("step sizes must be >= 1".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("step schedule is empty".into()));
        }
        if self.warmup < MIN_WARMUP || self.reps < MIN_REPS {
            return Err(Error::Config(format!(
                "bench needs >= {MIN_WARMUP} warmup and >= {MIN_REPS} timed iterations, got {} and {}",
                self.warmup, self.reps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Ffn,
    Swishrnn,
    /// The recurrence alone, without projections or gate.
    Scan,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Ffn => "ffn",
            BlockKind::Swishrnn => "swishrnn",
            BlockKind::Scan => "scan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    ForwardBackward,
}

impl Pass {
    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Forward => "fwd",
            Pass::ForwardBackward => "fwd+bwd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepLabel {
    None,
    Fixed(usize),
    Schedule(Vec<usize>),
}

impl std::fmt::Display for StepLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepLabel::None => f.write_str("-"),
            StepLabel::Fixed(k) => write!(f, "{k}"),
            StepLabel::Schedule(s) => {
                let parts: Vec<String> = s.iter().map(|k| k.to_string()).collect();
                write!(f, "[{}]", parts.join(" "))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub block: BlockKind,
    pub step: StepLabel,
    pub pass: Pass,
    pub seq_len: usize,
    pub d: usize,
    /// `d_ffn` for the feed-forward block, `d'` otherwise.
    pub inner: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub ratio_to_ffn: f64,
}

/// Summary statistics over timed samples, in milliseconds. `std` is the
/// sample standard deviation.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    (mean, var.sqrt(), median)
}

/// Times of the scan component used for the step-size ordering check.
#[derive(Clone, Debug)]
pub struct ScanOrdering {
    pub t1: f64,
    pub t2: f64,
    pub t4: f64,
    pub schedule: f64,
}

impl ScanOrdering {
    pub fn monotone(&self) -> bool {
        self.t4 <= self.t2 && self.t2 <= self.t1
    }

    pub fn schedule_between(&self) -> bool {
        self.t4 < self.schedule && self.schedule < self.t1
    }

    pub fn holds(&self) -> bool {
        self.monotone() && self.schedule_between()
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str = "block,step,pass,seq_len,d,inner,mean_ms,std_ms,median_ms,ratio_to_ffn";

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                r.block.as_str(),
                r.step,
                r.pass.as_str(),
                r.seq_len,
                r.d,
                r.inner,
                r.mean_ms,
                r.std_ms,
                r.median_ms,
                r.ratio_to_ffn
            );
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<9} {:<9} {:<8} {:>6} {:>6} {:>6} {:>10} {:>9} {:>10} {:>8}\n",
            "block", "step", "pass", "l", "d", "inner", "mean ms", "std", "median", "x ffn"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<9} {:<9} {:<8} {:>6} {:>6} {:>6} {:>10.3} {:>9.3} {:>10.3} {:>8.3}",
                r.block.as_str(),
                r.step.to_string(),
                r.pass.as_str(),
                r.seq_len,
                r.d,
                r.inner,
                r.mean_ms,
                r.std_ms,
                r.median_ms,
                r.ratio_to_ffn
            );
        }
        out
    }

    pub fn find(&self, block: BlockKind, step: &StepLabel, pass: Pass) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.block == block && &r.step == step && r.pass == pass)
    }

    /// Median forward scan times for k = 1, 2, 4 and the schedule. `None`
    /// when any of those rows was not measured.
    pub fn scan_ordering(&self) -> Option<ScanOrdering> {
        let get = |step: StepLabel| self.find(BlockKind::Scan, &step, Pass::Forward).map(|r| r.median_ms);
        Some(ScanOrdering {
            t1: get(StepLabel::Fixed(1))?,
            t2: get(StepLabel::Fixed(2))?,
            t4: get(StepLabel::Fixed(4))?,
            schedule: get(StepLabel::Schedule(self.config.schedule.clone()))?,
        })
    }
}

struct Case {
    block: BlockKind,
    step: StepLabel,
    pass: Pass,
    inner: usize,
    samples: Vec<f64>,
}

struct Fixture {
    store: ParamStore<f32>,
    ffn: Ffn,
    rnn: SwishRnn,
    x: Tensor<f32>,
    x1: Vec<f32>,
    alpha: Vec<f32>,
    beta: Vec<f32>,
    /// Scan state and gate buffers, reused so timings exclude allocation.
    scratch: RefCell<(Vec<f32>, Vec<f32>)>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

impl Fixture {
    fn new(cfg: &BenchConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, "ffn", cfg.d, cfg.d_ffn, &mut rng)?;
        let rnn = SwishRnn::new(
            &mut store,
            "swishrnn",
            cfg.d,
            cfg.d_prime,
            GateActivation::Gelu,
            &mut rng,
        )?;
        let x = Tensor::new(&[cfg.seq_len, cfg.d], uniform(&mut rng, cfg.seq_len * cfg.d))?;
        let x1 = uniform(&mut rng, cfg.seq_len * cfg.d_prime);
        Ok(Self {
            store,
            ffn,
            rnn,
            x,
            x1,
            alpha: vec![1.0; cfg.d_prime],
            beta: vec![0.0; cfg.d_prime],
            scratch: RefCell::new((
                vec![0.0; cfg.seq_len * cfg.d_prime],
                vec![0.0; cfg.seq_len * cfg.d_prime],
            )),
        })
    }

    fn run_ffn(&self, backward: bool) -> Result<()> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.x.clone());
        let y = self.ffn.forward(&mut tape, &self.store, x)?;
        if backward {
            let loss = tape.sum(y);
            std::hint::black_box(tape.backward(loss)?);
        }
        std::hint::black_box(tape.value(y));
        Ok(())
    }

    fn run_rnn(&self, seq_len: usize, step: usize, backward: bool) -> Result<()> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.x.clone());
        let y = self.rnn.forward(&mut tape, &self.store, x, seq_len, step)?;
        if backward {
            let loss = tape.sum(y);
            std::hint::black_box(tape.backward(loss)?);
        }
        std::hint::black_box(tape.value(y));
        Ok(())
    }

    fn run_scan(&self, seq_len: usize, step: usize, backward: bool) -> Result<()> {
        let width = self.alpha.len();
        let mut scratch = self.scratch.borrow_mut();
        let (c, sig) = &mut *scratch;
        scan_forward_into(&self.x1, c, sig, width, seq_len, &self.alpha, &self.beta, step)?;
        if backward {
            let g = scan_backward(&self.x1, c, sig, c, width, seq_len, &self.alpha, &self.beta, step)?;
            std::hint::black_box(g);
        }
        std::hint::black_box((c, sig));
        Ok(())
    }
}

/// Runs the benchmark. Schedule rows report the mean time per layer over one
/// pass through the schedule.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let fx = Fixture::new(cfg)?;
    let mut passes = vec![Pass::Forward];
    if cfg.backward {
        passes.push(Pass::ForwardBackward);
    }
    let mut cases = Vec::new();
    for &pass in &passes {
        let steps = cfg
            .steps
            .iter()
            .map(|&k| StepLabel::Fixed(k))
            .chain(std::iter::once(StepLabel::Schedule(cfg.schedule.clone())));
        cases.push(Case {
            block: BlockKind::Ffn,
            step: StepLabel::None,
            pass,
            inner: cfg.d_ffn,
            samples: Vec::new(),
        });
        for step in steps {
            for block in [BlockKind::Swishrnn, BlockKind::Scan] {
                cases.push(Case {
                    block,
                    step: step.clone(),
                    pass,
                    inner: cfg.d_prime,
                    samples: Vec::new(),
                });
            }
        }
    }

    let run_one = |case: &Case| -> Result<f64> {
        let backward = case.pass == Pass::ForwardBackward;
        let ks: Vec<usize> = match &case.step {
            StepLabel::None => vec![0],
            StepLabel::Fixed(k) => vec![*k],
            StepLabel::Schedule(s) => s.clone(),
        };
        let start = Instant::now();
        for &k in &ks {
            match case.block {
                BlockKind::Ffn => fx.run_ffn(backward)?,
                BlockKind::Swishrnn => fx.run_rnn(cfg.seq_len, k, backward)?,
                BlockKind::Scan => fx.run_scan(cfg.seq_len, k, backward)?,
            }
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / ks.len() as f64)
    };

    let n = cases.len();
    for round in 0..cfg.warmup + cfg.reps {
        for offset in 0..n {
            let idx = (round + offset) % n;
            let ms = run_one(&cases[idx])?;
            if round >= cfg.warmup {
                cases[idx].samples.push(ms);
            }
        }
        log::debug!("bench round {}/{}", round + 1, cfg.warmup + cfg.reps);
    }

    let mut rows = Vec::with_capacity(n);
    for &pass in &passes {
        let ffn_mean = cases
            .iter()
            .find(|c| c.block == BlockKind::Ffn && c.pass == pass)
            .map(|c| summarize(&c.samples).0)
            .unwrap_or(f64::NAN);
        for c in cases.iter().filter(|c| c.pass == pass) {
            let (mean_ms, std_ms, median_ms) = summarize(&c.samples);
            rows.push(BenchRow {
                block: c.block,
                step: c.step.clone(),
                pass,
                seq_len: cfg.seq_len,
                d: cfg.d,
                inner: c.inner,
                mean_ms,
                std_ms,
                median_ms,
                ratio_to_ffn: mean_ms / ffn_mean,
            });
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}
