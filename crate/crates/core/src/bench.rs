//! Operator-apply throughput and thread-scaling harness.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Domain, Grid};
use crate::error::{Result, TbsError};
use crate::operator::{
    block_tensor_bytes, build_operator, BoundaryWeights, Discretization, OperatorConfig, Strategy,
    DEFAULT_BLOCK_BYTES, DEFAULT_MEMORY_BUDGET,
};
use crate::real::{Precision, Real};
use crate::tensor::CoeffTensor;

/// Version tag written in the first CSV column.
pub const CSV_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "version,grid,degree,strategy,precision,threads,repetitions,median_s,gflops,bytes_read,bytes_written,memory_bytes,speedup,checksum";
/// Minimum timed repetitions per point.
pub const MIN_REPETITIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, serde::Deserialize, serde::Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchPlan {
    /// Node counts per axis.
    pub grids: Vec<Vec<usize>>,
    pub degrees: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub threads: Vec<usize>,
    pub precisions: Vec<Precision>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub memory_budget: u64,
    pub block_bytes: usize,
}

impl Default for BenchPlan {
    fn default() -> Self {
        Self {
            grids: vec![vec![32, 32, 32]],
            degrees: vec![1, 2, 3],
            strategies: vec![Strategy::Onthefly],
            threads: vec![1],
            precisions: vec![Precision::F64],
            repetitions: MIN_REPETITIONS,
            warmup: 1,
            seed: 42,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            block_bytes: DEFAULT_BLOCK_BYTES,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < MIN_REPETITIONS {
            return Err(TbsError::Configuration(format!(
                "repetitions must be >= {MIN_REPETITIONS}, got {}",
                self.repetitions
            )));
        }
        let empty = [
            ("grids", self.grids.is_empty()),
            ("degrees", self.degrees.is_empty()),
            ("strategies", self.strategies.is_empty()),
            ("threads", self.threads.is_empty()),
            ("precisions", self.precisions.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(TbsError::Configuration(format!("bench plan has no {name}")));
        }
        if self.threads.contains(&0) {
            return Err(TbsError::Configuration("thread counts must be >= 1".into()));
        }
        for g in &self.grids {
            if g.is_empty() || g.len() > 3 || g.iter().any(|&n| n < 2) {
                return Err(TbsError::Configuration(format!("invalid bench grid {g:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchResult {
    pub grid: Vec<usize>,
    pub degree: usize,
    pub strategy: Strategy,
    pub precision: Precision,
    pub threads: usize,
    pub repetitions: usize,
    pub median_seconds: f64,
    /// Model flops per second, from the operator's analytic count.
    pub gflops: f64,
    pub bytes_read: f64,
    pub bytes_written: f64,
    /// Operator-owned storage (stencils, matrices or kernel tables).
    pub memory_bytes: usize,
    /// Time at one thread over this time; NaN when one thread was not measured.
    pub speedup: f64,
    /// FNV-1a hash of the output bits.
    pub checksum: u64,
}

/// FNV-1a over the bit patterns of a tensor.
pub fn checksum<T: Real>(data: &[T]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for byte in v.as_f64().to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Random positive fields and a random coefficient tensor on a box.
pub fn random_inputs(grid: &Grid, nb: usize, np: usize, seed: u64) -> (CoeffTensor<f64>, CoeffTensor<f64>, CoeffTensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = |ext: Vec<usize>, lo: f64, hi: f64| {
        let n = ext.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        CoeffTensor::from_vec(ext, data).expect("extents match")
    };
    let d = field(grid.coeff_extents(np), 0.5, 1.5);
    let mu = field(grid.coeff_extents(np), 0.0, 0.2);
    let c = field(grid.coeff_extents(nb), -1.0, 1.0);
    (d, mu, c)
}

/// Unit-spaced box grid with the given node counts.
pub fn bench_grid(nodes: &[usize]) -> Result<Grid> {
    Grid::new(nodes.to_vec(), vec![1.0 / (nodes[0].max(2) - 1) as f64; nodes.len()], vec![0.0; nodes.len()])
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn max_relative_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Cross-strategy agreement tolerance by precision.
fn strategy_tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-12,
        Precision::F32 => 1e-4,
    }
}

fn bench_point<T: Real>(plan: &BenchPlan, nodes: &[usize], nb: usize, out: &mut Vec<BenchResult>) -> Result<()> {
    let grid = bench_grid(nodes)?;
    let (d, mu, c) = random_inputs(&grid, nb, nb, plan.seed);
    let c = c.cast::<T>();
    let bw = BoundaryWeights::none(grid.dim());
    let mut first: Option<(Strategy, Vec<f64>)> = None;
    for &strategy in &plan.strategies {
        if strategy == Strategy::Block {
            let need = block_tensor_bytes(grid.nodes(), nb, T::BYTES);
            if need > plan.memory_budget {
                log::warn!("skipping block tensor at {nodes:?} n={nb}: needs {need} bytes");
                continue;
            }
        }
        let mut base_time = f64::NAN;
        let mut base_sum: Option<u64> = None;
        for &threads in &plan.threads {
            let disc = Discretization {
                domain: Domain::boxed(grid.clone()),
                nb,
                np: nb,
                diffusion: d.cast::<T>(),
                absorption: mu.cast::<T>(),
                boundary: bw.clone(),
            };
            let cfg = OperatorConfig {
                strategy,
                threads,
                block_bytes: plan.block_bytes,
                memory_budget: plan.memory_budget,
            };
            let op = build_operator(disc, &cfg)?;
            let mut y = op.apply(&c)?;
            for _ in 1..plan.warmup {
                y = op.apply(&c)?;
            }
            let mut times = Vec::with_capacity(plan.repetitions);
            for _ in 0..plan.repetitions {
                let t = Instant::now();
                y = op.apply(&c)?;
                times.push(t.elapsed().as_secs_f64());
            }
            let sum = checksum(y.data());
            match base_sum {
                None => base_sum = Some(sum),
                Some(s) if s != sum => {
                    return Err(TbsError::Determinism(format!(
                        "{} output at {threads} threads differs from {} threads ({nodes:?}, n={nb}, {})",
                        strategy.name(),
                        plan.threads[0],
                        T::NAME
                    )))
                }
                _ => {}
            }
            let yf: Vec<f64> = y.data().iter().map(|v| v.as_f64()).collect();
            match &first {
                None => first = Some((strategy, yf)),
                Some((s0, y0)) if *s0 != strategy => {
                    let diff = max_relative_diff(y0, &yf);
                    let tol = strategy_tolerance(if T::BYTES == 8 { Precision::F64 } else { Precision::F32 });
                    if diff > tol {
                        return Err(TbsError::Determinism(format!(
                            "{} and {} disagree by {diff:e} relative at {nodes:?}, n={nb}",
                            s0.name(),
                            strategy.name()
                        )));
                    }
                }
                _ => {}
            }
            let med = median(&mut times);
            if threads == 1 {
                base_time = med;
            }
            let model = op.flop_byte_report();
            out.push(BenchResult {
                grid: nodes.to_vec(),
                degree: nb,
                strategy,
                precision: if T::BYTES == 8 { Precision::F64 } else { Precision::F32 },
                threads,
                repetitions: plan.repetitions,
                median_seconds: med,
                gflops: model.flops / med * 1e-9,
                bytes_read: model.bytes_read,
                bytes_written: model.bytes_written,
                memory_bytes: op.memory_bytes(),
                speedup: base_time / med,
                checksum: sum,
            });
        }
    }
    Ok(())
}

/// Runs every plan point; fails on any thread-count or cross-strategy mismatch.
pub fn run_bench(plan: &BenchPlan) -> Result<Vec<BenchResult>> {
    plan.validate()?;
    let mut out = Vec::new();
    for nodes in &plan.grids {
        for &nb in &plan.degrees {
            for &p in &plan.precisions {
                match p {
                    Precision::F64 => bench_point::<f64>(plan, nodes, nb, &mut out)?,
                    Precision::F32 => bench_point::<f32>(plan, nodes, nb, &mut out)?,
                }
            }
        }
    }
    Ok(out)
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        let grid: Vec<String> = r.grid.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(
            s,
            "{CSV_VERSION},{},{},{},{},{},{},{:.6e},{:.3},{:.0},{:.0},{},{:.3},{:016x}",
            grid.join("x"),
            r.degree,
            r.strategy.name(),
            precision_name(r.precision),
            r.threads,
            r.repetitions,
            r.median_seconds,
            r.gflops,
            r.bytes_read,
            r.bytes_written,
            r.memory_bytes,
            r.speedup,
            r.checksum
        );
    }
    s
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F64 => "f64",
        Precision::F32 => "f32",
    }
}

/// Resident set size of this process in bytes (Linux only).
pub fn resident_bytes() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = s.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

/// Peak resident set size in bytes (Linux only).
pub fn peak_resident_bytes() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Resets the peak resident counter; false where unsupported.
pub fn reset_peak_resident() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

/// Resident growth of one on-the-fly application relative to its field bytes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MemoryProbe {
    pub degree: usize,
    /// Bytes of `c`, `d`, `μ_a` and the output.
    pub field_bytes: u64,
    /// Peak resident growth from before the fields were allocated through one apply.
    pub growth_bytes: u64,
}

impl MemoryProbe {
    pub fn ratio(&self) -> f64 {
        self.growth_bytes as f64 / self.field_bytes as f64
    }
}

/// Measures the resident growth of building and applying the on-the-fly operator.
pub fn probe_onthefly_memory<T: Real>(nodes: &[usize], nb: usize, seed: u64, threads: usize) -> Result<MemoryProbe> {
    let grid = bench_grid(nodes)?;
    if !reset_peak_resident() {
        return Err(TbsError::Configuration("peak resident size is not observable on this platform".into()));
    }
    let before = resident_bytes().ok_or_else(|| TbsError::Configuration("resident size unavailable".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = |ext: Vec<usize>, lo: f64, hi: f64| {
        let n: usize = ext.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        CoeffTensor::from_vec(ext, data).expect("extents match")
    };
    let d = field(grid.coeff_extents(nb), 0.5, 1.5);
    let mu = field(grid.coeff_extents(nb), 0.0, 0.2);
    let c = field(grid.coeff_extents(nb), -1.0, 1.0);
    let field_bytes = (d.bytes() + mu.bytes() + 2 * c.bytes()) as u64;
    let disc = Discretization {
        domain: Domain::boxed(grid.clone()),
        nb,
        np: nb,
        diffusion: d,
        absorption: mu,
        boundary: BoundaryWeights::none(grid.dim()),
    };
    let cfg = OperatorConfig {
        strategy: Strategy::Onthefly,
        threads,
        ..Default::default()
    };
    let op = build_operator(disc, &cfg)?;
    let y = op.apply(&c)?;
    let peak = peak_resident_bytes().unwrap_or(0).max(resident_bytes().unwrap_or(0));
    std::hint::black_box(y.data()[0]);
    Ok(MemoryProbe {
        degree: nb,
        field_bytes,
        growth_bytes: peak.saturating_sub(before),
    })
}
