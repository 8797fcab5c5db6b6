//! Per-step cost of each sequence backbone as a function of sequence length.
//!
//! A step is one token-model training step (forward, backward, optimizer) on
//! a batch of flattened grid-world trajectories. Peak memory comes from
//! [`TrackingAlloc`], which the host binary must register as its global
//! allocator; without it peaks read as zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, SeqMode};
use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;
use crate::nn::{AdamW, ParamStore};
use crate::world_model::token::{TokenBatch, TokenModel};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator that keeps a live-byte count and its high-water mark.
pub struct TrackingAlloc;

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            grow(new_size);
        }
        p
    }
}

fn grow(n: usize) {
    let now = CURRENT.fetch_add(n, Ordering::Relaxed) + n;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

impl TrackingAlloc {
    /// Live heap bytes.
    pub fn current() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }

    pub fn peak() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    /// Restarts the high-water mark from the live count.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    /// True once the allocator has seen any traffic, i.e. it is registered.
    pub fn active() -> bool {
        PEAK.load(Ordering::Relaxed) > 0
    }
}

/// One `(mode, length)` measurement. `failure` is set when the step could
/// not run, e.g. a quadratic materialization above the cap.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchPoint {
    pub mode: SeqMode,
    pub len: usize,
    pub median_ms: f64,
    /// Largest heap growth over the live baseline during one step.
    pub peak_bytes: usize,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeFit {
    pub mode: SeqMode,
    pub params: usize,
    /// Log-log slopes over the successful points; `None` with fewer than two.
    pub time_exponent: Option<f64>,
    pub memory_exponent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    pub fits: Vec<ModeFit>,
    pub seconds: f64,
}

impl BenchReport {
    pub fn fit(&self, mode: SeqMode) -> Option<&ModeFit> {
        self.fits.iter().find(|f| f.mode == mode)
    }

    pub fn point(&self, mode: SeqMode, len: usize) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.mode == mode && p.len == len)
    }

    /// Time ratio between consecutive lengths for `mode`.
    pub fn doubling_ratios(&self, mode: SeqMode) -> Vec<f64> {
        let pts: Vec<&BenchPoint> = self.points.iter().filter(|p| p.mode == mode && p.failure.is_none()).collect();
        pts.windows(2).map(|w| w[1].median_ms / w[0].median_ms).collect()
    }

    /// Plain-text table of every point and fit.
    pub fn summary(&self) -> String {
        let mut s = String::from("mode        len    ms/step      peak bytes\n");
        for p in &self.points {
            match &p.failure {
                None => s += &format!("{:<10} {:>5} {:>10.3} {:>15}\n", p.mode.name(), p.len, p.median_ms, p.peak_bytes),
                Some(f) => s += &format!("{:<10} {:>5} {f}\n", p.mode.name(), p.len),
            }
        }
        let show = |e: Option<f64>| e.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        for f in &self.fits {
            s += &format!(
                "{} ({} params): time exponent {}, memory exponent {}\n",
                f.mode.name(),
                f.params,
                show(f.time_exponent),
                show(f.memory_exponent)
            );
        }
        s
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
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

/// Times `cfg.bench_iters` steps (after `cfg.bench_warmup`) at each length.
/// Rounds visit every length once, so slow phases of the host spread over
/// all lengths instead of landing on one.
fn measure_all(cfg: &RunConfig, model: &TokenModel, store: &mut ParamStore<f32>, lengths: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<BenchPoint>> {
    let batches = lengths.iter().map(|&len| TokenBatch::random_grid(cfg.bench_batch, len, cfg.grid_size, rng)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.token_lr, cfg.weight_decay);
    let mut times = vec![Vec::with_capacity(cfg.bench_iters); lengths.len()];
    let mut peaks = vec![0usize; lengths.len()];
    let mut failures: Vec<Option<String>> = vec![None; lengths.len()];
    for round in 0..cfg.bench_warmup + cfg.bench_iters {
        for (k, batch) in batches.iter().enumerate() {
            if failures[k].is_some() {
                continue;
            }
            let base = TrackingAlloc::current();
            TrackingAlloc::reset_peak();
            let t0 = Instant::now();
            match model.train_step(store, &mut opt, batch, rng) {
                Ok(_) => {}
                Err(e @ Error::MaterializationCap { .. }) => {
                    failures[k] = Some(format!("OOM ({e})"));
                    continue;
                }
                Err(e) => return Err(e),
            }
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            if round >= cfg.bench_warmup {
                times[k].push(ms);
                peaks[k] = peaks[k].max(TrackingAlloc::peak().saturating_sub(base));
            }
        }
    }
    let mode = cfg.mode;
    Ok(lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| match failures[k].take() {
            None => BenchPoint { mode, len, median_ms: median(&mut times[k]), peak_bytes: peaks[k], failure: None },
            Some(f) => BenchPoint { mode, len, median_ms: f64::NAN, peak_bytes: 0, failure: Some(f) },
        })
        .collect())
}

/// Times every mode in `modes` at every `cfg.bench_lengths` entry and fits
/// scaling exponents. Writes `bench_<mode>.csv` under `out` when given.
pub fn bench_scaling(cfg: &RunConfig, modes: &[SeqMode], out: Option<&Path>) -> Result<BenchReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut lengths = cfg.bench_lengths.clone();
    lengths.sort_unstable();
    let (mut points, mut fits) = (vec![], vec![]);
    for &mode in modes {
        let mcfg = RunConfig { mode, ..cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(20);
        let mut store = ParamStore::<f32>::new();
        let model = TokenModel::new(&mut store, "bench", mcfg.token_model(), &mut rng)?;
        let measured = measure_all(&mcfg, &model, &mut store, &lengths, &mut rng)?;
        if let Some(dir) = out {
            let mut w = MetricsWriter::create(&dir.join(format!("bench_{}.csv", mode.name())), &mcfg, &["ms_per_step", "peak_bytes", "oom"])?;
            for p in &measured {
                match p.failure {
                    None => w.record(p.len as u64, &[("ms_per_step", p.median_ms), ("peak_bytes", p.peak_bytes as f64), ("oom", 0.0)])?,
                    Some(_) => w.record(p.len as u64, &[("oom", 1.0)])?,
                }
            }
        }
        let ok: Vec<&BenchPoint> = measured.iter().filter(|p| p.failure.is_none()).collect();
        let xs: Vec<f64> = ok.iter().map(|p| p.len as f64).collect();
        let fit = |ys: Vec<f64>| (ys.len() >= 2 && ys.iter().all(|&y| y > 0.0)).then(|| loglog_slope(&xs, &ys));
        fits.push(ModeFit {
            mode,
            params: store.num_scalars(),
            time_exponent: fit(ok.iter().map(|p| p.median_ms).collect()),
            memory_exponent: fit(ok.iter().map(|p| p.peak_bytes as f64).collect()),
        });
        points.extend(measured);
    }
    Ok(BenchReport { points, fits, seconds: start.elapsed().as_secs_f64() })
}
