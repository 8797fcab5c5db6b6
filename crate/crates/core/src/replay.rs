//! Transition storage with frequency-based window sampling.
//!
//! Two exact counters are kept per transition: `v` counts how often it was
//! part of a world-model training window, `b` how often it seeded an
//! imagination context. A window is scored by the counters of its first
//! transition; every transition covered by a sampled window is incremented.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 100_000;
const LOG_MAGIC: &[u8; 8] = b"SSDWMRB1";
const COUNTER_MAGIC: &[u8; 8] = b"SSDWMRC1";

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Observation at which `action` was taken, raw bytes.
    pub obs: Vec<u8>,
    pub action: usize,
    pub reward: f32,
    /// The action ended the episode (terminal, not truncation).
    pub done: bool,
    /// `obs` is the first observation of an episode.
    pub is_first: bool,
}

/// `batch × len` windows laid out row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub batch: usize,
    pub len: usize,
    pub obs_dim: usize,
    /// `[batch, len, obs_dim]`, scaled to `[0, 1]`.
    pub obs: Vec<f32>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    pub is_first: Vec<bool>,
    pub starts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Dfs,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    World,
    Imagination,
}

/// `f(v, b) = v − b − max(0, v − b)`: zero when `v >= b`, `v − b` otherwise.
pub fn imagination_score(v: u64, b: u64) -> i64 {
    let diff = v as i64 - b as i64;
    diff - diff.max(0)
}

/// Numerically stable softmax at 64-bit.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    obs_dim: usize,
    capacity: usize,
    data: Vec<Transition>,
    v: Vec<u64>,
    b: Vec<u64>,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, capacity: usize) -> Self {
        ReplayBuffer { obs_dim, capacity, data: Vec::new(), v: Vec::new(), b: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    pub fn world_counts(&self) -> &[u64] {
        &self.v
    }

    pub fn behaviour_counts(&self) -> &[u64] {
        &self.b
    }

    /// Replaces both counter vectors, e.g. to restore or to pin a sampling law.
    pub fn with_counts(mut self, v: Vec<u64>, b: Vec<u64>) -> Result<Self> {
        if v.len() != self.data.len() || b.len() != self.data.len() {
            return Err(Error::Replay(format!("{} and {} counters for {} transitions", v.len(), b.len(), self.data.len())));
        }
        self.v = v;
        self.b = b;
        Ok(self)
    }

    pub fn append(&mut self, t: Transition) -> Result<usize> {
        if self.data.len() >= self.capacity {
            return Err(Error::Replay(format!("capacity {} exceeded", self.capacity)));
        }
        if t.obs.len() != self.obs_dim {
            return Err(Error::Replay(format!("observation has {} bytes, expected {}", t.obs.len(), self.obs_dim)));
        }
        self.data.push(t);
        self.v.push(0);
        self.b.push(0);
        Ok(self.data.len() - 1)
    }

    fn valid_starts(&self, len: usize) -> Result<usize> {
        if len == 0 || self.data.len() < len {
            return Err(Error::Replay(format!("need at least {len} transitions, have {}", self.data.len())));
        }
        Ok(self.data.len() - len + 1)
    }

    /// Start-index probabilities for windows of `len` under `sampler`.
    pub fn probabilities(&self, len: usize, purpose: Purpose, sampler: Sampler) -> Result<Vec<f64>> {
        let n = self.valid_starts(len)?;
        Ok(match (sampler, purpose) {
            (Sampler::Uniform, _) => vec![1.0 / n as f64; n],
            (Sampler::Dfs, Purpose::World) => softmax(&self.v[..n].iter().map(|&v| -(v as f64)).collect::<Vec<_>>()),
            (Sampler::Dfs, Purpose::Imagination) => softmax(&(0..n).map(|i| imagination_score(self.v[i], self.b[i]) as f64).collect::<Vec<_>>()),
        })
    }

    /// Draws `batch` windows of `len`, incrementing the counter that belongs
    /// to `purpose` (`v` for world-model batches, `b` for imagination) over
    /// every covered transition.
    pub fn sample(&mut self, batch: usize, len: usize, purpose: Purpose, sampler: Sampler, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        let probs = self.probabilities(len, purpose, sampler)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::Replay(e.to_string()))?;
        let starts: Vec<usize> = (0..batch).map(|_| dist.sample(rng)).collect();
        let counter = match purpose {
            Purpose::World => &mut self.v,
            Purpose::Imagination => &mut self.b,
        };
        for &s in &starts {
            for c in &mut counter[s..s + len] {
                *c += 1;
            }
        }
        Ok(self.gather(&starts, len))
    }

    pub fn sample_world(&mut self, batch: usize, len: usize, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        self.sample(batch, len, Purpose::World, Sampler::Dfs, rng)
    }

    pub fn sample_imagination(&mut self, batch: usize, len: usize, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        self.sample(batch, len, Purpose::Imagination, Sampler::Dfs, rng)
    }

    pub fn sample_uniform(&mut self, batch: usize, len: usize, purpose: Purpose, rng: &mut impl Rng) -> Result<TrajectoryBatch> {
        self.sample(batch, len, purpose, Sampler::Uniform, rng)
    }

    /// Windows starting at `starts`, without touching the counters.
    pub fn gather(&self, starts: &[usize], len: usize) -> TrajectoryBatch {
        let n = starts.len() * len;
        let mut out = TrajectoryBatch {
            batch: starts.len(),
            len,
            obs_dim: self.obs_dim,
            obs: Vec::with_capacity(n * self.obs_dim),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            is_first: Vec::with_capacity(n),
            starts: starts.to_vec(),
        };
        for &s in starts {
            for t in &self.data[s..s + len] {
                out.obs.extend(t.obs.iter().map(|&p| p as f32 / 255.0));
                out.actions.push(t.action);
                out.rewards.push(t.reward);
                out.dones.push(t.done);
                out.is_first.push(t.is_first);
            }
        }
        out
    }

    /// Writes the transition log to `path` and the counters to `path.counters`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(LOG_MAGIC)?;
        w.write_all(&(self.obs_dim as u64).to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        for t in &self.data {
            w.write_all(&t.obs)?;
            w.write_all(&(t.action as u32).to_le_bytes())?;
            w.write_all(&t.reward.to_le_bytes())?;
            w.write_all(&[t.done as u8 | (t.is_first as u8) << 1])?;
        }
        w.flush()?;
        let mut c = BufWriter::new(File::create(counter_path(path))?);
        c.write_all(COUNTER_MAGIC)?;
        c.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for (v, b) in self.v.iter().zip(&self.b) {
            c.write_all(&v.to_le_bytes())?;
            c.write_all(&b.to_le_bytes())?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |d: &str| Error::Replay(format!("{}: {d}", path.display()));
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != LOG_MAGIC {
            return Err(bad("not a replay log"));
        }
        let obs_dim = read_u64(&mut r)? as usize;
        let capacity = read_u64(&mut r)? as usize;
        let mut buf = ReplayBuffer::new(obs_dim, capacity);
        let mut rec = vec![0u8; obs_dim + 9];
        loop {
            match r.read_exact(&mut rec) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let tail = &rec[obs_dim..];
            let flags = tail[8];
            buf.append(Transition {
                obs: rec[..obs_dim].to_vec(),
                action: u32::from_le_bytes(tail[..4].try_into().unwrap()) as usize,
                reward: f32::from_le_bytes(tail[4..8].try_into().unwrap()),
                done: flags & 1 != 0,
                is_first: flags & 2 != 0,
            })?;
        }
        let mut c = BufReader::new(File::open(counter_path(path))?);
        c.read_exact(&mut magic)?;
        if &magic != COUNTER_MAGIC {
            return Err(bad("not a counter file"));
        }
        if read_u64(&mut c)? as usize != buf.len() {
            return Err(bad("counter file length does not match the log"));
        }
        for i in 0..buf.len() {
            buf.v[i] = read_u64(&mut c)?;
            buf.b[i] = read_u64(&mut c)?;
        }
        Ok(buf)
    }
}

fn counter_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".counters");
    s.into()
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
