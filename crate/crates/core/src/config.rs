//! Run configuration as plain `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::codec::LatentSpec;
use crate::error::{Error, Result};
use crate::imagination::BehaviourConfig;
use crate::replay::Sampler;
use crate::ssd::{Backbone, ScanMode, SsdConfig};
use crate::world_model::token::TokenModelConfig;
use crate::world_model::WorldModelConfig;

/// Sequence backbone and scan strategy as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqMode {
    Recurrent,
    Chunked,
    Quadratic,
    Gru,
}

impl SeqMode {
    pub const ALL: [SeqMode; 4] = [SeqMode::Recurrent, SeqMode::Chunked, SeqMode::Quadratic, SeqMode::Gru];

    pub fn name(self) -> &'static str {
        match self {
            SeqMode::Recurrent => "recurrent",
            SeqMode::Chunked => "chunked",
            SeqMode::Quadratic => "quadratic",
            SeqMode::Gru => "gru",
        }
    }

    pub fn backbone(self) -> Backbone {
        if self == SeqMode::Gru {
            Backbone::Gru
        } else {
            Backbone::Ssd
        }
    }

    pub fn scan(self, chunk: usize) -> ScanMode {
        match self {
            SeqMode::Recurrent => ScanMode::Recurrent,
            SeqMode::Quadratic => ScanMode::Quadratic,
            SeqMode::Chunked | SeqMode::Gru => ScanMode::Chunked(chunk),
        }
    }
}

impl FromStr for SeqMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SeqMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (recurrent, chunked, quadratic, gru)")))
    }
}

pub fn parse_sampler(s: &str) -> Result<Sampler> {
    match s {
        "dfs" => Ok(Sampler::Dfs),
        "uniform" => Ok(Sampler::Uniform),
        _ => Err(Error::Config(format!("unknown sampler `{s}` (dfs, uniform)"))),
    }
}

pub fn sampler_name(s: Sampler) -> &'static str {
    match s {
        Sampler::Dfs => "dfs",
        Sampler::Uniform => "uniform",
    }
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of a run. Defaults follow the reference hyperparameters;
        /// sizes and budgets are scaled for a single CPU.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = ConfigValue::parse(value)
                        .map_err(|e| Error::Config(format!("{key}: {e}")))?, )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// Canonical text: every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( writeln!(s, "{} = {}", stringify!($field), ConfigValue::render(&self.$field)).unwrap(); )*
                s
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
plain_value!(usize, u64, f64, bool);

impl ConfigValue for SeqMode {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl ConfigValue for Sampler {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        parse_sampler(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        sampler_name(*self).into()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("`{p}`: {e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

run_config! {
    seed: u64 = 0,
    mode: SeqMode = SeqMode::Chunked,
    sampler: Sampler = Sampler::Dfs,

    d: usize = 128,
    head_dim: usize = 32,
    state: usize = 16,
    chunk: usize = 16,
    layers: usize = 2,
    dropout: f64 = 0.1,

    wm_lr: f64 = 4e-5,
    weight_decay: f64 = 1e-4,
    grad_clip: f64 = 100.0,
    free_bits: f64 = 1.0,
    rep_scale: f64 = 0.1,
    unimix: f64 = 0.01,
    latent_categories: usize = 16,
    latent_classes: usize = 16,
    codec_hidden: usize = 256,
    codec_layers: usize = 2,
    head_hidden: usize = 256,
    action_embed: usize = 32,

    gamma: f64 = 0.985,
    lambda: f64 = 0.95,
    entropy: f64 = 3e-4,
    actor_hidden: usize = 256,
    critic_hidden: usize = 512,
    ac_layers: usize = 2,
    actor_lr: f64 = 3e-5,
    critic_lr: f64 = 3e-5,
    return_norm_decay: f64 = 0.99,
    horizon: usize = 16,
    l_img: usize = 8,
    b_img: usize = 64,

    // Grid-world token benchmark.
    grid_size: usize = 5,
    grid_frames: usize = 8,
    token_batch: usize = 16,
    token_lr: f64 = 1e-3,
    token_steps: usize = 2000,
    token_warmup: usize = 100,
    eval_every: usize = 250,
    eval_sequences: usize = 64,

    // Pixel agent.
    env_size: usize = 6,
    time_limit: usize = 6,
    env_steps: usize = 4000,
    prefill: usize = 500,
    train_every: usize = 1,
    ac_warmup: usize = 0,
    wm_batch: usize = 16,
    wm_len: usize = 16,
    eval_episodes: usize = 200,
    agent_eval_every: usize = 1000,
    checkpoint_every: usize = 0,

    // Scaling benchmark.
    bench_lengths: Vec<usize> = vec![208, 416, 832, 1664],
    bench_batch: usize = 1,
    bench_warmup: usize = 3,
    bench_iters: usize = 20,

    /// Wall-clock limit per training command, seconds (0 = none).
    time_budget: u64 = 0,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{raw}`", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    pub fn ssd(&self) -> SsdConfig {
        SsdConfig { d: self.d, head_dim: self.head_dim, state: self.state, chunk: self.chunk }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssd().validate()?;
        let positive = [
            ("layers", self.layers),
            ("latent_categories", self.latent_categories),
            ("latent_classes", self.latent_classes),
            ("l_img", self.l_img),
            ("b_img", self.b_img),
            ("grid_frames", self.grid_frames),
            ("token_batch", self.token_batch),
            ("wm_batch", self.wm_batch),
            ("train_every", self.train_every),
            ("bench_iters", self.bench_iters),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.wm_len < 2 {
            return Err(Error::Config("wm_len must be at least 2".into()));
        }
        if self.grid_size < 4 || self.env_size < 4 {
            return Err(Error::Config("grid sizes need at least a 2x2 interior".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        if self.bench_lengths.is_empty() {
            return Err(Error::Config("bench_lengths is empty".into()));
        }
        self.world_model(1, 1).validate()
    }

    pub fn world_model(&self, obs_dim: usize, actions: usize) -> WorldModelConfig {
        WorldModelConfig {
            latent: LatentSpec { categories: self.latent_categories, classes: self.latent_classes },
            codec_hidden: self.codec_hidden,
            codec_layers: self.codec_layers,
            head_hidden: self.head_hidden,
            action_embed: self.action_embed,
            seq: self.ssd(),
            layers: self.layers,
            backbone: self.mode.backbone(),
            mode: self.mode.scan(self.chunk),
            dropout: self.dropout,
            unimix: self.unimix,
            free_bits: self.free_bits,
            rep_scale: self.rep_scale,
            lr: self.wm_lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..WorldModelConfig::new(obs_dim, actions)
        }
    }

    pub fn token_model(&self) -> TokenModelConfig {
        TokenModelConfig {
            seq: self.ssd(),
            layers: self.layers,
            backbone: self.mode.backbone(),
            mode: self.mode.scan(self.chunk),
            dropout: self.dropout,
            lr: self.token_lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..TokenModelConfig::default()
        }
    }

    pub fn behaviour(&self) -> BehaviourConfig {
        BehaviourConfig {
            horizon: self.horizon,
            gamma: self.gamma,
            lambda: self.lambda,
            entropy: self.entropy,
            actor_hidden: self.actor_hidden,
            critic_hidden: self.critic_hidden,
            layers: self.ac_layers,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            grad_clip: self.grad_clip,
            norm_decay: self.return_norm_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse("# desk run\nd = 64  # smaller\nhead_dim=16\nmode = gru\nsampler = uniform\nbench_lengths = 8, 16\n").unwrap();
        assert_eq!((cfg.d, cfg.head_dim, cfg.mode, cfg.sampler), (64, 16, SeqMode::Gru, Sampler::Uniform));
        assert_eq!(cfg.bench_lengths, vec![8, 16]);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("d = many").is_err());
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("d = 100").is_err());
        assert!(RunConfig::parse("unimix = 0").is_err());
        assert!(RunConfig::parse("mode = lstm").is_err());
    }

    #[test]
    fn reference_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.wm_lr, c.weight_decay, c.dropout, c.state, c.layers), (4e-5, 1e-4, 0.1, 16, 2));
        assert_eq!((c.gamma, c.lambda, c.entropy, c.grad_clip, c.l_img), (0.985, 0.95, 3e-4, 100.0, 8));
        assert_eq!((c.actor_hidden, c.critic_hidden), (256, 512));
    }
}
