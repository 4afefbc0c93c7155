//! Flat `key = value` run configuration with `#` comments.
//!
//! Every key is optional and falls back to its default; unknown or repeated
//! keys are errors. A parsed config is always validated before it is returned.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::DenoiserConfig;
use crate::sampler::InferencePlan;
use crate::schedule::BridgeSchedule;
use crate::synthdata::SynthParams;
use crate::training::TrainConfig;

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Serializes every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(writeln!(out, "{} = {}", stringify!($key), Fmt(&self.$key)).expect("write to string");)*
                out
            }
        }
    };
}

/// Round-trip formatting: floats use the shortest exact representation.
struct Fmt<'a, T>(&'a T);

macro_rules! display_via {
    ($($t:ty => $f:literal),*) => {
        $(impl std::fmt::Display for Fmt<'_, $t> {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, $f, self.0)
            }
        })*
    };
}
display_via!(u64 => "{}", usize => "{}", f64 => "{:?}", String => "{}");

run_config! {
    /// Root seed; every named stream (`data`, `init`, `train`, `sample`) derives from it.
    seed: u64 = 0;
    timesteps: usize = 200;
    var_scale: f64 = 1.0;
    /// Inference steps `S`.
    sample_steps: usize = 50;
    grid: usize = 8;
    channels: usize = 3;
    width: usize = 16;
    blocks: usize = 2;
    heads: usize = 2;
    token_dim: usize = 16;
    time_dim: usize = 16;
    enc_dim: usize = 32;
    patch: usize = 2;
    stem_kernel: usize = 3;
    lr: f64 = 1e-5;
    batch: usize = 8;
    accumulation: usize = 2;
    beta1: f64 = 0.9;
    beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    weight_decay: f64 = 0.01;
    ema_decay: f64 = 0.999;
    val_every: u64 = 100;
    val_size: usize = 32;
    patience: usize = 3;
    lr_gamma: f64 = 0.2;
    min_lr: f64 = 1e-7;
    stage1_steps: u64 = 2000;
    stage2_steps: u64 = 2000;
    dataset_size: usize = 4096;
    val_fraction: f64 = 0.1;
    contrast: f64 = 0.25;
    out_dir: String = "runs/default".to_string();
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    no + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.timesteps < 2 {
            return fail(format!("timesteps must be >= 2, got {}", self.timesteps));
        }
        if !(self.var_scale > 0.0 && self.var_scale.is_finite()) {
            return fail(format!(
                "var_scale must be positive, got {}",
                self.var_scale
            ));
        }
        if self.sample_steps < 1 || self.sample_steps > self.timesteps {
            return fail(format!("sample_steps must lie in 1..={}", self.timesteps));
        }
        if self.grid < 2 || self.grid > 64 {
            return fail(format!("grid must lie in 2..=64, got {}", self.grid));
        }
        if self.dataset_size < 2 || !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("dataset_size must be >= 2 and val_fraction in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.contrast) {
            return fail(format!(
                "contrast must lie in [0, 1), got {}",
                self.contrast
            ));
        }
        if self.out_dir.is_empty()
            || self.out_dir.trim() != self.out_dir
            || self.out_dir.contains(['#', '\n'])
        {
            return fail(format!("unusable out_dir `{}`", self.out_dir));
        }
        self.network().validate()?;
        self.train().validate()
    }

    pub fn network(&self) -> DenoiserConfig {
        DenoiserConfig {
            height: self.grid,
            width: self.grid,
            channels: self.channels,
            hidden: self.width,
            blocks: self.blocks,
            heads: self.heads,
            token_dim: self.token_dim,
            time_dim: self.time_dim,
            enc_dim: self.enc_dim,
            patch: self.patch,
            stem_kernel: self.stem_kernel,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch: self.batch,
            accumulation: self.accumulation,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            val_every: self.val_every,
            val_size: self.val_size,
            patience: self.patience,
            lr_gamma: self.lr_gamma,
            min_lr: self.min_lr,
        }
    }

    pub fn synth(&self) -> SynthParams {
        SynthParams {
            channels: self.channels,
            contrast: self.contrast,
            ..SynthParams::grid(self.grid)
        }
    }

    pub fn schedule(&self) -> Result<BridgeSchedule> {
        BridgeSchedule::new(self.timesteps, self.var_scale)
    }

    pub fn plan(&self) -> Result<InferencePlan> {
        InferencePlan::new(self.timesteps, self.sample_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lr, 1e-5);
        assert_eq!((c.batch, c.accumulation), (8, 2));
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# run\n\nseed = 7   # trailing\n  lr=0.001\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(
            err.to_string().contains("unknown key `learning_rate`"),
            "{err}"
        );
    }

    #[test]
    fn malformed_lines_are_errors() {
        for bad in [
            "seed 4",
            "seed = x",
            "seed = 1\nseed = 2",
            "heads = 3",
            "sample_steps = 500",
            "timesteps = 1",
        ] {
            assert!(
                matches!(RunConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn every_key_is_serialized() {
        let text = RunConfig::default().to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        for k in RunConfig::KEYS {
            assert!(text.contains(&format!("{k} = ")));
        }
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(
            seed in any::<u64>(),
            t in 2usize..2000,
            s in 1e-3f64..10.0,
            lr in 1e-9f64..1.0,
            ema in 0.0f64..=1.0,
            heads in 1usize..5,
            dir in "[a-zA-Z0-9_./-]{1,24}",
        ) {
            let c = RunConfig {
                seed,
                timesteps: t,
                var_scale: s,
                sample_steps: t.min(50),
                lr,
                ema_decay: ema,
                heads,
                width: 4 * heads,
                out_dir: dir,
                ..RunConfig::default()
            };
            let back = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), c.to_text());
        }
    }
}
