//! Configuration, validation, and the command-line interface.

mod cli;
mod config;
pub mod selftest;

pub use cli::{
    cli_main, run_finetune, run_gradcheck, run_pretrain, run_probe_gradnorm, run_probe_reinit,
    run_probe_truncate, run_reconstruct,
};
pub use config::{
    validate_config, DataSettings, DataSource, FinetuneRaw, OptimRaw, ProbeRaw, RawConfig,
    RunConfig, KNOWN_KEYS,
};
