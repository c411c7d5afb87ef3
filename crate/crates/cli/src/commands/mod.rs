pub mod audit;
pub mod flops;
pub mod map;
pub mod steer;
pub mod theory;

use serde::Serialize;
use serde_json::json;

use crate::config::ConfigFile;

pub const SCHEMA_VERSION: u32 = 1;

pub struct Context {
    pub threads: Option<usize>,
    pub file: ConfigFile,
}

impl Context {
    pub fn threads(&self) -> usize {
        self.threads.unwrap_or_else(rayon::current_num_threads)
    }
}

/// Prints the machine-readable envelope every subcommand emits.
pub fn emit<C: Serialize, R: Serialize>(command: &str, ctx: &Context, config: &C, result: &R) -> anyhow::Result<()> {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "threads": ctx.threads(),
        "config": config,
        "result": result,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}
