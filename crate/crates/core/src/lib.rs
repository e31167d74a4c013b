//! Re-rolls straight-line cryptographic kernels into loops and explores
//! hardware-oriented design variants of the result.
//!
//! The pipeline: parse flat C-like code ([`parser`]), recover loop structure
//! by equality saturation over statement templates ([`template`],
//! [`saturate`]), enumerate loop transforms and synthesis directives
//! ([`explore`]), score each candidate with an analytical quality model
//! ([`qor`]), and certify every emitted variant bit-exact against the input
//! ([`oracle`]).

pub mod cli;
pub mod dataflow;
pub mod emit;
pub mod explore;
pub mod ir;
pub mod multikernel;
pub mod oracle;
pub mod output;
pub mod parser;
pub mod pipeline;
pub mod qor;
pub mod saturate;
pub mod template;

/// Entry point for the `reroll` binary; returns the process exit code.
pub fn run_cli() -> i32 {
    cli::run(std::env::args_os())
}
