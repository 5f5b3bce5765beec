//! Library surface of the experiment harness: configuration loading,
//! machine-readable record formats, and the subcommand runners. The
//! `taskgrad` binary is a thin argument-parsing shell over this.

pub mod config;
pub mod record;
pub mod runner;
