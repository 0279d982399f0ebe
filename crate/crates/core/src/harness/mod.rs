//! Command line, seeds, and output plumbing.

pub mod cli;
pub mod record;
pub mod seed;
pub mod selfcheck;
