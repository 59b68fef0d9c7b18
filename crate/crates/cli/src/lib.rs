//! Scenario files, reports and the live UDP transport behind the `pob`
//! command.

pub mod config;
pub mod live;
pub mod report;
pub mod simulate;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
    pub const NO_OUTPUT: i32 = 4;
}
