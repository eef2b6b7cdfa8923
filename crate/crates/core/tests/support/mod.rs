//! Checks shared by the test suites and the acceptance runner.

#![allow(dead_code)]

pub mod grad;
pub mod oracle;
