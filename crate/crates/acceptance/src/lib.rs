//! Host package for the `acceptance` test target; see
//! `tests/acceptance.rs`.
