//! Shared fixtures live in the benches themselves.
