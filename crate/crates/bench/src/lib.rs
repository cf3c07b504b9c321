//! Criterion benchmark helpers live in the benches directory.
