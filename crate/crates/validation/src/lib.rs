//! Acceptance criteria live in `tests/acceptance.rs`; run them with
//! `cargo test -p nfrl-validation --test acceptance`.
