//! Sequential identifiers, unique within one service run or replay.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug)]
pub struct IdGen {
    prefix: &'static str,
    next: AtomicU64,
}

impl IdGen {
    pub const fn new(prefix: &'static str) -> Self {
        IdGen { prefix, next: AtomicU64::new(1) }
    }

    pub fn next_id(&self) -> String {
        format_id(self.prefix, self.next.fetch_add(1, Ordering::Relaxed))
    }
}

pub fn format_id(prefix: &str, n: u64) -> String {
    format!("{prefix}-{n:06}")
}
