use serde::Serialize;

use crate::error::{domain, Result};

/// Inclusive integer interval of sites `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if end < start {
            return domain(format!("empty window [{start}, {end}]"));
        }
        Ok(Self { start, end })
    }

    /// `[0, len - 1]`.
    pub fn from_len(len: usize) -> Result<Self> {
        Self::new(0, len as i64 - 1)
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: i64) -> bool {
        self.start <= x && x <= self.end
    }

    pub fn contains_window(&self, other: &Window) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn extend(&self, left: u64, right: u64) -> Window {
        Window {
            start: self.start - left as i64,
            end: self.end + right as i64,
        }
    }

    pub fn index(&self, x: i64) -> usize {
        debug_assert!(self.contains(x));
        (x - self.start) as usize
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> {
        self.start..=self.end
    }
}
