//! Hardware-independent cost accounting.
//!
//! Every kernel that makes one pass over an n×n matrix (a LogSumExp reduction,
//! a matrix-vector product, an elementwise exponentiation, ...) records one
//! operation against the category that is active on the current thread.
//! Solves are single-owner, so thread-local counters give exact per-solve
//! totals without any shared state.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    NewtonSolve,
    LineSearch,
    ChiSinkhorn,
    MirrorDescent,
    Sinkhorn,
}

const CATEGORIES: usize = 5;

impl Category {
    fn index(self) -> usize {
        match self {
            Category::NewtonSolve => 0,
            Category::LineSearch => 1,
            Category::ChiSinkhorn => 2,
            Category::MirrorDescent => 3,
            Category::Sinkhorn => 4,
        }
    }
}

thread_local! {
    static COUNTS: [Cell<u64>; CATEGORIES] = const { [const { Cell::new(0) }; CATEGORIES] };
    static CURRENT: Cell<Category> = const { Cell::new(Category::MirrorDescent) };
}

/// Records one O(n²) pass.
pub fn tick() {
    tick_n(1);
}

pub fn tick_n(k: u64) {
    let idx = CURRENT.with(|c| c.get()).index();
    COUNTS.with(|counts| counts[idx].set(counts[idx].get() + k));
}

pub fn current() -> Category {
    CURRENT.with(|c| c.get())
}

/// Switches the active category until the guard is dropped.
#[must_use]
pub fn scope(category: Category) -> ScopeGuard {
    let previous = CURRENT.with(|c| c.replace(category));
    ScopeGuard { previous }
}

pub struct ScopeGuard {
    previous: Category,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(self.previous));
    }
}

/// Per-category operation counts, as in a subroutine breakdown table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub newton_solve: u64,
    pub line_search: u64,
    pub chi_sinkhorn: u64,
    pub mirror_descent: u64,
    pub sinkhorn: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.newton_solve + self.line_search + self.chi_sinkhorn + self.mirror_descent + self.sinkhorn
    }

    pub fn get(&self, category: Category) -> u64 {
        match category {
            Category::NewtonSolve => self.newton_solve,
            Category::LineSearch => self.line_search,
            Category::ChiSinkhorn => self.chi_sinkhorn,
            Category::MirrorDescent => self.mirror_descent,
            Category::Sinkhorn => self.sinkhorn,
        }
    }

    pub fn since(&self, earlier: &OpCounts) -> OpCounts {
        OpCounts {
            newton_solve: self.newton_solve - earlier.newton_solve,
            line_search: self.line_search - earlier.line_search,
            chi_sinkhorn: self.chi_sinkhorn - earlier.chi_sinkhorn,
            mirror_descent: self.mirror_descent - earlier.mirror_descent,
            sinkhorn: self.sinkhorn - earlier.sinkhorn,
        }
    }
}

/// Cumulative counts on this thread. Take two snapshots and diff them with
/// [`OpCounts::since`] to attribute work to a region.
pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| OpCounts {
        newton_solve: c[0].get(),
        line_search: c[1].get(),
        chi_sinkhorn: c[2].get(),
        mirror_descent: c[3].get(),
        sinkhorn: c[4].get(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_nest_and_restore() {
        let before = snapshot();
        tick();
        {
            let _g = scope(Category::LineSearch);
            tick_n(3);
            {
                let _h = scope(Category::ChiSinkhorn);
                tick();
            }
            tick();
        }
        let d = snapshot().since(&before);
        assert_eq!(d.line_search, 4);
        assert_eq!(d.chi_sinkhorn, 1);
        assert_eq!(d.get(current()), 1);
        assert_eq!(d.total(), 6);
    }
}
