//! Scalar operation counting for numerical kernels.
//!
//! Kernels report the exact number of scalar multiplications, additions and
//! comparisons they execute through [`record`]. Nothing is recorded unless a
//! scope opened with [`op_counter_scope`] is active on the current thread.
//! Counts are keyed by the kernel name, prefixed with the innermost label
//! pushed by [`with_label`] (`"conv2/accum_conv"`).
//!
//! Divisions are reported as multiplications.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub multiplications: u64,
    pub additions: u64,
    pub comparisons: u64,
}

impl OpCount {
    pub fn is_zero(&self) -> bool {
        *self == OpCount::default()
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: Self) {
        self.multiplications += rhs.multiplications;
        self.additions += rhs.additions;
        self.comparisons += rhs.comparisons;
    }
}

/// Counts gathered by one scope, keyed by `label/kernel` (or just `kernel`).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct OpCounts(BTreeMap<String, OpCount>);

impl OpCounts {
    pub fn get(&self, key: &str) -> OpCount {
        self.0.get(key).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &OpCount)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total(&self) -> OpCount {
        let mut sum = OpCount::default();
        for c in self.0.values() {
            sum += *c;
        }
        sum
    }

    /// Sum over every key whose kernel part (after the last `/`) equals `kernel`.
    pub fn kernel_total(&self, kernel: &str) -> OpCount {
        let mut sum = OpCount::default();
        for (k, c) in &self.0 {
            if kernel_of(k) == kernel {
                sum += *c;
            }
        }
        sum
    }

    pub fn is_empty(&self) -> bool {
        self.0.values().all(OpCount::is_zero)
    }

    pub fn merge(&mut self, other: &OpCounts) {
        for (k, c) in &other.0 {
            *self.0.entry(k.clone()).or_default() += *c;
        }
    }
}

/// Kernel part of a count key.
pub fn kernel_of(key: &str) -> &str {
    key.rsplit('/').next().unwrap_or(key)
}

/// Label part of a count key, if any.
pub fn label_of(key: &str) -> Option<&str> {
    key.rsplit_once('/').map(|(l, _)| l)
}

#[derive(Default)]
struct State {
    active: bool,
    counts: BTreeMap<String, OpCount>,
    labels: Vec<String>,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

/// Guard for an active counting scope. Dropping it without calling
/// [`CounterScope::finish`] discards the counts.
#[must_use]
pub struct CounterScope {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl CounterScope {
    pub fn finish(self) -> OpCounts {
        let counts = STATE.with(|s| std::mem::take(&mut s.borrow_mut().counts));
        OpCounts(counts)
    }
}

impl Drop for CounterScope {
    fn drop(&mut self) {
        STATE.with(|s| {
            let mut s = s.borrow_mut();
            s.active = false;
            s.counts.clear();
        });
    }
}

/// Opens a counting scope on this thread. Scopes do not nest.
pub fn op_counter_scope() -> Result<CounterScope> {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.active {
            return Err(Error::NestedCounterScope);
        }
        s.active = true;
        s.counts.clear();
        Ok(CounterScope {
            _not_send: std::marker::PhantomData,
        })
    })
}

pub fn is_active() -> bool {
    STATE.with(|s| s.borrow().active)
}

/// Adds counts for `kernel` under the current label.
pub fn record(kernel: &str, multiplications: u64, additions: u64, comparisons: u64) {
    if multiplications == 0 && additions == 0 && comparisons == 0 {
        return;
    }
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if !s.active {
            return;
        }
        let key = match s.labels.last() {
            Some(label) => format!("{label}/{kernel}"),
            None => kernel.to_string(),
        };
        *s.counts.entry(key).or_default() += OpCount {
            multiplications,
            additions,
            comparisons,
        };
    });
}

/// Runs `f` with `label` attached to every count recorded inside it.
pub fn with_label<R>(label: &str, f: impl FnOnce() -> R) -> R {
    struct Pop;
    impl Drop for Pop {
        fn drop(&mut self) {
            STATE.with(|s| {
                s.borrow_mut().labels.pop();
            });
        }
    }
    STATE.with(|s| s.borrow_mut().labels.push(label.to_string()));
    let _pop = Pop;
    f()
}
