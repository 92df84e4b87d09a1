//! Elastic worker pool bookkeeping.
//!
//! A pool is a named FIFO of dispatched task keys plus a target size.
//! Worker threads (spawned by the engine) pull from it; shrinking only
//! lowers the target, and each worker re-checks the target between
//! tasks, so an in-flight task is never interrupted. Growing spawns
//! new workers immediately.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

use crate::calc::ResourceClass;

use super::TaskKey;

#[derive(Debug, Default)]
struct PoolState {
    queue: VecDeque<TaskKey>,
    target: usize,
    alive: usize,
    closed: bool,
}

/// Shared state of one worker pool.
pub(super) struct PoolShared {
    pub(super) name: String,
    pub(super) class: ResourceClass,
    state: Mutex<PoolState>,
    cv: Condvar,
}

impl PoolShared {
    pub(super) fn new(name: &str, class: ResourceClass) -> PoolShared {
        PoolShared {
            name: name.to_string(),
            class,
            state: Mutex::new(PoolState::default()),
            cv: Condvar::new(),
        }
    }

    /// Queued (dispatched, not yet picked up) task count.
    pub(super) fn queued(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub(super) fn target(&self) -> usize {
        self.state.lock().unwrap().target
    }

    #[cfg(test)]
    pub(super) fn alive(&self) -> usize {
        self.state.lock().unwrap().alive
    }

    pub(super) fn push(&self, key: TaskKey) {
        let mut state = self.state.lock().unwrap();
        state.queue.push_back(key);
        drop(state);
        self.cv.notify_one();
    }

    /// Sets a new target size and reports how many workers the caller
    /// must spawn now (growth is immediate; shrink is signalled and
    /// honored by workers between tasks).
    pub(super) fn resize(&self, new_target: usize) -> usize {
        let mut state = self.state.lock().unwrap();
        state.target = new_target;
        let to_spawn = new_target.saturating_sub(state.alive);
        state.alive += to_spawn; // reserve slots for the threads being spawned
        drop(state);
        self.cv.notify_all();
        to_spawn
    }

    /// Marks the pool closed: idle workers exit once the queue drains.
    pub(super) fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    /// Blocks for the next task. Returns `None` when this worker should
    /// exit: the pool shrank below the live worker count, or it closed
    /// and the queue is empty. The worker's `alive` slot is released on
    /// `None`, so callers must not call `pop` again after that.
    pub(super) fn pop(&self) -> Option<TaskKey> {
        let mut state = self.state.lock().unwrap();
        loop {
            if state.alive > state.target {
                state.alive -= 1;
                return None;
            }
            if let Some(key) = state.queue.pop_front() {
                return Some(key);
            }
            if state.closed {
                state.alive -= 1;
                return None;
            }
            state = self.cv.wait(state).unwrap();
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn pop_returns_queued_tasks_in_order() {
        let pool = PoolShared::new("cpu", ResourceClass::Cpu);
        assert_eq!(pool.resize(1), 1);
        pool.push("a".to_string());
        pool.push("b".to_string());
        assert_eq!(pool.pop().as_deref(), Some("a"));
        assert_eq!(pool.pop().as_deref(), Some("b"));
        pool.close();
        assert_eq!(pool.pop(), None);
        assert_eq!(pool.alive(), 0);
    }

    #[test]
    fn shrink_makes_blocked_workers_exit() {
        let pool = Arc::new(PoolShared::new("cpu", ResourceClass::Cpu));
        assert_eq!(pool.resize(2), 2);
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let pool = Arc::clone(&pool);
                std::thread::spawn(move || pool.pop())
            })
            .collect();
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(pool.resize(0), 0);
        for h in handles {
            assert_eq!(h.join().unwrap(), None);
        }
        assert_eq!(pool.alive(), 0);
    }

    #[test]
    fn grow_reports_only_missing_workers() {
        let pool = PoolShared::new("cpu", ResourceClass::Cpu);
        assert_eq!(pool.resize(2), 2);
        assert_eq!(pool.resize(3), 1);
        assert_eq!(pool.resize(1), 0);
        // two phantom workers must notice the shrink
        assert_eq!(pool.pop(), None);
        assert_eq!(pool.alive(), 2);
    }
}
