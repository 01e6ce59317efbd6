use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::ClockError;

struct Entry<A> {
    due: u64,
    seq: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}

impl<A> Eq for Entry<A> {}

impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<A> Ord for Entry<A> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.due, other.seq).cmp(&(self.due, self.seq))
    }
}

/// Discrete-event queue on an integer-microsecond timeline.
///
/// Actions fire in `(due, insertion order)` order; time never moves back.
pub struct SimScheduler<A> {
    now_us: u64,
    next_seq: u64,
    pending: BinaryHeap<Entry<A>>,
}

impl<A> Default for SimScheduler<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A> SimScheduler<A> {
    pub fn new() -> Self {
        Self::starting_at(0)
    }

    pub fn starting_at(now_us: u64) -> Self {
        SimScheduler {
            now_us,
            next_seq: 0,
            pending: BinaryHeap::new(),
        }
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_due(&self) -> Option<u64> {
        self.pending.peek().map(|e| e.due)
    }

    pub fn schedule_at(&mut self, due_us: u64, action: A) -> Result<(), ClockError> {
        if due_us < self.now_us {
            return Err(ClockError::TimeInPast {
                at_us: due_us as i128,
                now_us: self.now_us,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Entry {
            due: due_us,
            seq,
            action,
        });
        Ok(())
    }

    /// Removes and returns the earliest action due at or before `limit_us`,
    /// moving `now` to its due time.
    pub fn pop_due(&mut self, limit_us: u64) -> Option<(u64, A)> {
        if self.pending.peek()?.due > limit_us {
            return None;
        }
        let e = self.pending.pop().expect("peeked");
        self.now_us = e.due;
        Some((e.due, e.action))
    }

    /// Runs every action due at or before `t_us` through `fire`, in order,
    /// then sets `now` to `t_us`.
    pub fn advance_to(&mut self, t_us: u64, mut fire: impl FnMut(u64, A)) -> Result<(), ClockError> {
        if t_us < self.now_us {
            return Err(ClockError::TimeReversal {
                to_us: t_us,
                now_us: self.now_us,
            });
        }
        while let Some((due, action)) = self.pop_due(t_us) {
            fire(due, action);
        }
        self.now_us = t_us;
        Ok(())
    }

    /// Drops every pending action.
    pub fn clear(&mut self) {
        self.pending.clear();
    }
}
