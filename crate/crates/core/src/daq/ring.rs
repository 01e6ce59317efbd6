use std::collections::VecDeque;

/// Fixed-capacity buffer of timestamped sample rows; the oldest row is
/// evicted when full.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBuffer {
    capacity: usize,
    rows: VecDeque<(u64, Vec<f64>)>,
    evicted: u64,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        RingBuffer {
            capacity,
            rows: VecDeque::with_capacity(capacity),
            evicted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows dropped to make room since the last clear.
    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn push(&mut self, t_us: u64, row: Vec<f64>) {
        if self.capacity == 0 {
            self.evicted += 1;
            return;
        }
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
            self.evicted += 1;
        }
        self.rows.push_back((t_us, row));
    }

    pub fn latest(&self) -> Option<&(u64, Vec<f64>)> {
        self.rows.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, Vec<f64>)> {
        self.rows.iter()
    }

    /// Empties and resizes.
    pub fn reset(&mut self, capacity: usize) {
        self.capacity = capacity;
        self.rows = VecDeque::with_capacity(capacity);
        self.evicted = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evicts_oldest() {
        let mut r = RingBuffer::new(2);
        r.push(1, vec![1.0]);
        r.push(2, vec![2.0]);
        r.push(3, vec![3.0]);
        let times: Vec<u64> = r.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, [2, 3]);
        assert_eq!(r.evicted(), 1);
        assert_eq!(r.latest().unwrap().0, 3);
    }

    proptest! {
        #[test]
        fn never_exceeds_capacity(cap in 0usize..50, n in 0usize..200) {
            let mut r = RingBuffer::new(cap);
            for i in 0..n {
                r.push(i as u64, vec![i as f64]);
                prop_assert!(r.len() <= cap);
            }
            prop_assert_eq!(r.len(), n.min(cap));
            prop_assert_eq!(r.evicted() as usize, n - n.min(cap));
            // Survivors are the newest rows, still in order.
            let times: Vec<u64> = r.iter().map(|(t, _)| *t).collect();
            let expect: Vec<u64> = ((n - n.min(cap))..n).map(|i| i as u64).collect();
            prop_assert_eq!(times, expect);
        }
    }
}
