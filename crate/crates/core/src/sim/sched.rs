//! Thread-block dispatch and Greedy-Then-Oldest selection.

use std::collections::VecDeque;

/// A resident WarpGroup as the scheduler sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub thread: u32,
    pub age: u64,
    pub ready: bool,
}

/// Keeps issuing from `last` while it can issue; otherwise falls back to
/// the oldest ready thread.
pub fn select_gto(last: Option<u32>, threads: &[Candidate]) -> Option<u32> {
    if let Some(l) = last {
        if threads.iter().any(|c| c.thread == l && c.ready) {
            return Some(l);
        }
    }
    threads.iter().filter(|c| c.ready).min_by_key(|c| c.age).map(|c| c.thread)
}

/// Places pending blocks (in queue order) onto SMs with a free CTA slot,
/// scanning SMs round-robin from `cursor`. Returns `(block, sm)` pairs.
pub fn dispatch_round_robin(pending: &mut VecDeque<usize>, free_slots: &mut [u32], cursor: &mut usize) -> Vec<(usize, u32)> {
    let n = free_slots.len();
    let mut out = Vec::new();
    while let Some(&block) = pending.front() {
        let Some(sm) = (0..n).map(|i| (*cursor + i) % n).find(|&sm| free_slots[sm] > 0) else { break };
        pending.pop_front();
        free_slots[sm] -= 1;
        *cursor = (sm + 1) % n;
        out.push((block, sm as u32));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(thread: u32, age: u64, ready: bool) -> Candidate {
        Candidate { thread, age, ready }
    }

    #[test]
    fn greedy_then_oldest() {
        let a_b = [c(0, 0, true), c(1, 1, true)];
        assert_eq!(select_gto(Some(0), &a_b), Some(0));
        assert_eq!(select_gto(Some(1), &a_b), Some(1));
        let a_stalled = [c(0, 0, false), c(1, 1, true)];
        assert_eq!(select_gto(Some(0), &a_stalled), Some(1));
        let b_stalled = [c(0, 0, true), c(1, 1, false)];
        assert_eq!(select_gto(Some(1), &b_stalled), Some(0));
        assert_eq!(select_gto(None, &[c(0, 0, false), c(1, 1, false)]), None);
        assert_eq!(select_gto(None, &[]), None);
    }

    #[test]
    fn dispatch_fills_one_wave_then_waits() {
        let mut pending: VecDeque<usize> = (0..264).collect();
        let mut free = vec![1u32; 132];
        let mut cursor = 0;
        let first = dispatch_round_robin(&mut pending, &mut free, &mut cursor);
        assert_eq!(first.len(), 132);
        assert!(first.iter().enumerate().all(|(i, &(b, sm))| b == i && sm as usize == i));
        assert_eq!(pending.len(), 132);
        assert!(dispatch_round_robin(&mut pending, &mut free, &mut cursor).is_empty());
        free[7] = 1;
        assert_eq!(dispatch_round_robin(&mut pending, &mut free, &mut cursor), vec![(132, 7)]);
    }

    #[test]
    fn single_block_lands_on_sm_zero() {
        let mut pending: VecDeque<usize> = VecDeque::from([0]);
        let mut free = vec![1u32; 132];
        assert_eq!(dispatch_round_robin(&mut pending, &mut free, &mut 0), vec![(0, 0)]);
        assert!(dispatch_round_robin(&mut VecDeque::new(), &mut free, &mut 0).is_empty());
    }
}
