//! Per-SM tensor-core pipeline: a bounded FIFO issue buffer feeding one
//! serial execution slot.

use std::collections::VecDeque;

use crate::isa::{wgmma_shape_supported, Dtype};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unsupported WGMMA m{m}n{n}k{k} {dtype:?}: only dense F16 m64nNk16 with N a multiple of 8 in 8..=256 is timed")]
pub struct UnsupportedShape {
    pub m: u32,
    pub n: u32,
    pub k: u32,
    pub dtype: Dtype,
}

/// Completion latency of one WGMMA: `max(ceil(N/2), min_latency)`.
pub fn wgmma_latency(m: u32, n: u32, k: u32, dtype: Dtype, min_latency: u64) -> Result<u64, UnsupportedShape> {
    if !wgmma_shape_supported(m, n, k, dtype, false) {
        return Err(UnsupportedShape { m, n, k, dtype });
    }
    Ok(u64::from(n).div_ceil(2).max(min_latency))
}

/// One queued WGMMA. `thread` and `gid` route the completion back to the
/// issuing WarpGroup's group table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcOp {
    pub latency: u64,
    pub thread: u32,
    pub gid: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcEvent {
    Completed { thread: u32, gid: u32 },
    Busy { thread: u32, gid: u32, start: u64, end: u64 },
}

/// The issue buffer is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferFull;

#[derive(Debug)]
pub struct TensorCore {
    capacity: usize,
    /// Waiting ops; the executing op is counted against capacity too.
    buffer: VecDeque<TcOp>,
    running: Option<(TcOp, u64, u64)>,
    busy_cycles: u64,
    events: Vec<TcEvent>,
}

impl TensorCore {
    pub fn new(capacity: u32) -> Self {
        Self {
            capacity: capacity as usize,
            buffer: VecDeque::new(),
            running: None,
            busy_cycles: 0,
            events: Vec::new(),
        }
    }

    pub fn occupancy(&self) -> usize {
        self.buffer.len() + usize::from(self.running.is_some())
    }

    pub fn enqueue(&mut self, op: TcOp) -> Result<(), BufferFull> {
        if self.occupancy() >= self.capacity {
            return Err(BufferFull);
        }
        self.buffer.push_back(op);
        Ok(())
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_none() && self.buffer.is_empty()
    }

    pub fn busy_cycles(&self) -> u64 {
        self.busy_cycles
    }

    /// Retires the running op if its latency has elapsed, then starts the
    /// next buffered op in the same cycle.
    pub fn tick(&mut self, now: u64) {
        if let Some((op, start, end)) = self.running {
            if end > now {
                return;
            }
            self.events.push(TcEvent::Completed { thread: op.thread, gid: op.gid });
            self.events.push(TcEvent::Busy { thread: op.thread, gid: op.gid, start, end });
            self.busy_cycles += end - start;
            self.running = None;
        }
        if let Some(op) = self.buffer.pop_front() {
            self.running = Some((op, now, now + op.latency));
        }
    }

    pub fn drain_events(&mut self) -> Vec<TcEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn next_tick(&self, now: u64) -> Option<u64> {
        match self.running {
            Some((_, _, end)) => Some(end.max(now + 1)),
            None if !self.buffer.is_empty() => Some(now + 1),
            None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latency_formula() {
        assert_eq!(wgmma_latency(64, 176, 16, Dtype::F16, 8), Ok(88));
        assert_eq!(wgmma_latency(64, 128, 16, Dtype::F16, 8), Ok(64));
        assert_eq!(wgmma_latency(64, 8, 16, Dtype::F16, 8), Ok(8));
        assert_eq!(wgmma_latency(64, 8, 16, Dtype::F16, 2), Ok(4));
        assert!(wgmma_latency(64, 176, 16, Dtype::Bf16, 8).is_err());
        assert!(wgmma_latency(128, 176, 16, Dtype::F16, 8).is_err());
        assert!(wgmma_latency(64, 12, 16, Dtype::F16, 8).is_err());
    }

    #[test]
    fn serial_group_drains_in_sum_of_latencies() {
        let mut tc = TensorCore::new(16);
        for _ in 0..8 {
            tc.enqueue(TcOp { latency: 88, thread: 0, gid: 0 }).unwrap();
        }
        let mut done = Vec::new();
        let mut busy = Vec::new();
        for now in 10..2000 {
            tc.tick(now);
            for e in tc.drain_events() {
                match e {
                    TcEvent::Completed { .. } => done.push(now),
                    TcEvent::Busy { start, end, .. } => busy.push((start, end)),
                }
            }
        }
        assert_eq!(done.len(), 8);
        assert_eq!(*done.last().unwrap() - 10, 8 * 88);
        assert!(busy.windows(2).all(|w| w[0].1 <= w[1].0));
        assert_eq!(tc.busy_cycles(), 704);
    }

    #[test]
    fn buffer_capacity_includes_running_op() {
        let mut tc = TensorCore::new(16);
        for _ in 0..16 {
            tc.enqueue(TcOp { latency: 8, thread: 0, gid: 0 }).unwrap();
        }
        assert_eq!(tc.enqueue(TcOp { latency: 8, thread: 0, gid: 0 }), Err(BufferFull));
        tc.tick(0);
        assert_eq!(tc.enqueue(TcOp { latency: 8, thread: 0, gid: 0 }), Err(BufferFull));
        tc.tick(8);
        assert!(tc.enqueue(TcOp { latency: 8, thread: 0, gid: 0 }).is_ok());
    }
}
