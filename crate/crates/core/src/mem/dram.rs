use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Access {
    slice: u32,
    line: u64,
    write: bool,
}

#[derive(Debug)]
struct Channel {
    queue: VecDeque<Access>,
    tokens: u64,
}

/// Fixed-latency DRAM with a per-channel token-bucket bandwidth limit.
/// Each channel serves its queue in FIFO order; a line leaves the queue
/// once the channel has accumulated a line's worth of byte tokens.
#[derive(Debug)]
pub struct Dram {
    channels: Vec<Channel>,
    latency: u64,
    bytes_per_cycle: u64,
    line_size: u64,
    bucket: u64,
    fills: BinaryHeap<Reverse<(u64, u32, u64)>>,
    last_tick: Option<u64>,
}

impl Dram {
    pub fn new(channels: u32, latency: u64, bytes_per_cycle: u64, line_size: u64) -> Self {
        let bucket = line_size.max(bytes_per_cycle);
        Self {
            channels: (0..channels).map(|_| Channel { queue: VecDeque::new(), tokens: bucket }).collect(),
            latency,
            bytes_per_cycle,
            line_size,
            bucket,
            fills: BinaryHeap::new(),
            last_tick: None,
        }
    }

    pub fn channel_of(&self, slice: u32) -> usize {
        slice as usize % self.channels.len()
    }

    pub fn enqueue_read(&mut self, slice: u32, line: u64) {
        let ch = self.channel_of(slice);
        self.channels[ch].queue.push_back(Access { slice, line, write: false });
    }

    pub fn enqueue_write(&mut self, slice: u32, line: u64) {
        let ch = self.channel_of(slice);
        self.channels[ch].queue.push_back(Access { slice, line, write: true });
    }

    /// Refills tokens for the cycles elapsed since the last tick and starts
    /// every access the budget allows.
    pub fn tick(&mut self, now: u64) {
        let elapsed = match self.last_tick {
            Some(t) => now.saturating_sub(t),
            None => 0,
        };
        self.last_tick = Some(now);
        let refill = elapsed.saturating_mul(self.bytes_per_cycle);
        for ch in &mut self.channels {
            ch.tokens = ch.tokens.saturating_add(refill);
            while ch.tokens >= self.line_size {
                let Some(acc) = ch.queue.pop_front() else { break };
                ch.tokens -= self.line_size;
                if !acc.write {
                    self.fills.push(Reverse((now + self.latency, acc.slice, acc.line)));
                }
            }
            // an idle channel banks at most one bucket
            ch.tokens = ch.tokens.min(self.bucket);
        }
    }

    /// Pops a fill that has arrived by `now`, as `(slice, line)`.
    pub fn pop_fill(&mut self, now: u64) -> Option<(u32, u64)> {
        match self.fills.peek() {
            Some(Reverse((t, _, _))) if *t <= now => {
                let Reverse((_, slice, line)) = self.fills.pop()?;
                Some((slice, line))
            }
            _ => None,
        }
    }

    pub fn has_queued(&self) -> bool {
        self.channels.iter().any(|c| !c.queue.is_empty())
    }

    pub fn next_fill(&self) -> Option<u64> {
        self.fills.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn is_idle(&self) -> bool {
        !self.has_queued() && self.fills.is_empty()
    }
}
