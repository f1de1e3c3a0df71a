//! Asynchronous event queue: threads parked on wait conditions, woken
//! when an event touching their SM makes the condition true.

use std::fmt;

use serde::Serialize;

/// What a stalled thread is waiting for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WaitCond {
    /// The stage's mbarrier has completed at least `need` fills.
    StageFilled { sid: u32, need: u32 },
    /// Every consumer released the stage's previous use.
    StageReleased { sid: u32, need: u32 },
    WgmmaDrain { gid: u32, max_outstanding: u32 },
    StoreDrain { gid: u32, max_outstanding: u32 },
    Barrier { bid: u32, count: u32 },
    /// Room in the tensor-core issue buffer.
    TensorCoreSlot,
}

impl fmt::Display for WaitCond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            WaitCond::StageFilled { sid, need } => write!(f, "stage {sid} fill #{need}"),
            WaitCond::StageReleased { sid, need } => write!(f, "stage {sid} to reach {need} releases"),
            WaitCond::WgmmaDrain { gid, max_outstanding } => {
                write!(f, "WGMMA groups <= {gid} to drain to {max_outstanding} outstanding")
            }
            WaitCond::StoreDrain { gid, max_outstanding } => {
                write!(f, "store groups <= {gid} to drain to {max_outstanding} outstanding")
            }
            WaitCond::Barrier { bid, count } => write!(f, "barrier {bid} to collect {count} arrivals"),
            WaitCond::TensorCoreSlot => f.write_str("a free tensor-core issue slot"),
        }
    }
}

#[derive(Debug, Default)]
pub struct AsyncEventQueue {
    waiters: Vec<Vec<(u32, WaitCond)>>,
    dirty: Vec<bool>,
}

impl AsyncEventQueue {
    pub fn new(num_sms: u32) -> Self {
        Self { waiters: vec![Vec::new(); num_sms as usize], dirty: vec![false; num_sms as usize] }
    }

    pub fn park(&mut self, sm: u32, thread: u32, cond: WaitCond) {
        debug_assert!(!self.waiters[sm as usize].iter().any(|(t, _)| *t == thread));
        self.waiters[sm as usize].push((thread, cond));
    }

    /// Notes that state visible to threads on `sm` changed.
    pub fn touch(&mut self, sm: u32) {
        self.dirty[sm as usize] = true;
    }

    pub fn is_dirty(&self, sm: u32) -> bool {
        self.dirty[sm as usize]
    }

    pub fn any_dirty(&self) -> bool {
        self.dirty.iter().any(|&d| d)
    }

    /// Removes and returns every waiter on a touched SM whose condition
    /// now holds, in parking order.
    pub fn wake(&mut self, sm: u32, mut holds: impl FnMut(u32, WaitCond) -> bool) -> Vec<u32> {
        let s = sm as usize;
        if !std::mem::take(&mut self.dirty[s]) {
            return Vec::new();
        }
        let mut woken = Vec::new();
        self.waiters[s].retain(|&(t, cond)| {
            if holds(t, cond) {
                woken.push(t);
                false
            } else {
                true
            }
        });
        woken
    }

    pub fn parked(&self) -> impl Iterator<Item = (u32, u32, WaitCond)> + '_ {
        self.waiters
            .iter()
            .enumerate()
            .flat_map(|(sm, ws)| ws.iter().map(move |&(t, c)| (sm as u32, t, c)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wakes_only_on_touched_sms() {
        let mut q = AsyncEventQueue::new(2);
        q.park(0, 5, WaitCond::Barrier { bid: 0, count: 1 });
        q.park(1, 6, WaitCond::TensorCoreSlot);
        assert!(q.wake(0, |_, _| true).is_empty());
        q.touch(0);
        assert_eq!(q.wake(0, |_, _| true), vec![5]);
        assert_eq!(q.parked().count(), 1);
        q.touch(1);
        assert!(q.wake(1, |_, _| false).is_empty());
        assert!(!q.is_dirty(1));
    }
}
