use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Group {
    committed: bool,
    outstanding: u32,
}

/// Per-thread async group bookkeeping for WGMMA groups and TMA store
/// groups: ops join an open group, a commit seals it, waits count sealed
/// groups that still have work in flight.
#[derive(Debug, Clone, Default)]
pub struct GroupTable {
    groups: BTreeMap<u32, Group>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GroupError {
    #[error("group {0} was already committed")]
    Sealed(u32),
    #[error("group {0} has nothing to commit")]
    Empty(u32),
}

impl GroupTable {
    pub fn join(&mut self, gid: u32) -> Result<(), GroupError> {
        let g = self.groups.entry(gid).or_default();
        if g.committed {
            return Err(GroupError::Sealed(gid));
        }
        g.outstanding += 1;
        Ok(())
    }

    pub fn commit(&mut self, gid: u32) -> Result<(), GroupError> {
        match self.groups.get_mut(&gid) {
            Some(g) if g.committed => Err(GroupError::Sealed(gid)),
            Some(g) => {
                g.committed = true;
                if g.outstanding == 0 {
                    self.groups.remove(&gid);
                }
                Ok(())
            }
            None => Err(GroupError::Empty(gid)),
        }
    }

    /// One op of `gid` finished.
    pub fn complete(&mut self, gid: u32) {
        let g = self.groups.get_mut(&gid).expect("completion for unknown group");
        g.outstanding -= 1;
        if g.committed && g.outstanding == 0 {
            self.groups.remove(&gid);
        }
    }

    /// Committed groups with id ≤ `gid` that still have work in flight.
    pub fn pending(&self, gid: u32) -> u32 {
        self.groups.range(..=gid).filter(|(_, g)| g.committed && g.outstanding > 0).count() as u32
    }

    /// No op of any group is still in flight.
    pub fn drained(&self) -> bool {
        self.groups.values().all(|g| g.outstanding == 0)
    }
}
