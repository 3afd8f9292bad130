use std::sync::{Condvar, Mutex, MutexGuard};

use thiserror::Error;

use crate::tasks::ProblemInstance;
use crate::updates::Rollout;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("prompt {0} is not ready")]
    NotReady(usize),
    #[error("unknown prompt id {0}")]
    Unknown(usize),
    #[error("prompt {0} was already served")]
    AlreadyServed(usize),
    #[error("prompt {0} was already written this round")]
    DuplicateWrite(usize),
    #[error("group for prompt {id} has {got} members, expected {expected}")]
    Incomplete { id: usize, got: usize, expected: usize },
    #[error("group for prompt {0} was generated by another snapshot")]
    WrongSnapshot(usize),
    #[error("round cannot close: {served} of {total} groups served")]
    NotDrained { served: usize, total: usize },
    #[error("round aborted: {0}")]
    Aborted(String),
}

/// The G rollouts of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: usize,
    pub instance: ProblemInstance,
    pub rollouts: Vec<Rollout>,
    pub snapshot_id: u64,
}

#[derive(Debug)]
enum Slot {
    Pending,
    Ready(Group),
    Served(Group),
}

#[derive(Debug)]
struct State {
    slots: Vec<Slot>,
    aborted: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupStatus {
    Pending,
    Ready,
    Served,
}

/// Write-once store of a round's groups, keyed by prompt id.
#[derive(Debug)]
pub struct RolloutCache {
    state: Mutex<State>,
    ready: Condvar,
    group_size: usize,
    snapshot_id: u64,
    strict: bool,
}

impl RolloutCache {
    /// `strict` makes a second serve of the same prompt an error; otherwise
    /// it returns the group again.
    pub fn new(prompts: usize, group_size: usize, snapshot_id: u64, strict: bool) -> Self {
        Self {
            state: Mutex::new(State { slots: (0..prompts).map(|_| Slot::Pending).collect(), aborted: None }),
            ready: Condvar::new(),
            group_size,
            snapshot_id,
            strict,
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot_id(&self) -> u64 {
        self.snapshot_id
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn len(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, group: Group) -> Result<(), CacheError> {
        let id = group.prompt_id;
        if group.rollouts.len() != self.group_size {
            return Err(CacheError::Incomplete { id, got: group.rollouts.len(), expected: self.group_size });
        }
        if group.snapshot_id != self.snapshot_id {
            return Err(CacheError::WrongSnapshot(id));
        }
        let mut st = self.lock();
        let slot = st.slots.get_mut(id).ok_or(CacheError::Unknown(id))?;
        if !matches!(slot, Slot::Pending) {
            return Err(CacheError::DuplicateWrite(id));
        }
        *slot = Slot::Ready(group);
        drop(st);
        self.ready.notify_all();
        Ok(())
    }

    fn take(&self, st: &mut State, id: usize) -> Result<Group, CacheError> {
        let slot = st.slots.get_mut(id).ok_or(CacheError::Unknown(id))?;
        match std::mem::replace(slot, Slot::Pending) {
            Slot::Ready(g) => {
                *slot = Slot::Served(g.clone());
                Ok(g)
            }
            Slot::Served(g) => {
                let out = if self.strict { Err(CacheError::AlreadyServed(id)) } else { Ok(g.clone()) };
                *slot = Slot::Served(g);
                out
            }
            Slot::Pending => Err(CacheError::NotReady(id)),
        }
    }

    /// Returns the complete group or `NotReady`; never partial data.
    pub fn serve_group(&self, id: usize) -> Result<Group, CacheError> {
        let mut st = self.lock();
        if let Some(msg) = &st.aborted {
            return Err(CacheError::Aborted(msg.clone()));
        }
        self.take(&mut st, id)
    }

    /// Blocks until the group is written or the round is aborted.
    pub fn wait_group(&self, id: usize) -> Result<Group, CacheError> {
        let mut st = self.lock();
        loop {
            if let Some(msg) = &st.aborted {
                return Err(CacheError::Aborted(msg.clone()));
            }
            match self.take(&mut st, id) {
                Err(CacheError::NotReady(_)) => {
                    st = self.ready.wait(st).unwrap_or_else(|e| e.into_inner());
                }
                other => return other,
            }
        }
    }

    pub fn abort(&self, msg: impl Into<String>) {
        let mut st = self.lock();
        st.aborted.get_or_insert_with(|| msg.into());
        drop(st);
        self.ready.notify_all();
    }

    pub fn aborted(&self) -> Option<String> {
        self.lock().aborted.clone()
    }

    pub fn status(&self) -> Vec<GroupStatus> {
        self.lock()
            .slots
            .iter()
            .map(|s| match s {
                Slot::Pending => GroupStatus::Pending,
                Slot::Ready(_) => GroupStatus::Ready,
                Slot::Served(_) => GroupStatus::Served,
            })
            .collect()
    }

    /// Every group has been written.
    pub fn is_complete(&self) -> bool {
        self.lock().slots.iter().all(|s| !matches!(s, Slot::Pending))
    }

    /// Every group has been served.
    pub fn is_drained(&self) -> bool {
        self.lock().slots.iter().all(|s| matches!(s, Slot::Served(_)))
    }

    /// Ends the round; fails unless every group was served.
    pub fn close(self) -> Result<(), CacheError> {
        let st = self.state.into_inner().unwrap_or_else(|e| e.into_inner());
        let served = st.slots.iter().filter(|s| matches!(s, Slot::Served(_))).count();
        if served != st.slots.len() {
            return Err(CacheError::NotDrained { served, total: st.slots.len() });
        }
        Ok(())
    }
}
