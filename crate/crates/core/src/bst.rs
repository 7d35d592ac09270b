//! Batch state table: a stack of sub-batches and the cursor each resumes at.
//!
//! The top entry is the active batch. Newly admitted requests are pushed on
//! top, run until their cursor equals the entry beneath, and then merge into
//! it. Only exact cursor equality merges.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Result, SimError};
use crate::model::NodeCursor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubBatchEntry {
    /// Sorted, non-empty.
    pub request_ids: Vec<u64>,
    pub next: NodeCursor,
    pub model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    /// The top entry absorbed `merges` entries beneath it.
    Merged {
        merges: usize,
    },
    NotMerged,
}

#[derive(Debug, Clone, Default)]
pub struct BatchStateTable {
    entries: Vec<SubBatchEntry>,
    position: HashMap<u64, usize>,
    probes: Cell<u64>,
}

impl BatchStateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn in_flight(&self) -> usize {
        self.position.len()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.position.contains_key(&id)
    }

    /// Entries bottom to top.
    pub fn entries(&self) -> &[SubBatchEntry] {
        &self.entries
    }

    /// Index of the entry holding `id`, counted from the bottom.
    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.position.get(&id).copied()
    }

    /// The active entry. Touches exactly one slot.
    pub fn active(&self) -> Option<&SubBatchEntry> {
        self.probes.set(self.probes.get() + 1);
        self.entries.last()
    }

    /// Number of entry slots inspected by `active` so far.
    pub fn probe_count(&self) -> u64 {
        self.probes.get()
    }

    pub fn push(&mut self, mut ids: Vec<u64>, start: NodeCursor, model: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(SimError::Empty("sub-batch request ids"));
        }
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SimError::DuplicateRequest(w[0]));
        }
        if let Some(&dup) = ids.iter().find(|id| self.position.contains_key(id)) {
            return Err(SimError::DuplicateRequest(dup));
        }
        let pos = self.entries.len();
        for &id in &ids {
            self.position.insert(id, pos);
        }
        self.entries.push(SubBatchEntry {
            request_ids: ids,
            next: start,
            model: model.to_string(),
        });
        Ok(())
    }

    /// Moves the top entry to `resume`, then merges downward while the two
    /// topmost entries share cursor and model.
    pub fn advance_top(&mut self, resume: NodeCursor) -> Result<MergeOutcome> {
        let top = self
            .entries
            .last_mut()
            .ok_or(SimError::Empty("batch state table"))?;
        top.next = resume;
        let mut merges = 0;
        while self.top_two_match() {
            self.merge_top_two();
            merges += 1;
        }
        Ok(if merges == 0 {
            MergeOutcome::NotMerged
        } else {
            MergeOutcome::Merged { merges }
        })
    }

    fn top_two_match(&self) -> bool {
        match self.entries.as_slice() {
            [.., below, top] => below.next == top.next && below.model == top.model,
            _ => false,
        }
    }

    fn merge_top_two(&mut self) {
        let top = self.entries.pop().expect("two entries");
        let below_pos = self.entries.len() - 1;
        let below = &mut self.entries[below_pos];
        for &id in &top.request_ids {
            self.position.insert(id, below_pos);
        }
        below.request_ids.extend(top.request_ids);
        below.request_ids.sort_unstable();
    }

    /// Removes `id`; drops its entry if that leaves it empty.
    pub fn retire(&mut self, id: u64) -> Result<()> {
        let pos = self
            .position
            .remove(&id)
            .ok_or(SimError::UnknownRequest(id))?;
        let entry = &mut self.entries[pos];
        let idx = entry
            .request_ids
            .binary_search(&id)
            .map_err(|_| SimError::Invariant(format!("request {id} missing from its entry")))?;
        entry.request_ids.remove(idx);
        if entry.request_ids.is_empty() {
            self.entries.remove(pos);
            if pos < self.entries.len() {
                self.reindex_from(pos);
                // Removing a middle entry can expose two equal neighbours.
                if pos > 0 {
                    let (a, b) = (&self.entries[pos - 1], &self.entries[pos]);
                    if a.next == b.next && a.model == b.model {
                        let upper = self.entries.remove(pos);
                        for &rid in &upper.request_ids {
                            self.position.insert(rid, pos - 1);
                        }
                        let lower = &mut self.entries[pos - 1];
                        lower.request_ids.extend(upper.request_ids);
                        lower.request_ids.sort_unstable();
                        self.reindex_from(pos);
                    }
                }
            }
        }
        Ok(())
    }

    fn reindex_from(&mut self, start: usize) {
        for (pos, e) in self.entries.iter().enumerate().skip(start) {
            for &id in &e.request_ids {
                self.position.insert(id, pos);
            }
        }
    }

    /// `ids@node:t` per entry, bottom to top, separated by `;`.
    pub fn dump(&self) -> String {
        dump_entries(
            self.entries
                .iter()
                .map(|e| (e.request_ids.as_slice(), e.next)),
        )
    }

    /// Checks the structural invariants; used by tests and debug assertions.
    pub fn check(&self) -> Result<()> {
        let mut seen = 0usize;
        for (pos, e) in self.entries.iter().enumerate() {
            if e.request_ids.is_empty() {
                return Err(SimError::Invariant(format!("entry {pos} is empty")));
            }
            if e.request_ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SimError::Invariant(format!(
                    "entry {pos} ids not sorted/unique"
                )));
            }
            for id in &e.request_ids {
                if self.position.get(id) != Some(&pos) {
                    return Err(SimError::Invariant(format!(
                        "index for request {id} is stale"
                    )));
                }
            }
            seen += e.request_ids.len();
        }
        if seen != self.position.len() {
            return Err(SimError::Invariant("index and entries disagree".into()));
        }
        for w in self.entries.windows(2) {
            if w[0].next == w[1].next && w[0].model == w[1].model {
                return Err(SimError::Invariant(format!(
                    "adjacent entries share cursor {}",
                    w[0].next
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn dump_entries<'a>(entries: impl Iterator<Item = (&'a [u64], NodeCursor)>) -> String {
    let mut out = String::new();
    for (i, (ids, cur)) in entries.enumerate() {
        if i > 0 {
            out.push(';');
        }
        for (j, id) in ids.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{id}");
        }
        let _ = write!(out, "@{cur}");
    }
    out
}
