//! Stable logical board numbers over a shifting physical enumeration.
//!
//! Physical numbers are handed out in discovery order (chassis, then slot), so
//! removing a board renumbers everything after it. Applications address boards
//! by logical id instead; [`MappingTable::reconcile`] keeps the two in step and
//! reports any change that could lead to addressing the wrong board.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hardware::{BoardType, SlotAddress, Topology};
use crate::propdb::{PropertyDb, PropertyError, PropertyKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysicalNumber(pub u32);

/// Application-facing board id. Starts at 1; 0 means "unassigned" on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogicalId(pub u32);

impl fmt::Display for LogicalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enumerated {
    pub physical: PhysicalNumber,
    pub at: SlotAddress,
    pub board_type: BoardType,
}

/// One discovery pass over a topology generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enumeration {
    pub generation: u64,
    pub boards: Vec<Enumerated>,
}

/// Walks the topology in chassis/slot order, numbering boards 0, 1, 2, ...
pub fn enumerate(topology: &Topology) -> Enumeration {
    let boards = topology
        .boards()
        .enumerate()
        .map(|(i, (at, b))| Enumerated { physical: PhysicalNumber(i as u32), at, board_type: b.board_type() })
        .collect();
    Enumeration { generation: topology.generation(), boards }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindingState {
    Bound,
    Missing,
}

impl BindingState {
    fn as_str(self) -> &'static str {
        match self {
            BindingState::Bound => "bound",
            BindingState::Missing => "missing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalBinding {
    pub logical_id: LogicalId,
    pub board_type: BoardType,
    pub at: SlotAddress,
    pub last_seen_generation: u64,
    pub state: BindingState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    None,
    Trivial,
    NonTrivial,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeConflict {
    pub at: SlotAddress,
    /// The earlier binding at this slot, now missing.
    pub previous: LogicalId,
    pub previous_type: BoardType,
    /// The board found there instead, with its fresh logical id.
    pub found: LogicalId,
    pub found_type: BoardType,
}

/// What changed since the previous reconcile. Only transitions are reported,
/// so reconciling twice against the same enumeration reports nothing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub classification: Classification,
    /// Boards that became bound: fresh ids and restored missing bindings.
    pub added: Vec<LogicalBinding>,
    /// Bound bindings whose board disappeared.
    pub missing: Vec<LogicalBinding>,
    pub type_conflicts: Vec<TypeConflict>,
}

impl ChangeReport {
    /// One line per anomaly, e.g. `MISSING logical=2 type=adc8 at=0/2`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.missing {
            out.push_str(&format!("MISSING logical={} type={} at={}\n", b.logical_id, b.board_type, b.at));
        }
        for c in &self.type_conflicts {
            out.push_str(&format!(
                "CONFLICT logical={} type={} at={} found={} logical={}\n",
                c.previous, c.previous_type, c.at, c.found_type, c.found
            ));
        }
        for b in &self.added {
            out.push_str(&format!("ADDED logical={} type={} at={}\n", b.logical_id, b.board_type, b.at));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BoardRef {
    Logical(LogicalId),
    Slot(SlotAddress),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusMapError {
    #[error("unknown board reference {0:?}")]
    UnknownRef(BoardRef),
    #[error("logical board {0} is missing")]
    BindingMissing(LogicalId),
    #[error("mapping table reconciled at generation {reconciled:?}, topology is at {current}; reconcile required")]
    StaleGeneration { reconciled: Option<u64>, current: u64 },
    #[error("logical board {0} is still bound")]
    StillBound(LogicalId),
    #[error("corrupt stored mapping: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Store(#[from] PropertyError),
}

impl BusMapError {
    pub fn code(&self) -> &'static str {
        match self {
            BusMapError::UnknownRef(_) => "unknown-ref",
            BusMapError::BindingMissing(_) => "binding-missing",
            BusMapError::StaleGeneration { .. } => "stale-generation",
            BusMapError::StillBound(_) => "still-bound",
            BusMapError::Corrupt(_) => "corrupt-mapping",
            BusMapError::Store(e) => e.code(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappingTable {
    bindings: BTreeMap<LogicalId, LogicalBinding>,
    next_logical: u32,
    /// The enumeration of the last reconcile; resolve answers from it.
    last: Option<Enumeration>,
}

impl Default for MappingTable {
    fn default() -> Self {
        MappingTable { bindings: BTreeMap::new(), next_logical: 1, last: None }
    }
}

impl MappingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bindings(&self) -> impl Iterator<Item = &LogicalBinding> {
        self.bindings.values()
    }

    pub fn binding(&self, id: LogicalId) -> Option<&LogicalBinding> {
        self.bindings.get(&id)
    }

    pub fn next_logical(&self) -> u32 {
        self.next_logical
    }

    pub fn reconciled_generation(&self) -> Option<u64> {
        self.last.as_ref().map(|e| e.generation)
    }

    /// Bound binding currently at `at`, if any.
    pub fn bound_at(&self, at: SlotAddress) -> Option<&LogicalBinding> {
        self.bindings.values().find(|b| b.at == at && b.state == BindingState::Bound)
    }

    /// Matches the enumeration against the bindings by (slot, board type).
    ///
    /// The very first reconcile of an empty table is the initial discovery and
    /// classifies as `None`; later additions classify as `Trivial`.
    pub fn reconcile(&mut self, enumeration: &Enumeration) -> ChangeReport {
        let initial = self.last.is_none() && self.bindings.is_empty();
        let generation = enumeration.generation;
        let mut added = Vec::new();
        let mut missing = Vec::new();
        let mut type_conflicts = Vec::new();
        let mut matched = Vec::new();

        for e in &enumeration.boards {
            let hit = self
                .bindings
                .values_mut()
                .find(|b| b.at == e.at && b.board_type == e.board_type);
            match hit {
                Some(b) => {
                    let restored = b.state == BindingState::Missing;
                    b.state = BindingState::Bound;
                    b.last_seen_generation = generation;
                    matched.push(b.logical_id);
                    if restored {
                        added.push(b.clone());
                    }
                }
                None => {
                    let id = LogicalId(self.next_logical);
                    self.next_logical += 1;
                    let fresh = LogicalBinding {
                        logical_id: id,
                        board_type: e.board_type,
                        at: e.at,
                        last_seen_generation: generation,
                        state: BindingState::Bound,
                    };
                    let prior: Vec<_> = self
                        .bindings
                        .values()
                        .filter(|b| b.at == e.at && b.board_type != e.board_type)
                        .map(|b| (b.logical_id, b.board_type))
                        .collect();
                    for (previous, previous_type) in prior {
                        type_conflicts.push(TypeConflict {
                            at: e.at,
                            previous,
                            previous_type,
                            found: id,
                            found_type: e.board_type,
                        });
                    }
                    self.bindings.insert(id, fresh.clone());
                    matched.push(id);
                    added.push(fresh);
                }
            }
        }

        for b in self.bindings.values_mut() {
            if b.state == BindingState::Bound && !matched.contains(&b.logical_id) {
                b.state = BindingState::Missing;
                // a conflict already covers this slot
                if !type_conflicts.iter().any(|c| c.previous == b.logical_id) {
                    missing.push(b.clone());
                }
            }
        }

        let classification = if !missing.is_empty() || !type_conflicts.is_empty() {
            Classification::NonTrivial
        } else if !added.is_empty() && !initial {
            Classification::Trivial
        } else {
            Classification::None
        };
        self.last = Some(enumeration.clone());
        ChangeReport { classification, added, missing, type_conflicts }
    }

    /// Physical number of a bound board, refusing missing bindings and stale tables.
    pub fn resolve(&self, r: &BoardRef, current_generation: u64) -> Result<PhysicalNumber, BusMapError> {
        let last = self
            .last
            .as_ref()
            .filter(|e| e.generation == current_generation)
            .ok_or(BusMapError::StaleGeneration { reconciled: self.reconciled_generation(), current: current_generation })?;
        let binding = match r {
            BoardRef::Logical(id) => self.bindings.get(id).ok_or_else(|| BusMapError::UnknownRef(r.clone()))?,
            BoardRef::Slot(at) => self
                .bindings
                .values()
                .filter(|b| b.at == *at)
                .max_by_key(|b| (b.state == BindingState::Bound, b.logical_id))
                .ok_or_else(|| BusMapError::UnknownRef(r.clone()))?,
        };
        if binding.state == BindingState::Missing {
            return Err(BusMapError::BindingMissing(binding.logical_id));
        }
        last.boards
            .iter()
            .find(|e| e.at == binding.at && e.board_type == binding.board_type)
            .map(|e| e.physical)
            .ok_or(BusMapError::BindingMissing(binding.logical_id))
    }

    /// Checks that `id` is bound against the current generation and returns its binding.
    pub fn bound(&self, id: LogicalId, current_generation: u64) -> Result<&LogicalBinding, BusMapError> {
        self.resolve(&BoardRef::Logical(id), current_generation)?;
        Ok(&self.bindings[&id])
    }

    /// Drops a missing binding. Its id is never handed out again.
    pub fn forget(&mut self, id: LogicalId) -> Result<LogicalBinding, BusMapError> {
        match self.bindings.get(&id) {
            None => Err(BusMapError::UnknownRef(BoardRef::Logical(id))),
            Some(b) if b.state == BindingState::Bound => Err(BusMapError::StillBound(id)),
            Some(_) => Ok(self.bindings.remove(&id).expect("present")),
        }
    }

    /// Persists bindings under `busmap/<chassis>/<slot>:<logical>` plus `busmap:next`.
    pub fn save(&self, db: &PropertyDb) -> Result<(), BusMapError> {
        for key in db.keys_with_prefix("busmap/") {
            db.delete(&key)?;
        }
        for b in self.bindings.values() {
            let key = PropertyKey::new(&format!("busmap/{}/{}", b.at.chassis, b.at.slot), &b.logical_id.to_string())?;
            db.put(
                &key,
                vec![
                    b.board_type.to_string(),
                    b.state.as_str().to_string(),
                    b.last_seen_generation.to_string(),
                ],
            )?;
        }
        db.put(&PropertyKey::new("busmap", "next")?, vec![self.next_logical.to_string()])?;
        Ok(())
    }

    /// Loads a table saved by [`MappingTable::save`]. The result needs a
    /// reconcile before it can resolve anything.
    pub fn load(db: &PropertyDb) -> Result<Self, BusMapError> {
        let corrupt = |k: &PropertyKey| BusMapError::Corrupt(k.to_string());
        let mut table = MappingTable::new();
        for key in db.keys_with_prefix("busmap/") {
            let value = db.get(&key).unwrap_or_default();
            let mut parts = key.namespace().split('/').skip(1);
            let at = match (parts.next().map(str::parse), parts.next().map(str::parse), parts.next()) {
                (Some(Ok(chassis)), Some(Ok(slot)), None) => SlotAddress::new(chassis, slot),
                _ => return Err(corrupt(&key)),
            };
            let id: u32 = key.name().parse().map_err(|_| corrupt(&key))?;
            let [ty, state, seen] = value.as_slice() else { return Err(corrupt(&key)) };
            let binding = LogicalBinding {
                logical_id: LogicalId(id),
                board_type: ty.parse().map_err(|_| corrupt(&key))?,
                at,
                last_seen_generation: seen.parse().map_err(|_| corrupt(&key))?,
                state: match state.as_str() {
                    "bound" => BindingState::Bound,
                    "missing" => BindingState::Missing,
                    _ => return Err(corrupt(&key)),
                },
            };
            table.bindings.insert(binding.logical_id, binding);
        }
        let next_key = PropertyKey::new("busmap", "next")?;
        let stored_next = match db.get(&next_key) {
            Some(v) => v.first().and_then(|s| s.parse().ok()).ok_or_else(|| corrupt(&next_key))?,
            None => 1,
        };
        let floor = table.bindings.keys().last().map_or(1, |id| id.0 + 1);
        table.next_logical = stored_next.max(floor);
        Ok(table)
    }
}
