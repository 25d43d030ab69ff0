use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// The seven mutation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpId {
    MO1,
    MO2,
    MO3,
    MO4,
    MO5,
    MO6,
    MO7,
}

impl OpId {
    pub const ALL: [OpId; 7] = [
        OpId::MO1,
        OpId::MO2,
        OpId::MO3,
        OpId::MO4,
        OpId::MO5,
        OpId::MO6,
        OpId::MO7,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpId::MO1 => "MO1",
            OpId::MO2 => "MO2",
            OpId::MO3 => "MO3",
            OpId::MO4 => "MO4",
            OpId::MO5 => "MO5",
            OpId::MO6 => "MO6",
            OpId::MO7 => "MO7",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            OpId::MO1 => "replace an existing structure with a same-class catalog structure",
            OpId::MO2 => "scale a channel/unit extent",
            OpId::MO3 => "add or delete a structure in series",
            OpId::MO4 => "add or delete a parallel branch",
            OpId::MO5 => "change a layer parameter value",
            OpId::MO6 => "change the loss function",
            OpId::MO7 => "change the optimizer",
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One applied edit, kept so constraint bounds are auditable from the mutant alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "kebab-case")]
pub enum EditRecord {
    Replace {
        removed: Vec<String>,
        added: Vec<String>,
        template: String,
    },
    Resize {
        node: String,
        param: String,
        old: usize,
        new: usize,
    },
    Adapter {
        nodes: Vec<String>,
    },
    SeriesAdd {
        nodes: Vec<String>,
        template: String,
    },
    SeriesDelete {
        nodes: Vec<String>,
    },
    BranchAdd {
        site: String,
        nodes: Vec<String>,
        template: String,
    },
    BranchDelete {
        site: String,
        nodes: Vec<String>,
    },
    Param {
        node: String,
        param: String,
        old: f64,
        new: f64,
    },
    Loss {
        from: String,
        to: String,
    },
    Optimizer {
        from: String,
        to: String,
    },
}

impl EditRecord {
    /// Node ids named by the record.
    pub fn nodes(&self) -> Vec<&str> {
        match self {
            EditRecord::Replace { removed, added, .. } => removed.iter().chain(added).map(String::as_str).collect(),
            EditRecord::Resize { node, .. } | EditRecord::Param { node, .. } => vec![node.as_str()],
            EditRecord::Adapter { nodes } | EditRecord::SeriesAdd { nodes, .. } | EditRecord::SeriesDelete { nodes } => {
                nodes.iter().map(String::as_str).collect()
            }
            EditRecord::BranchAdd { site, nodes, .. } | EditRecord::BranchDelete { site, nodes } => {
                std::iter::once(site.as_str()).chain(nodes.iter().map(String::as_str)).collect()
            }
            EditRecord::Loss { .. } | EditRecord::Optimizer { .. } => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub seed_id: String,
    /// Depth of the original seed; anchors the series-edit budget.
    pub seed_depth: usize,
    pub mutation_history: Vec<OpId>,
    /// Last reward assigned to this model.
    pub reward: f64,
    pub select_num: u64,
    pub snums: [u64; 7],
    /// Nodes added or removed in series so far.
    pub series_edits: usize,
    /// Branches added per merge site.
    pub branch_adds: BTreeMap<String, usize>,
    pub edits: Vec<EditRecord>,
    /// How many trailing `edits` the latest mutation appended.
    #[serde(default)]
    pub last_edits: usize,
}

impl Lineage {
    pub fn root(seed_id: impl Into<String>, seed_depth: usize) -> Self {
        Self {
            seed_id: seed_id.into(),
            seed_depth,
            mutation_history: Vec::new(),
            reward: 0.0,
            select_num: 0,
            snums: [0; 7],
            series_edits: 0,
            branch_adds: BTreeMap::new(),
            edits: Vec::new(),
            last_edits: 0,
        }
    }

    /// Series budget in nodes: floor(20% of the seed depth).
    pub fn series_budget(&self) -> usize {
        self.seed_depth / 5
    }

    pub fn series_remaining(&self) -> usize {
        self.series_budget().saturating_sub(self.series_edits)
    }

    pub fn last_op(&self) -> Option<OpId> {
        self.mutation_history.last().copied()
    }

    /// Append the edits of one mutation.
    pub fn record_edits(&mut self, edits: Vec<EditRecord>) {
        self.last_edits = edits.len();
        self.edits.extend(edits);
    }

    pub fn latest_edits(&self) -> &[EditRecord] {
        &self.edits[self.edits.len() - self.last_edits.min(self.edits.len())..]
    }

    pub fn record_selection(&mut self, op: OpId) {
        self.select_num += 1;
        self.snums[op.index()] += 1;
    }
}

impl Default for Lineage {
    fn default() -> Self {
        Self::root("", 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_is_floor_of_fifth() {
        assert_eq!(Lineage::root("s", 10).series_budget(), 2);
        assert_eq!(Lineage::root("s", 15).series_budget(), 3);
        assert_eq!(Lineage::root("s", 7).series_budget(), 1);
        assert_eq!(Lineage::root("s", 4).series_budget(), 0);
    }

    #[test]
    fn selection_counters() {
        let mut l = Lineage::root("s", 10);
        l.record_selection(OpId::MO3);
        l.record_selection(OpId::MO3);
        l.record_selection(OpId::MO1);
        assert_eq!(l.select_num, 3);
        assert_eq!(l.snums.iter().sum::<u64>(), 3);
        assert_eq!(l.snums[OpId::MO3.index()], 2);
    }
}
