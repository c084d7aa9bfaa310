use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MultiSbtOverlay, OverlayError, PeerId, SbtTree};

/// One tree in the exchange format. `parents` maps child to parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDoc {
    pub levels: Vec<Vec<PeerId>>,
    pub parents: BTreeMap<PeerId, PeerId>,
}

/// JSON exchange document for an overlay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayDoc {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub rosters: Vec<Vec<PeerId>>,
    pub trees: Vec<TreeDoc>,
}

impl OverlayDoc {
    pub fn from_overlay(o: &MultiSbtOverlay) -> Self {
        let trees = o
            .trees()
            .into_iter()
            .map(|t| {
                let parents = t
                    .levels
                    .iter()
                    .zip(&t.parents)
                    .flat_map(|(l, p)| l.iter().copied().zip(p.iter().copied()))
                    .collect();
                TreeDoc {
                    levels: t.levels,
                    parents,
                }
            })
            .collect();
        OverlayDoc {
            n: o.n(),
            k: o.depth(),
            p: o.period(),
            rosters: o.rosters().iter().map(|r| r.peers.clone()).collect(),
            trees,
        }
    }

    /// Rebuilds the overlay. Only the shape is checked here; a document
    /// that breaks the scheduling guarantees still imports, so that the
    /// validators can report what is wrong with it.
    pub fn to_overlay(&self) -> Result<MultiSbtOverlay, OverlayError> {
        if self.trees.len() != self.p {
            return Err(OverlayError::Malformed(format!(
                "P = {} but {} trees",
                self.p,
                self.trees.len()
            )));
        }
        let mut trees = Vec::with_capacity(self.trees.len());
        for (i, t) in self.trees.iter().enumerate() {
            if t.levels.len() != self.k + 1 {
                return Err(OverlayError::Malformed(format!(
                    "tree {i} has {} levels, K = {}",
                    t.levels.len(),
                    self.k
                )));
            }
            let mut parents = vec![Vec::new(); t.levels.len()];
            for (k, level) in t.levels.iter().enumerate().skip(1) {
                for child in level {
                    let p = t.parents.get(child).ok_or_else(|| {
                        OverlayError::Malformed(format!("tree {i}: peer {child} has no parent"))
                    })?;
                    parents[k].push(*p);
                }
            }
            trees.push(SbtTree {
                levels: t.levels.clone(),
                parents,
            });
        }
        let o = MultiSbtOverlay::from_trees(trees)?;
        if o.n() != self.n {
            return Err(OverlayError::Malformed(format!(
                "N = {} but trees hold {} peers",
                self.n,
                o.n()
            )));
        }
        Ok(o)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("overlay document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, OverlayError> {
        serde_json::from_str(s).map_err(|e| OverlayError::Malformed(e.to_string()))
    }
}

impl MultiSbtOverlay {
    /// Same peer count, depth, period and trees (ignores how the trees are stored).
    pub fn same_structure(&self, other: &MultiSbtOverlay) -> bool {
        self.n() == other.n()
            && self.depth() == other.depth()
            && self.period() == other.period()
            && self.trees() == other.trees()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::{build_overlay, peers, LevelPolicy};

    #[test]
    fn round_trip() {
        for n in [2u32, 5, 16, 20] {
            let o = build_overlay(&peers(0..n), &LevelPolicy::Auto).unwrap();
            let doc = OverlayDoc::from_overlay(&o);
            let back = OverlayDoc::from_json(&doc.to_json()).unwrap().to_overlay().unwrap();
            assert!(o.same_structure(&back), "N = {n}");
            assert!(!back.is_periodic());
        }
    }

    #[test]
    fn json_field_names() {
        let o = build_overlay(&peers(0..2), &LevelPolicy::Auto).unwrap();
        let v: serde_json::Value = serde_json::from_str(&OverlayDoc::from_overlay(&o).to_json()).unwrap();
        assert_eq!(v["N"], 2);
        assert_eq!(v["K"], 1);
        assert_eq!(v["P"], 1);
        assert_eq!(v["trees"][0]["parents"]["1"], 0);
    }

    #[test]
    fn missing_parent_rejected() {
        let o = build_overlay(&peers(0..4), &LevelPolicy::Auto).unwrap();
        let mut doc = OverlayDoc::from_overlay(&o);
        let child = doc.trees[0].levels[1][0];
        doc.trees[0].parents.remove(&child);
        assert!(doc.to_overlay().is_err());
    }
}
