//! Rooted-tree morphology: limbs, joints, topology/attribute edits and
//! topology paths.

mod document;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use document::{LimbRecord, MorphDocument, MORPH_VERSION};

pub type LimbId = u32;

/// Closed interval an attribute lives in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    /// Affine map from `[-1, 1]` onto the range, clamped.
    pub fn from_unit(&self, raw: f64) -> f64 {
        let half = 0.5 * (self.max - self.min);
        (self.mid() + raw * half).clamp(self.min, self.max)
    }

    /// Inverse of [`Range::from_unit`] for in-range values.
    pub fn to_unit(&self, value: f64) -> f64 {
        let half = 0.5 * (self.max - self.min);
        if half == 0.0 {
            0.0
        } else {
            (value - self.mid()) / half
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    /// Position of `v` inside the range, 0 at `min` and 1 at `max`.
    pub fn normalized(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

/// Attribute ranges for limbs and joints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrRanges {
    pub length: Range,
    pub radius: Range,
    pub rotation_range: Range,
    pub max_torque: Range,
}

impl Default for AttrRanges {
    fn default() -> Self {
        Self {
            length: Range::new(0.1, 1.0),
            radius: Range::new(0.02, 0.12),
            rotation_range: Range::new(0.2, 2.0),
            max_torque: Range::new(1.0, 100.0),
        }
    }
}

/// Structural caps on a morphology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignLimits {
    pub max_limbs: usize,
    pub max_depth: usize,
    pub max_children: usize,
    pub root_max_children: usize,
}

impl Default for DesignLimits {
    fn default() -> Self {
        Self { max_limbs: 16, max_depth: 4, max_children: 3, root_max_children: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimbAttr {
    pub length: f64,
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAttr {
    /// Full swing; the joint moves within `±rotation_range/2`.
    pub rotation_range: f64,
    pub max_torque: f64,
}

/// One limb. Every non-root limb owns the joint to its parent; the root's
/// joint record is carried along but unused.
#[derive(Clone, Debug, PartialEq)]
pub struct Limb {
    pub parent: Option<LimbId>,
    /// Creation-order index among the parent's children, starting at 1.
    pub slot: u32,
    pub attr: LimbAttr,
    pub joint: JointAttr,
    /// Children ordered by slot.
    pub children: Vec<LimbId>,
}

/// Per-limb topology edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TopoAction {
    Addition,
    Deletion,
    NoChange,
}

impl TopoAction {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            TopoAction::Addition => 0,
            TopoAction::Deletion => 1,
            TopoAction::NoChange => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(TopoAction::Addition),
            1 => Ok(TopoAction::Deletion),
            2 => Ok(TopoAction::NoChange),
            _ => Err(Error::Contract(format!("topology action index {i} out of range"))),
        }
    }
}

/// Child-slot sequence from the root down to a limb. Empty for the root.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TopoPath(pub Vec<u32>);

impl TopoPath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn slots(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for TopoPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, "]")
    }
}

/// Number of raw attribute values per limb: length, radius, rotation range,
/// max torque.
pub const ATTR_DIM: usize = 4;

/// Rooted tree of limbs.
#[derive(Clone, Debug)]
pub struct MorphologyGraph {
    limbs: BTreeMap<LimbId, Limb>,
    root: LimbId,
    next_id: LimbId,
    next_slot: BTreeMap<LimbId, u32>,
}

impl PartialEq for MorphologyGraph {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.limbs == other.limbs
    }
}

fn midpoint_attrs(ranges: &AttrRanges) -> (LimbAttr, JointAttr) {
    (
        LimbAttr { length: ranges.length.mid(), radius: ranges.radius.mid() },
        JointAttr {
            rotation_range: ranges.rotation_range.mid(),
            max_torque: ranges.max_torque.mid(),
        },
    )
}

impl MorphologyGraph {
    /// A single root limb with midpoint attributes.
    pub fn root_only(ranges: &AttrRanges) -> Self {
        let (attr, joint) = midpoint_attrs(ranges);
        let mut limbs = BTreeMap::new();
        limbs.insert(0, Limb { parent: None, slot: 0, attr, joint, children: Vec::new() });
        let mut next_slot = BTreeMap::new();
        next_slot.insert(0, 1);
        Self { limbs, root: 0, next_id: 1, next_slot }
    }

    /// A straight chain of `n ≥ 1` limbs, each the first child of the previous.
    pub fn chain(n: usize, ranges: &AttrRanges) -> Self {
        let mut g = Self::root_only(ranges);
        let mut tip = g.root;
        for _ in 1..n {
            tip = g.add_child(tip, ranges).expect("tip exists");
        }
        g
    }

    pub fn root(&self) -> LimbId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.limbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.limbs.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.limbs.values().filter(|l| l.parent.is_some()).count()
    }

    pub fn contains(&self, id: LimbId) -> bool {
        self.limbs.contains_key(&id)
    }

    pub fn limb(&self, id: LimbId) -> Result<&Limb> {
        self.limbs.get(&id).ok_or_else(|| Error::Lookup(format!("no limb with id {id}")))
    }

    fn limb_mut(&mut self, id: LimbId) -> Result<&mut Limb> {
        self.limbs.get_mut(&id).ok_or_else(|| Error::Lookup(format!("no limb with id {id}")))
    }

    pub fn limbs(&self) -> impl Iterator<Item = (LimbId, &Limb)> {
        self.limbs.iter().map(|(&id, l)| (id, l))
    }

    pub fn is_leaf(&self, id: LimbId) -> Result<bool> {
        Ok(self.limb(id)?.children.is_empty())
    }

    /// Depth-first preorder starting at the root, children by slot.
    pub fn preorder(&self) -> Vec<LimbId> {
        let mut out = Vec::with_capacity(self.limbs.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some(l) = self.limbs.get(&id) {
                stack.extend(l.children.iter().rev());
            }
        }
        out
    }

    pub fn depth(&self, id: LimbId) -> Result<usize> {
        let mut d = 0;
        let mut cur = self.limb(id)?;
        while let Some(p) = cur.parent {
            d += 1;
            cur = self.limb(p)?;
            if d > self.limbs.len() {
                return Err(Error::Invariant("cycle in parent links".into()));
            }
        }
        Ok(d)
    }

    pub fn max_depth(&self) -> usize {
        self.limbs.keys().filter_map(|&id| self.depth(id).ok()).max().unwrap_or(0)
    }

    pub fn topo_path(&self, id: LimbId) -> Result<TopoPath> {
        let mut slots = Vec::new();
        let mut cur = id;
        loop {
            let l = self.limb(cur)?;
            match l.parent {
                Some(p) => {
                    slots.push(l.slot);
                    cur = p;
                }
                None => break,
            }
            if slots.len() > self.limbs.len() {
                return Err(Error::Invariant("cycle in parent links".into()));
            }
        }
        slots.reverse();
        Ok(TopoPath(slots))
    }

    /// Paths of all limbs in preorder.
    pub fn paths(&self) -> Vec<TopoPath> {
        self.preorder().into_iter().map(|id| self.topo_path(id).expect("live limb")).collect()
    }

    /// Appends a child with midpoint attributes at the parent's next free slot.
    /// No cap checks.
    pub fn add_child(&mut self, parent: LimbId, ranges: &AttrRanges) -> Result<LimbId> {
        self.limb(parent)?;
        let slot = {
            let s = self.next_slot.entry(parent).or_insert(1);
            let slot = *s;
            *s += 1;
            slot
        };
        let id = self.next_id;
        self.next_id += 1;
        let (attr, joint) = midpoint_attrs(ranges);
        self.limbs.insert(id, Limb { parent: Some(parent), slot, attr, joint, children: Vec::new() });
        self.next_slot.insert(id, 1);
        self.limb_mut(parent)?.children.push(id);
        Ok(id)
    }

    /// Removes a non-root leaf and the joint to its parent.
    pub fn remove_leaf(&mut self, id: LimbId) -> Result<()> {
        let limb = self.limb(id)?;
        let Some(parent) = limb.parent else {
            return Err(Error::Contract("the root limb cannot be removed".into()));
        };
        if !limb.children.is_empty() {
            return Err(Error::Contract(format!("limb {id} is not a leaf")));
        }
        self.limbs.remove(&id);
        self.next_slot.remove(&id);
        self.limb_mut(parent)?.children.retain(|&c| c != id);
        Ok(())
    }

    fn child_cap(&self, id: LimbId, limits: &DesignLimits) -> usize {
        if id == self.root {
            limits.root_max_children
        } else {
            limits.max_children
        }
    }

    /// Applies one topology action per limb (given in preorder). Limbs are
    /// visited in the preorder captured before any edit. Illegal actions are
    /// demoted to `NoChange`; the number of demotions is returned.
    pub fn apply_topo_actions(
        &mut self,
        actions: &[TopoAction],
        limits: &DesignLimits,
        ranges: &AttrRanges,
    ) -> Result<usize> {
        let order = self.preorder();
        if actions.len() != order.len() {
            return Err(Error::Contract(format!(
                "{} topology actions for {} limbs",
                actions.len(),
                order.len()
            )));
        }
        let mut demoted = 0;
        for (&id, &action) in order.iter().zip(actions) {
            match action {
                TopoAction::NoChange => {}
                TopoAction::Addition => {
                    let limb = self.limb(id)?;
                    let legal = self.limbs.len() < limits.max_limbs
                        && self.depth(id)? < limits.max_depth
                        && limb.children.len() < self.child_cap(id, limits);
                    if legal {
                        self.add_child(id, ranges)?;
                    } else {
                        demoted += 1;
                    }
                }
                TopoAction::Deletion => {
                    let limb = self.limb(id)?;
                    if limb.parent.is_some() && limb.children.is_empty() {
                        self.remove_leaf(id)?;
                    } else {
                        demoted += 1;
                    }
                }
            }
        }
        self.validate(limits).map_err(|e| Error::Invariant(e.to_string()))?;
        Ok(demoted)
    }

    /// Sets attributes from raw per-limb vectors in `[-1, 1]` (preorder).
    /// Out-of-band values are clamped; the root's joint entries are ignored.
    pub fn apply_attr_actions(&mut self, raw: &[[f64; ATTR_DIM]], ranges: &AttrRanges) -> Result<()> {
        let order = self.preorder();
        if raw.len() != order.len() {
            return Err(Error::Contract(format!(
                "{} attribute vectors for {} limbs",
                raw.len(),
                order.len()
            )));
        }
        let root = self.root;
        for (&id, r) in order.iter().zip(raw) {
            let limb = self.limb_mut(id)?;
            limb.attr.length = ranges.length.from_unit(r[0]);
            limb.attr.radius = ranges.radius.from_unit(r[1]);
            if id != root {
                limb.joint.rotation_range = ranges.rotation_range.from_unit(r[2]);
                limb.joint.max_torque = ranges.max_torque.from_unit(r[3]);
            }
        }
        Ok(())
    }

    /// Raw vectors that [`MorphologyGraph::apply_attr_actions`] maps back onto
    /// the current attributes.
    pub fn attr_raw(&self, ranges: &AttrRanges) -> Vec<[f64; ATTR_DIM]> {
        self.preorder()
            .into_iter()
            .map(|id| {
                let l = &self.limbs[&id];
                [
                    ranges.length.to_unit(l.attr.length),
                    ranges.radius.to_unit(l.attr.radius),
                    ranges.rotation_range.to_unit(l.joint.rotation_range),
                    ranges.max_torque.to_unit(l.joint.max_torque),
                ]
            })
            .collect()
    }

    /// Checks the tree invariants and structural caps.
    pub fn validate(&self, limits: &DesignLimits) -> Result<()> {
        self.validate_tree()?;
        if self.limbs.len() > limits.max_limbs {
            return Err(Error::Invariant(format!(
                "{} limbs exceed the cap of {}",
                self.limbs.len(),
                limits.max_limbs
            )));
        }
        for &id in self.limbs.keys() {
            if self.depth(id)? > limits.max_depth {
                return Err(Error::Invariant(format!("limb {id} deeper than {}", limits.max_depth)));
            }
            if self.limbs[&id].children.len() > self.child_cap(id, limits) {
                return Err(Error::Invariant(format!("limb {id} has too many children")));
            }
        }
        Ok(())
    }

    /// Connected rooted tree with consistent parent/child links and unique
    /// sibling slots.
    pub fn validate_tree(&self) -> Result<()> {
        let root = self.limb(self.root)?;
        if root.parent.is_some() {
            return Err(Error::Invariant("root has a parent".into()));
        }
        for (&id, l) in &self.limbs {
            match l.parent {
                None if id != self.root => {
                    return Err(Error::Invariant(format!("limb {id} has no parent")));
                }
                Some(p) => {
                    let parent = self.limb(p)?;
                    if !parent.children.contains(&id) {
                        return Err(Error::Invariant(format!("limb {id} missing from parent {p}")));
                    }
                    if l.slot == 0 {
                        return Err(Error::Invariant(format!("limb {id} has slot 0")));
                    }
                }
                None => {}
            }
            let mut slots: Vec<u32> = Vec::with_capacity(l.children.len());
            for &c in &l.children {
                let child = self.limb(c)?;
                if child.parent != Some(id) {
                    return Err(Error::Invariant(format!("child {c} of {id} points elsewhere")));
                }
                if slots.contains(&child.slot) {
                    return Err(Error::Invariant(format!("duplicate slot {} under {id}", child.slot)));
                }
                slots.push(child.slot);
            }
            if slots.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Invariant(format!("children of {id} not ordered by slot")));
            }
        }
        let reached = self.preorder().len();
        if reached != self.limbs.len() {
            return Err(Error::Invariant(format!(
                "{} limbs reachable from root out of {}",
                reached,
                self.limbs.len()
            )));
        }
        if self.joint_count() + 1 != self.limbs.len() {
            return Err(Error::Invariant("joint count is not |V|-1".into()));
        }
        Ok(())
    }

    /// Checks every attribute against `ranges` (the root's joint excluded).
    pub fn validate_attrs(&self, ranges: &AttrRanges) -> Result<()> {
        for (&id, l) in &self.limbs {
            let ok = ranges.length.contains(l.attr.length)
                && ranges.radius.contains(l.attr.radius)
                && (id == self.root
                    || (ranges.rotation_range.contains(l.joint.rotation_range)
                        && ranges.max_torque.contains(l.joint.max_torque)));
            if !ok {
                return Err(Error::Invariant(format!("limb {id} has out-of-range attributes")));
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(limbs: BTreeMap<LimbId, Limb>, root: LimbId) -> Result<Self> {
        let next_id = limbs.keys().max().map_or(0, |m| m + 1);
        let next_slot = limbs
            .iter()
            .map(|(&id, l)| {
                let max = l.children.iter().map(|c| limbs[c].slot).max().unwrap_or(0);
                (id, max + 1)
            })
            .collect();
        let g = Self { limbs, root, next_id, next_slot };
        g.validate_tree()?;
        Ok(g)
    }
}
