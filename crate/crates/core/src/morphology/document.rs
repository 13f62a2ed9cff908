//! JSON morphology document (`morph_v1`).
//!
//! ```json
//! {"version": "morph_v1", "root": 0,
//!  "limbs": [{"id": 0, "parent": null, "slot": 0, "length": 0.55,
//!             "radius": 0.07, "rot_range": 1.1, "max_torque": 50.5}]}
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{JointAttr, Limb, LimbAttr, LimbId, MorphologyGraph};
use crate::error::{Error, Result};

pub const MORPH_VERSION: &str = "morph_v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbRecord {
    pub id: LimbId,
    pub parent: Option<LimbId>,
    pub slot: u32,
    pub length: f64,
    pub radius: f64,
    pub rot_range: f64,
    pub max_torque: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphDocument {
    pub version: String,
    pub root: LimbId,
    pub limbs: Vec<LimbRecord>,
}

impl MorphologyGraph {
    pub fn to_document(&self) -> MorphDocument {
        let limbs = self
            .preorder()
            .into_iter()
            .map(|id| {
                let l = &self.limbs[&id];
                LimbRecord {
                    id,
                    parent: l.parent,
                    slot: l.slot,
                    length: l.attr.length,
                    radius: l.attr.radius,
                    rot_range: l.joint.rotation_range,
                    max_torque: l.joint.max_torque,
                }
            })
            .collect();
        MorphDocument { version: MORPH_VERSION.to_string(), root: self.root, limbs }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MorphDocument =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("morphology document: {e}")))?;
        Self::from_document(&doc)
    }

    pub fn from_document(doc: &MorphDocument) -> Result<Self> {
        if doc.version != MORPH_VERSION {
            return Err(Error::Parse(format!(
                "field `version`: expected {MORPH_VERSION:?}, got {:?}",
                doc.version
            )));
        }
        let mut limbs: BTreeMap<LimbId, Limb> = BTreeMap::new();
        for (i, r) in doc.limbs.iter().enumerate() {
            for (name, v) in [
                ("length", r.length),
                ("radius", r.radius),
                ("rot_range", r.rot_range),
                ("max_torque", r.max_torque),
            ] {
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Parse(format!("limbs[{i}] field `{name}`: must be positive, got {v}")));
                }
            }
            let limb = Limb {
                parent: r.parent,
                slot: r.slot,
                attr: LimbAttr { length: r.length, radius: r.radius },
                joint: JointAttr { rotation_range: r.rot_range, max_torque: r.max_torque },
                children: Vec::new(),
            };
            if limbs.insert(r.id, limb).is_some() {
                return Err(Error::Parse(format!("limbs[{i}] field `id`: duplicate id {}", r.id)));
            }
        }
        match limbs.get(&doc.root) {
            None => return Err(Error::Parse(format!("field `root`: no limb with id {}", doc.root))),
            Some(l) if l.parent.is_some() => {
                return Err(Error::Parse("field `root`: root limb must have a null parent".into()))
            }
            _ => {}
        }
        let mut children: BTreeMap<LimbId, Vec<(u32, LimbId)>> = BTreeMap::new();
        for (&id, l) in &limbs {
            match l.parent {
                None if id != doc.root => {
                    return Err(Error::Parse(format!("limb {id} field `parent`: only the root may be parentless")))
                }
                None => {}
                Some(p) => {
                    if !limbs.contains_key(&p) {
                        return Err(Error::Parse(format!("limb {id} field `parent`: unknown limb {p}")));
                    }
                    if l.slot == 0 {
                        return Err(Error::Parse(format!("limb {id} field `slot`: must be ≥ 1")));
                    }
                    children.entry(p).or_default().push((l.slot, id));
                }
            }
        }
        // every limb must reach the root without revisiting
        for &start in limbs.keys() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = limbs[&cur].parent {
                cur = p;
                steps += 1;
                if steps > limbs.len() {
                    return Err(Error::Parse(format!("limb {start} field `parent`: parent links form a cycle")));
                }
            }
        }
        for (p, mut kids) in children {
            kids.sort_unstable();
            if kids.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Parse(format!("limb {p}: children share a slot")));
            }
            limbs.get_mut(&p).expect("checked").children = kids.into_iter().map(|(_, c)| c).collect();
        }
        MorphologyGraph::from_parts(limbs, doc.root).map_err(|e| Error::Parse(e.to_string()))
    }
}
