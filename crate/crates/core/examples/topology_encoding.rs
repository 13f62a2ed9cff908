//! Topology paths survive unrelated edits, so limbs keep their embedding
//! rows while the body around them changes.

use morphogen::morphology::{AttrRanges, DesignLimits, MorphologyGraph, TopoAction};
use morphogen::mosat::TopoRegistry;

fn show(label: &str, g: &MorphologyGraph, reg: &TopoRegistry) {
    println!("{label}:");
    for id in g.preorder() {
        let path = g.topo_path(id).unwrap();
        println!("  limb {id:>2}  depth {}  path {:<8}  row {:?}", g.depth(id).unwrap(), path.to_string(), reg.lookup(&path));
    }
}

fn main() -> morphogen::Result<()> {
    use TopoAction::*;
    let (r, limits) = (AttrRanges::default(), DesignLimits::default());
    let mut reg = TopoRegistry::new(64);

    let mut g = MorphologyGraph::chain(2, &r);
    g.apply_topo_actions(&[Addition, Addition], &limits, &r)?;
    reg.allocate_all(&g.paths())?;
    show("grown", &g, &reg);

    // grow at the root and drop the last leaf: the surviving limbs keep their rows
    let order = g.preorder();
    let last_leaf = *order.iter().rev().find(|&&id| g.is_leaf(id).unwrap()).expect("a tree has a leaf");
    let edit: Vec<TopoAction> = order
        .iter()
        .map(|&id| if id == g.root() { Addition } else if id == last_leaf { Deletion } else { NoChange })
        .collect();
    let demoted = g.apply_topo_actions(&edit, &limits, &r)?;
    reg.allocate_all(&g.paths())?;
    show("edited", &g, &reg);
    println!("demoted actions: {demoted}; registry holds {} of {} rows", reg.len(), reg.capacity());

    // deleting the root or an inner limb is demoted to a no-op
    let before = g.len();
    let demoted = g.apply_topo_actions(&vec![Deletion; g.len()], &limits, &r)?;
    println!("delete-all request: {before} -> {} limbs, {demoted} demoted", g.len());
    Ok(())
}
