//! Mask-based fusion of the two heads' hard labels into panoptic output.
//! The semantic prediction provides an object mask: instance ids are
//! meaningless for stuff and ignore points and are discarded there.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::types::{ClassTaxonomy, PanopticLabel};

/// Fuse per-point semantic class ids and cluster ids.
///
/// Thing points keep their cluster id shifted by +1 (0 stays reserved for
/// "no instance"); stuff and ignore points get instance 0. A cluster whose
/// points span several semantic classes is split into per-class instances
/// with fresh ids so the output keeps one class per instance.
pub fn fuse(sem: &[u32], clusters: &[usize], taxonomy: &ClassTaxonomy) -> Result<PanopticLabel> {
    assert_eq!(sem.len(), clusters.len(), "sem and cluster lengths differ");

    let mut inst: Vec<u32> = sem
        .iter()
        .zip(clusters)
        .map(|(&s, &c)| {
            if taxonomy.is_thing(s) {
                c as u32 + 1
            } else {
                0
            }
        })
        .collect();

    // Classes seen per emitted id, and the id supply for splits.
    let mut classes_of: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (p, (&s, &i)) in sem.iter().zip(&inst).enumerate() {
        if i > 0 {
            classes_of.entry(i).or_default().entry(s).or_default().push(p);
        }
    }
    let mut next_id = classes_of.keys().max().map_or(1, |&m| m + 1);
    for (_, by_class) in classes_of.iter().filter(|(_, by_class)| by_class.len() > 1) {
        for points in by_class.values() {
            for &p in points {
                inst[p] = next_id;
            }
            next_id += 1;
        }
    }

    PanopticLabel::new(sem.to_vec(), inst, taxonomy)
}
