//! Product class taxonomy and the adaptive triplet margin.
//!
//! Classes live in a rooted tree; leaves are fine (instance-level) classes.
//! The margin between two leaves interpolates between a minimum and maximum
//! value according to the fraction of ancestors they share.

use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("no edges given")]
    Empty,
    #[error("cycle detected through class '{0}'")]
    Cycle(String),
    #[error("multiple roots: '{0}' and '{1}'")]
    MultipleRoots(String, String),
    #[error("class '{child}' has conflicting parents '{a}' and '{b}'")]
    ConflictingParents { child: String, a: String, b: String },
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("alpha_min {0} exceeds alpha_max {1}")]
    BadMargins(f32, f32),
}

/// Immutable rooted class tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TaxonomyTree {
    root: String,
    parent: HashMap<String, String>,
    nodes: HashSet<String>,
}

/// Builds a tree from (child, parent) pairs.
pub fn build_taxonomy(edges: &[(String, String)]) -> Result<TaxonomyTree, TaxonomyError> {
    if edges.is_empty() {
        return Err(TaxonomyError::Empty);
    }
    let mut parent: HashMap<String, String> = HashMap::new();
    let mut nodes: HashSet<String> = HashSet::new();
    for (child, par) in edges {
        nodes.insert(child.clone());
        nodes.insert(par.clone());
        if let Some(existing) = parent.get(child) {
            if existing != par {
                return Err(TaxonomyError::ConflictingParents {
                    child: child.clone(),
                    a: existing.clone(),
                    b: par.clone(),
                });
            }
        } else {
            parent.insert(child.clone(), par.clone());
        }
    }
    let mut root: Option<String> = None;
    for node in &nodes {
        if !parent.contains_key(node) {
            match &root {
                None => root = Some(node.clone()),
                Some(r) => {
                    let (a, b) = if r < node { (r.clone(), node.clone()) } else { (node.clone(), r.clone()) };
                    return Err(TaxonomyError::MultipleRoots(a, b));
                }
            }
        }
    }
    let root = root.ok_or_else(|| {
        // Every node has a parent, so some edge closes a cycle.
        TaxonomyError::Cycle(edges[0].0.clone())
    })?;
    // Walk each node to the root; revisiting a node on the same walk is a cycle.
    for node in &nodes {
        let mut seen = HashSet::new();
        let mut cur = node;
        while let Some(p) = parent.get(cur) {
            if !seen.insert(cur.clone()) {
                return Err(TaxonomyError::Cycle(cur.clone()));
            }
            cur = p;
        }
        if cur != &root {
            return Err(TaxonomyError::Cycle(node.clone()));
        }
    }
    Ok(TaxonomyTree { root, parent, nodes })
}

impl TaxonomyTree {
    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn contains(&self, class: &str) -> bool {
        self.nodes.contains(class)
    }

    pub fn is_leaf(&self, class: &str) -> bool {
        self.nodes.contains(class) && !self.parent.values().any(|p| p == class)
    }

    /// Strict ancestors of `leaf`, excluding the root and the leaf itself.
    pub fn ancestor_set(&self, leaf: &str) -> Result<HashSet<String>, TaxonomyError> {
        if !self.nodes.contains(leaf) {
            return Err(TaxonomyError::UnknownClass(leaf.to_string()));
        }
        let mut out = HashSet::new();
        let mut cur = leaf;
        while let Some(p) = self.parent.get(cur) {
            if p != &self.root {
                out.insert(p.clone());
            }
            cur = p;
        }
        Ok(out)
    }

    /// Margin interpolated by the shared-ancestor fraction:
    /// alpha_min + (1 - |H(a) n H(n)| / |H(a)|) * (alpha_max - alpha_min).
    /// A leaf directly under the root has an empty ancestor set and the
    /// shared fraction is taken as 0, giving alpha_max.
    pub fn hierarchical_margin(
        &self,
        class_a: &str,
        class_n: &str,
        alpha_min: f32,
        alpha_max: f32,
    ) -> Result<f32, TaxonomyError> {
        if alpha_min > alpha_max {
            return Err(TaxonomyError::BadMargins(alpha_min, alpha_max));
        }
        let ha = self.ancestor_set(class_a)?;
        let hn = self.ancestor_set(class_n)?;
        let shared = if ha.is_empty() {
            0.0
        } else {
            ha.intersection(&hn).count() as f32 / ha.len() as f32
        };
        Ok(alpha_min + (1.0 - shared) * (alpha_max - alpha_min))
    }
}

/// A product instance tied to a leaf of the taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductLabel {
    pub product_id: String,
    pub fine_class: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edges(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(c, p)| (c.to_string(), p.to_string())).collect()
    }

    #[test]
    fn builds_simple_tree() {
        let t = build_taxonomy(&edges(&[("Cereal", "Food"), ("Bakery", "Food"), ("K1", "Cereal")]))
            .unwrap();
        assert_eq!(t.root(), "Food");
        assert!(t.is_leaf("K1"));
        assert!(!t.is_leaf("Cereal"));
    }

    #[test]
    fn cycle_is_rejected() {
        let err = build_taxonomy(&edges(&[("A", "B"), ("B", "A")])).unwrap_err();
        assert!(matches!(err, TaxonomyError::Cycle(_)));
    }

    #[test]
    fn multiple_roots_rejected() {
        let err = build_taxonomy(&edges(&[("A", "R1"), ("B", "R2")])).unwrap_err();
        assert!(matches!(err, TaxonomyError::MultipleRoots(_, _)));
    }

    #[test]
    fn conflicting_parents_rejected() {
        let err = build_taxonomy(&edges(&[("A", "B"), ("A", "C"), ("B", "R"), ("C", "R")]))
            .unwrap_err();
        assert!(matches!(err, TaxonomyError::ConflictingParents { .. }));
    }

    #[test]
    fn grocery_food_macro_classes() {
        let macros = ["Bakery", "Biscuits", "Cereals", "Coffee", "Drinks"];
        let mut e = Vec::new();
        for m in macros {
            e.push((m.to_string(), "Food".to_string()));
            e.push((format!("{}_item", m), m.to_string()));
        }
        let t = build_taxonomy(&e).unwrap();
        assert_eq!(t.root(), "Food");
        for m in macros {
            assert!(t.contains(m) && !t.is_leaf(m));
        }
    }

    #[test]
    fn ancestor_set_excludes_root_and_leaf() {
        let t = build_taxonomy(&edges(&[("Cereal", "Food"), ("K1", "Cereal")])).unwrap();
        let h = t.ancestor_set("K1").unwrap();
        assert_eq!(h, ["Cereal".to_string()].into_iter().collect());
    }

    #[test]
    fn leaf_under_root_has_empty_ancestors() {
        let t = build_taxonomy(&edges(&[("K1", "Food"), ("K2", "Food")])).unwrap();
        assert!(t.ancestor_set("K1").unwrap().is_empty());
    }

    #[test]
    fn four_level_chain() {
        let t = build_taxonomy(&edges(&[("A", "Root"), ("B", "A"), ("L", "B")])).unwrap();
        let h = t.ancestor_set("L").unwrap();
        assert_eq!(h, ["A".to_string(), "B".to_string()].into_iter().collect());
    }

    #[test]
    fn unknown_leaf_errors() {
        let t = build_taxonomy(&edges(&[("A", "Root")])).unwrap();
        assert_eq!(t.ancestor_set("nope").unwrap_err(), TaxonomyError::UnknownClass("nope".into()));
    }

    #[test]
    fn margin_boundary_values() {
        // Fully shared ancestors -> alpha_min.
        let t = build_taxonomy(&edges(&[("Cereal", "Food"), ("K1", "Cereal"), ("K2", "Cereal")]))
            .unwrap();
        assert_eq!(t.hierarchical_margin("K1", "K2", 0.05, 0.5).unwrap(), 0.05);
        // Disjoint ancestors -> alpha_max.
        let t2 = build_taxonomy(&edges(&[
            ("Cereal", "Food"),
            ("Drinks", "Food"),
            ("K1", "Cereal"),
            ("D1", "Drinks"),
        ]))
        .unwrap();
        assert_eq!(t2.hierarchical_margin("K1", "D1", 0.05, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn margin_half_shared_midpoint() {
        // |H(a)| = 2, one shared ancestor, bounds 0.1/0.5 -> 0.3.
        let t = build_taxonomy(&edges(&[
            ("M", "Root"),
            ("S1", "M"),
            ("S2", "M"),
            ("A", "S1"),
            ("N", "S2"),
        ]))
        .unwrap();
        let alpha = t.hierarchical_margin("A", "N", 0.1, 0.5).unwrap();
        assert!((alpha - 0.3).abs() < 1e-7, "alpha = {}", alpha);
    }

    #[test]
    fn empty_ancestors_give_alpha_max() {
        let t = build_taxonomy(&edges(&[("K1", "Food"), ("K2", "Food")])).unwrap();
        assert_eq!(t.hierarchical_margin("K1", "K2", 0.1, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn bad_margin_order_rejected() {
        let t = build_taxonomy(&edges(&[("K1", "Food")])).unwrap();
        assert!(matches!(
            t.hierarchical_margin("K1", "K1", 0.5, 0.1),
            Err(TaxonomyError::BadMargins(_, _))
        ));
    }
}
