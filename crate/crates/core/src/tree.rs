//! Decomposition trees and the bijection between leaf variances and the
//! (total variance, proportions) coordinates.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declarative tree description, as written in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeSpec {
    Leaf {
        leaf: String,
    },
    Split {
        split: String,
        children: Vec<TreeSpec>,
        /// Child whose share is the scalar ω of a binary split.
        #[serde(default)]
        omega_child: usize,
        /// Whether this split separates effects by flexibility.
        #[serde(default)]
        flexibility: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf { effect: String },
    Split {
        children: Vec<usize>,
        omega_child: usize,
        flexibility: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

/// Rooted tree; leaves carry effect ids, internal nodes are splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompTree {
    nodes: Vec<Node>,
    root: usize,
    splits: Vec<usize>,
    leaves: Vec<usize>,
}

/// Total variance plus one proportion vector per split (in
/// [`DecompTree::split_names`] order, entries in child order).
#[derive(Debug, Clone, PartialEq)]
pub struct HdParams {
    pub total: f64,
    pub proportions: Vec<Vec<f64>>,
}

impl DecompTree {
    pub fn from_spec(spec: &TreeSpec) -> Result<Self> {
        let mut nodes = Vec::new();
        let root = push_node(spec, &mut nodes)?;
        let mut tree = DecompTree {
            nodes,
            root,
            splits: Vec::new(),
            leaves: Vec::new(),
        };
        let mut order = Vec::new();
        tree.preorder(tree.root, &mut order);
        tree.splits = order.iter().copied().filter(|&i| tree.is_split(i)).collect();
        tree.leaves = order.iter().copied().filter(|&i| !tree.is_split(i)).collect();

        let mut seen = HashSet::new();
        for n in &tree.nodes {
            if !seen.insert(n.name.clone()) {
                return Err(Error::Specification(format!("duplicate tree node '{}'", n.name)));
            }
        }
        Ok(tree)
    }

    pub fn to_spec(&self) -> TreeSpec {
        self.spec_of(self.root)
    }

    fn spec_of(&self, i: usize) -> TreeSpec {
        let n = &self.nodes[i];
        match &n.kind {
            NodeKind::Leaf { effect } => TreeSpec::Leaf { leaf: effect.clone() },
            NodeKind::Split {
                children,
                omega_child,
                flexibility,
            } => TreeSpec::Split {
                split: n.name.clone(),
                children: children.iter().map(|&c| self.spec_of(c)).collect(),
                omega_child: *omega_child,
                flexibility: *flexibility,
            },
        }
    }

    fn is_split(&self, i: usize) -> bool {
        matches!(self.nodes[i].kind, NodeKind::Split { .. })
    }

    fn preorder(&self, i: usize, out: &mut Vec<usize>) {
        out.push(i);
        if let NodeKind::Split { children, .. } = &self.nodes[i].kind {
            for &c in children {
                self.preorder(c, out);
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.leaves
            .iter()
            .map(|&i| match &self.nodes[i].kind {
                NodeKind::Leaf { effect } => effect.clone(),
                _ => unreachable!(),
            })
            .collect()
    }

    pub fn split_names(&self) -> Vec<String> {
        self.splits.iter().map(|&i| self.nodes[i].name.clone()).collect()
    }

    pub fn n_splits(&self) -> usize {
        self.splits.len()
    }

    pub fn split_index(&self, name: &str) -> Option<usize> {
        self.splits.iter().position(|&i| self.nodes[i].name == name)
    }

    /// Number of children, designated ω child and flexibility flag of split
    /// `s` (index into split order).
    pub fn split_info(&self, s: usize) -> (usize, usize, bool) {
        match &self.nodes[self.splits[s]].kind {
            NodeKind::Split {
                children,
                omega_child,
                flexibility,
            } => (children.len(), *omega_child, *flexibility),
            _ => unreachable!(),
        }
    }

    /// Child names of split `s`.
    pub fn split_children(&self, s: usize) -> Vec<String> {
        match &self.nodes[self.splits[s]].kind {
            NodeKind::Split { children, .. } => children.iter().map(|&c| self.nodes[c].name.clone()).collect(),
            _ => unreachable!(),
        }
    }

    /// Checks that the leaves are exactly `ids` (each once).
    pub fn check_leaves(&self, ids: &[String]) -> Result<()> {
        let leaves: HashSet<_> = self.leaf_ids().into_iter().collect();
        let wanted: HashSet<_> = ids.iter().cloned().collect();
        if leaves != wanted || ids.len() != wanted.len() {
            let missing: Vec<_> = wanted.difference(&leaves).cloned().collect();
            let extra: Vec<_> = leaves.difference(&wanted).cloned().collect();
            return Err(Error::Specification(format!(
                "tree leaves do not match effects (missing {missing:?}, unknown {extra:?})"
            )));
        }
        Ok(())
    }

    /// Dimension of the unconstrained coordinate vector.
    pub fn n_coords(&self) -> usize {
        1 + (0..self.n_splits()).map(|s| self.split_info(s).0 - 1).sum::<usize>()
    }

    /// Names of the unconstrained coordinates.
    pub fn coord_names(&self) -> Vec<String> {
        let mut out = vec!["log_V".to_string()];
        for (s, name) in self.split_names().into_iter().enumerate() {
            let (p, _, _) = self.split_info(s);
            if p == 2 {
                out.push(format!("logit_{name}"));
            } else {
                let kids = self.split_children(s);
                for kid in kids.iter().take(p - 1) {
                    out.push(format!("alr_{name}[{kid}]"));
                }
            }
        }
        out
    }

    /// `σ²_leaf = V · ∏ proportions on the root-to-leaf path`, leaf order.
    pub fn to_variances(&self, p: &HdParams) -> Result<Vec<f64>> {
        self.check_params(p)?;
        let mut out = vec![0.0; self.leaves.len()];
        self.push_down(self.root, p.total, p, &mut out);
        Ok(out)
    }

    fn push_down(&self, i: usize, mass: f64, p: &HdParams, out: &mut [f64]) {
        match &self.nodes[i].kind {
            NodeKind::Leaf { .. } => {
                let pos = self.leaves.iter().position(|&l| l == i).unwrap();
                out[pos] = mass;
            }
            NodeKind::Split { children, .. } => {
                let s = self.splits.iter().position(|&x| x == i).unwrap();
                for (c, &child) in children.iter().enumerate() {
                    self.push_down(child, mass * p.proportions[s][c], p, out);
                }
            }
        }
    }

    fn check_params(&self, p: &HdParams) -> Result<()> {
        if p.proportions.len() != self.n_splits() {
            return Err(Error::Dimension(format!(
                "{} proportion vectors for {} splits",
                p.proportions.len(),
                self.n_splits()
            )));
        }
        for s in 0..self.n_splits() {
            let (n, _, _) = self.split_info(s);
            if p.proportions[s].len() != n {
                return Err(Error::Dimension(format!(
                    "split '{}' has {n} children but {} proportions",
                    self.nodes[self.splits[s]].name,
                    p.proportions[s].len()
                )));
            }
        }
        Ok(())
    }

    /// Inverse of [`to_variances`](Self::to_variances). Splits whose parent
    /// sum is zero are mapped to the barycenter; their names are returned.
    pub fn from_variances(&self, sigma2: &[f64]) -> Result<(HdParams, Vec<String>)> {
        if sigma2.len() != self.leaves.len() {
            return Err(Error::Dimension(format!(
                "{} variances for {} leaves",
                sigma2.len(),
                self.leaves.len()
            )));
        }
        if sigma2.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Validation("variances must be finite and non-negative".into()));
        }
        let total: f64 = sigma2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateSplit("root".into()));
        }
        let mut sums = vec![0.0; self.nodes.len()];
        self.subtree_sums(self.root, sigma2, &mut sums);
        let mut degenerate = Vec::new();
        let proportions = self
            .splits
            .iter()
            .map(|&i| {
                let NodeKind::Split { children, .. } = &self.nodes[i].kind else { unreachable!() };
                if sums[i] > 0.0 {
                    children.iter().map(|&c| sums[c] / sums[i]).collect()
                } else {
                    degenerate.push(self.nodes[i].name.clone());
                    vec![1.0 / children.len() as f64; children.len()]
                }
            })
            .collect();
        Ok((HdParams { total, proportions }, degenerate))
    }

    fn subtree_sums(&self, i: usize, sigma2: &[f64], sums: &mut [f64]) -> f64 {
        let v = match &self.nodes[i].kind {
            NodeKind::Leaf { .. } => sigma2[self.leaves.iter().position(|&l| l == i).unwrap()],
            NodeKind::Split { children, .. } => children.iter().map(|&c| self.subtree_sums(c, sigma2, sums)).sum(),
        };
        sums[i] = v;
        v
    }

    /// Map-keyed convenience wrapper around [`to_variances`](Self::to_variances).
    pub fn variance_map(&self, p: &HdParams) -> Result<BTreeMap<String, f64>> {
        Ok(self.leaf_ids().into_iter().zip(self.to_variances(p)?).collect())
    }

    /// Unconstrained coordinates: `log V`; logit of the designated share for
    /// binary splits; additive log-ratios against the last child otherwise.
    pub fn to_unconstrained(&self, p: &HdParams) -> Result<DVector<f64>> {
        self.check_params(p)?;
        if !(p.total > 0.0) || !p.total.is_finite() {
            return Err(Error::Boundary(format!("total variance {} is not in (0, ∞)", p.total)));
        }
        let mut out = vec![p.total.ln()];
        for s in 0..self.n_splits() {
            let (n, omega_child, _) = self.split_info(s);
            let props = &p.proportions[s];
            if props.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::Boundary(format!(
                    "split '{}' has a proportion on the simplex boundary",
                    self.split_names()[s]
                )));
            }
            if n == 2 {
                let w = props[omega_child];
                out.push((w / (1.0 - w)).ln());
            } else {
                let last = props[n - 1];
                out.extend(props[..n - 1].iter().map(|v| (v / last).ln()));
            }
        }
        Ok(DVector::from_vec(out))
    }

    /// Inverse of [`to_unconstrained`](Self::to_unconstrained) together with
    /// `log |∂θ/∂y|`, where `θ` collects `V`, the designated share of each
    /// binary split and the first `P − 1` shares of each multi-way split.
    pub fn from_unconstrained(&self, y: &DVector<f64>) -> Result<(HdParams, f64)> {
        if y.len() != self.n_coords() {
            return Err(Error::Dimension(format!(
                "{} unconstrained coordinates, expected {}",
                y.len(),
                self.n_coords()
            )));
        }
        let total = y[0].exp();
        let mut log_jac = y[0];
        let mut pos = 1;
        let mut proportions = Vec::with_capacity(self.n_splits());
        for s in 0..self.n_splits() {
            let (n, omega_child, _) = self.split_info(s);
            let props = if n == 2 {
                let w = crate::numeric::logistic(y[pos]);
                pos += 1;
                let mut v = vec![1.0 - w; 2];
                v[omega_child] = w;
                v
            } else {
                let coords = y.rows(pos, n - 1);
                pos += n - 1;
                softmax_with_reference(coords.as_slice())
            };
            log_jac += props.iter().map(|v| v.ln()).sum::<f64>();
            proportions.push(props);
        }
        let p = HdParams { total, proportions };
        if !total.is_finite() || p.proportions.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Boundary("unconstrained coordinates map to the boundary".into()));
        }
        Ok((p, log_jac))
    }
}

fn softmax_with_reference(coords: &[f64]) -> Vec<f64> {
    let m = coords.iter().cloned().fold(0.0_f64, f64::max);
    let mut e: Vec<f64> = coords.iter().map(|c| (c - m).exp()).collect();
    e.push((-m).exp());
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn push_node(spec: &TreeSpec, nodes: &mut Vec<Node>) -> Result<usize> {
    match spec {
        TreeSpec::Leaf { leaf } => {
            nodes.push(Node {
                name: leaf.clone(),
                kind: NodeKind::Leaf { effect: leaf.clone() },
            });
            Ok(nodes.len() - 1)
        }
        TreeSpec::Split {
            split,
            children,
            omega_child,
            flexibility,
        } => {
            if children.len() < 2 {
                return Err(Error::Specification(format!(
                    "split '{split}' must have at least two children"
                )));
            }
            if *omega_child >= children.len() {
                return Err(Error::Specification(format!(
                    "split '{split}': omega_child {omega_child} out of range"
                )));
            }
            let idx = nodes.len();
            nodes.push(Node {
                name: split.clone(),
                kind: NodeKind::Leaf { effect: String::new() },
            });
            let kids = children
                .iter()
                .map(|c| push_node(c, nodes))
                .collect::<Result<Vec<_>>>()?;
            nodes[idx].kind = NodeKind::Split {
                children: kids,
                omega_child: *omega_child,
                flexibility: *flexibility,
            };
            Ok(idx)
        }
    }
}

/// Which branch of the first split an effect belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Abiotic,
    Biotic,
}

/// Tags driving the default tree.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectTag {
    pub id: String,
    pub side: Side,
    pub interaction: bool,
    /// Covariate group (e.g. the covariate name, "space", "time").
    pub group: String,
    /// Higher is more flexible; orders the binary flexibility splits.
    pub flexibility: u32,
}

/// Default tree: abiotic vs biotic; main vs interaction (pruned when one
/// side has no interactions); one branch per covariate group; binary
/// flexibility splits until every leaf is a single effect.
pub fn build_default_tree(tags: &[EffectTag]) -> Result<DecompTree> {
    if tags.is_empty() {
        return Err(Error::Specification("model has no effects".into()));
    }
    let mut ids = HashSet::new();
    for t in tags {
        if t.id.is_empty() || t.group.is_empty() {
            return Err(Error::Specification(format!("effect '{}' lacks tags", t.id)));
        }
        if !ids.insert(&t.id) {
            return Err(Error::Specification(format!("duplicate effect id '{}'", t.id)));
        }
    }
    let abiotic: Vec<_> = tags.iter().filter(|t| t.side == Side::Abiotic).collect();
    let biotic: Vec<_> = tags.iter().filter(|t| t.side == Side::Biotic).collect();
    let sides: Vec<TreeSpec> = [(abiotic, "A", "X"), (biotic, "B", "S")]
        .into_iter()
        .filter(|(v, _, _)| !v.is_empty())
        .map(|(v, side, level3)| side_node(&v, side, level3))
        .collect();
    let spec = if sides.len() == 2 {
        TreeSpec::Split {
            split: "omega_A".into(),
            children: sides,
            omega_child: 0,
            flexibility: false,
        }
    } else {
        sides.into_iter().next().unwrap()
    };
    DecompTree::from_spec(&spec)
}

fn side_node(tags: &[&EffectTag], side: &str, level3: &str) -> TreeSpec {
    let mains: Vec<_> = tags.iter().copied().filter(|t| !t.interaction).collect();
    let inters: Vec<_> = tags.iter().copied().filter(|t| t.interaction).collect();
    match (mains.is_empty(), inters.is_empty()) {
        (false, false) => TreeSpec::Split {
            split: format!("omega_{side}I"),
            children: vec![
                group_node(&mains, &format!("omega_{level3}")),
                group_node(&inters, &format!("omega_{level3}I")),
            ],
            omega_child: 1,
            flexibility: true,
        },
        (false, true) => group_node(&mains, &format!("omega_{level3}")),
        _ => group_node(&inters, &format!("omega_{level3}I")),
    }
}

fn group_node(tags: &[&EffectTag], name: &str) -> TreeSpec {
    let mut groups: Vec<(String, Vec<&EffectTag>)> = Vec::new();
    for t in tags {
        match groups.iter_mut().find(|(g, _)| g == &t.group) {
            Some((_, v)) => v.push(t),
            None => groups.push((t.group.clone(), vec![t])),
        }
    }
    let mut children: Vec<TreeSpec> = groups
        .into_iter()
        .map(|(g, mut members)| {
            members.sort_by_key(|t| t.flexibility);
            flexibility_chain(&members, &g, 1)
        })
        .collect();
    if children.len() == 1 {
        children.pop().unwrap()
    } else {
        TreeSpec::Split {
            split: name.to_string(),
            children,
            omega_child: 0,
            flexibility: false,
        }
    }
}

fn flexibility_chain(members: &[&EffectTag], group: &str, depth: usize) -> TreeSpec {
    if members.len() == 1 {
        return TreeSpec::Leaf {
            leaf: members[0].id.clone(),
        };
    }
    let name = if depth == 1 {
        format!("omega_N_{group}")
    } else {
        format!("omega_N_{group}_{depth}")
    };
    TreeSpec::Split {
        split: name,
        children: vec![
            TreeSpec::Leaf {
                leaf: members[0].id.clone(),
            },
            flexibility_chain(&members[1..], group, depth + 1),
        ],
        omega_child: 1,
        flexibility: true,
    }
}
