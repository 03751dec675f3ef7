use rayon::prelude::*;

use crate::error::{Error, Result};

/// Hessians are floored at this value before split search.
pub const HESSIAN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Binary regression tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn newton_value(g: f64, h: f64) -> f64 {
    -g / h
}

fn score(g: f64, h: f64) -> f64 {
    g * g / h
}

/// Best split of `idx` on one feature; candidates lie between distinct
/// consecutive sorted values and use the lower value as threshold.
fn best_split_on(
    feature: usize,
    x: &[Vec<f64>],
    idx: &[usize],
    grad: &[f64],
    hess: &[f64],
    min_leaf: usize,
) -> Option<BestSplit> {
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| x[a][feature].total_cmp(&x[b][feature]).then(a.cmp(&b)));
    let g_tot: f64 = order.iter().map(|&i| grad[i]).sum();
    let h_tot: f64 = order.iter().map(|&i| hess[i]).sum();
    let parent = score(g_tot, h_tot);
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut best: Option<BestSplit> = None;
    for k in 0..order.len() - 1 {
        gl += grad[order[k]];
        hl += hess[order[k]];
        let left_n = k + 1;
        if left_n < min_leaf || order.len() - left_n < min_leaf {
            continue;
        }
        let (v, next) = (x[order[k]][feature], x[order[k + 1]][feature]);
        if v == next {
            continue;
        }
        let gain = score(gl, hl) + score(g_tot - gl, h_tot - hl) - parent;
        if best.as_ref().is_none_or(|b| gain > b.gain) {
            best = Some(BestSplit {
                gain,
                feature,
                threshold: v,
            });
        }
    }
    best
}

impl RegressionTree {
    /// A single-leaf tree.
    pub fn constant(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Preorder text form: `S <feature> <threshold>` for splits, `L <value>` for leaves.
    pub fn to_preorder(&self) -> Vec<String> {
        fn walk(nodes: &[Node], i: usize, out: &mut Vec<String>) {
            match nodes[i] {
                Node::Leaf { value } => out.push(format!("L {value:e}")),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push(format!("S {feature} {threshold:e}"));
                    walk(nodes, left, out);
                    walk(nodes, right, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, 0, &mut out);
        out
    }

    /// Inverse of [`RegressionTree::to_preorder`]; consumes exactly one tree.
    pub fn from_preorder<'a, I: Iterator<Item = &'a str>>(lines: &mut I) -> Result<Self> {
        fn parse<'a, I: Iterator<Item = &'a str>>(lines: &mut I, nodes: &mut Vec<Node>, depth: usize) -> Result<usize> {
            if depth > 64 {
                return Err(Error::ModelFormat("tree deeper than 64 levels".into()));
            }
            let line = lines
                .next()
                .ok_or_else(|| Error::ModelFormat("truncated tree".into()))?;
            let mut parts = line.split_whitespace();
            let bad = || Error::ModelFormat(format!("bad tree node '{line}'"));
            let id = nodes.len();
            match parts.next() {
                Some("L") => {
                    let value: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                    nodes.push(Node::Leaf { value });
                }
                Some("S") => {
                    let feature: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                    let threshold: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                    nodes.push(Node::Leaf { value: 0.0 });
                    let left = parse(lines, nodes, depth + 1)?;
                    let right = parse(lines, nodes, depth + 1)?;
                    nodes[id] = Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    };
                }
                _ => return Err(bad()),
            }
            if parts.next().is_some() {
                return Err(bad());
            }
            Ok(id)
        }
        let mut nodes = Vec::new();
        parse(lines, &mut nodes, 0)?;
        Ok(Self { nodes })
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }
}

/// Greedy Newton tree: splits maximise `GL^2/HL + GR^2/HR - G^2/H` and leaves
/// take the Newton value `-sum(g)/sum(h)`. Hessians are floored at
/// [`HESSIAN_FLOOR`]. Ties keep the lowest feature index and threshold.
pub fn fit_tree(
    features: &[Vec<f64>],
    grad: &[f64],
    hess: &[f64],
    max_depth: usize,
    min_leaf: usize,
) -> Result<RegressionTree> {
    let n = features.len();
    if grad.len() != n || hess.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: grad.len().min(hess.len()),
        });
    }
    if n == 0 {
        return Err(Error::domain("cannot fit a tree on zero samples"));
    }
    let dim = features[0].len();
    if let Some(row) = features.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: row.len(),
        });
    }
    if grad.iter().chain(hess).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite gradient or hessian"));
    }
    let hess: Vec<f64> = hess.iter().map(|h| h.max(HESSIAN_FLOOR)).collect();
    let min_leaf = min_leaf.max(1);
    let mut nodes = Vec::new();
    grow(features, grad, &hess, (0..n).collect(), 0, max_depth, min_leaf, &mut nodes);
    Ok(RegressionTree { nodes })
}

#[allow(clippy::too_many_arguments)]
fn grow(
    x: &[Vec<f64>],
    grad: &[f64],
    hess: &[f64],
    idx: Vec<usize>,
    depth: usize,
    max_depth: usize,
    min_leaf: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let g: f64 = idx.iter().map(|&i| grad[i]).sum();
    let h: f64 = idx.iter().map(|&i| hess[i]).sum();
    let id = nodes.len();
    nodes.push(Node::Leaf {
        value: newton_value(g, h),
    });
    if depth >= max_depth || idx.len() < 2 * min_leaf {
        return id;
    }
    let dim = x[0].len();
    let candidates: Vec<Option<BestSplit>> = (0..dim)
        .into_par_iter()
        .map(|f| best_split_on(f, x, &idx, grad, hess, min_leaf))
        .collect();
    let mut best: Option<BestSplit> = None;
    for c in candidates.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| c.gain > b.gain) {
            best = Some(c);
        }
    }
    let Some(best) = best else { return id };
    if !(best.gain > 1e-12 * (score(g, h) + 1e-300)) {
        return id;
    }
    let (li, ri): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .partition(|&&i| x[i][best.feature] <= best.threshold);
    let left = grow(x, grad, hess, li, depth + 1, max_depth, min_leaf, nodes);
    let right = grow(x, grad, hess, ri, depth + 1, max_depth, min_leaf, nodes);
    nodes[id] = Node::Split {
        feature: best.feature,
        threshold: best.threshold,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_gradient_single_leaf() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let t = fit_tree(&x, &[0.7; 20], &[1.0; 20], 3, 2).unwrap();
        assert_eq!(t.n_leaves(), 1);
        assert!((t.predict(&[3.0]) + 0.7).abs() < 1e-15);
    }

    #[test]
    fn step_target_split_exactly() {
        // targets y; with g = -y and h = 1 the leaf values are the leaf means of y
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * 7 % 3) as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| if i < 4 { -2.0 } else { 5.0 }).collect();
        let g: Vec<f64> = y.iter().map(|v| -v).collect();
        let t = fit_tree(&x, &g, &[1.0; 10], 1, 1).unwrap();
        match t.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 3.0);
            }
            _ => panic!("expected a split"),
        }
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(t.predict(xi), *yi);
        }
    }

    #[test]
    fn split_gain_matches_enumeration() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![((i * 5) % 12) as f64, (i as f64).sin()]).collect();
        let g: Vec<f64> = (0..12).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let h: Vec<f64> = (0..12).map(|i| 0.5 + (i % 3) as f64).collect();
        let t = fit_tree(&x, &g, &h, 1, 1).unwrap();
        let (mut best, mut arg) = (f64::NEG_INFINITY, (0, 0.0));
        let gt: f64 = g.iter().sum();
        let ht: f64 = h.iter().sum();
        for f in 0..2 {
            for i in 0..12 {
                let thr = x[i][f];
                let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0);
                for j in 0..12 {
                    if x[j][f] <= thr {
                        gl += g[j];
                        hl += h[j];
                        nl += 1;
                    }
                }
                if nl == 0 || nl == 12 {
                    continue;
                }
                let gain = gl * gl / hl + (gt - gl).powi(2) / (ht - hl) - gt * gt / ht;
                if gain > best + 1e-12 {
                    best = gain;
                    arg = (f, thr);
                }
            }
        }
        match t.nodes()[0] {
            Node::Split { feature, threshold, .. } => assert_eq!((feature, threshold), arg),
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn depth_zero_is_global_newton_value() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let g = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let h = [1.0, 2.0, 1.0, 1.0, 0.5, 0.5];
        let t = fit_tree(&x, &g, &h, 0, 1).unwrap();
        assert_eq!(t.n_leaves(), 1);
        assert!((t.predict(&[0.0]) + 5.5 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples_for_min_leaf() {
        let x: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let t = fit_tree(&x, &[1.0, -1.0, 1.0, -1.0], &[1.0; 4], 4, 5).unwrap();
        assert_eq!(t.n_leaves(), 1);
    }

    #[test]
    fn preorder_round_trip() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let g: Vec<f64> = x.iter().map(|r| r[0] * 3.0 - r[1]).collect();
        let t = fit_tree(&x, &g, &[1.0; 40], 4, 3).unwrap();
        let lines = t.to_preorder();
        let back = RegressionTree::from_preorder(&mut lines.iter().map(String::as_str)).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn structure_invariants(
            rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -3.0f64..3.0), 1..60),
            depth in 0usize..5,
            min_leaf in 1usize..6,
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let g: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let t = fit_tree(&x, &g, &vec![1.0; g.len()], depth, min_leaf).unwrap();
            prop_assert!(t.n_leaves() <= 1 << depth);
            prop_assert!(t.depth() <= depth);
            for n in t.nodes() {
                if let Node::Split { feature, threshold, .. } = n {
                    prop_assert!(x.iter().any(|r| r[*feature] == *threshold));
                }
            }
            // every leaf is reachable: preorder walk visits every node
            prop_assert_eq!(t.to_preorder().len(), t.nodes().len());
        }
    }
}
