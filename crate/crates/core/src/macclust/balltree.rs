//! Ball tree over binary vectors under Hamming distance.
//!
//! Nodes split on two pivots: the point farthest from the node's bitwise
//! majority centroid, then the point farthest from that one. Each node keeps
//! a centre (its centroid) and the covering radius, so range queries prune
//! any ball with `d(q, centre) > radius + r`.

use super::FingerprintVector;

pub const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf {
        center: FingerprintVector,
        radius: u32,
        items: Vec<usize>,
    },
    Inner {
        center: FingerprintVector,
        radius: u32,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn bounds(&self) -> (&FingerprintVector, u32) {
        match self {
            Node::Leaf { center, radius, .. } | Node::Inner { center, radius, .. } => (center, *radius),
        }
    }
}

#[derive(Debug)]
pub struct BallTree<'a> {
    points: &'a [FingerprintVector],
    root: Option<Node>,
    leaf_size: usize,
}

fn majority(points: &[FingerprintVector], idx: &[usize]) -> FingerprintVector {
    let width = points[idx[0]].width();
    let mut counts = vec![0usize; width];
    for &i in idx {
        for (bit, c) in counts.iter_mut().enumerate() {
            if points[i].get(bit) {
                *c += 1;
            }
        }
    }
    let mut out = FingerprintVector::zeros(width);
    for (bit, &c) in counts.iter().enumerate() {
        if 2 * c > idx.len() {
            out.set(bit);
        }
    }
    out
}

/// Index in `idx` of the point farthest from `from`; lowest index wins ties.
fn farthest(points: &[FingerprintVector], idx: &[usize], from: &FingerprintVector) -> usize {
    let mut best = idx[0];
    let mut best_d = from.hamming(&points[best]);
    for &i in &idx[1..] {
        let d = from.hamming(&points[i]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

impl<'a> BallTree<'a> {
    /// All points must share one width; the caller checks this.
    pub fn build(points: &'a [FingerprintVector], leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let root = if points.is_empty() {
            None
        } else {
            let idx: Vec<usize> = (0..points.len()).collect();
            Some(Self::build_node(points, idx, leaf_size))
        };
        BallTree {
            points,
            root,
            leaf_size,
        }
    }

    fn build_node(points: &[FingerprintVector], idx: Vec<usize>, leaf_size: usize) -> Node {
        let center = majority(points, &idx);
        let radius = idx.iter().map(|&i| center.hamming(&points[i])).max().unwrap_or(0);
        if idx.len() <= leaf_size || radius == 0 {
            return Node::Leaf {
                center,
                radius,
                items: idx,
            };
        }
        let a = farthest(points, &idx, &center);
        let b = farthest(points, &idx, &points[a]);
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| points[i].hamming(&points[a]) <= points[i].hamming(&points[b]));
        if left.is_empty() || right.is_empty() {
            return Node::Leaf {
                center,
                radius,
                items: idx,
            };
        }
        Node::Inner {
            center,
            radius,
            left: Box::new(Self::build_node(points, left, leaf_size)),
            right: Box::new(Self::build_node(points, right, leaf_size)),
        }
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    /// Indices of every point within Hamming distance `r` of `query`, ascending.
    pub fn query_radius(&self, query: &FingerprintVector, r: u32) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack: Vec<&Node> = self.root.iter().collect();
        while let Some(node) = stack.pop() {
            let (center, radius) = node.bounds();
            if query.hamming(center) > radius + r {
                continue;
            }
            match node {
                Node::Leaf { items, .. } => {
                    out.extend(items.iter().copied().filter(|&i| query.hamming(&self.points[i]) <= r))
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        out.sort_unstable();
        out
    }

    pub fn depth(&self) -> usize {
        fn depth(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 1,
                Node::Inner { left, right, .. } => 1 + depth(left).max(depth(right)),
            }
        }
        self.root.as_ref().map(depth).unwrap_or(0)
    }
}
