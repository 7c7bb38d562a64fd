//! Arena-backed search tree over denoising states.

use diffsearch_autodiff::Tensor;

use crate::error::CoreError;

#[derive(Debug, Clone)]
pub struct SearchNode {
    pub state: Tensor,
    /// Denoising step of this state; 0 is terminal.
    pub step: usize,
    /// Accumulated value (sum of backpropagated rewards).
    pub q: f64,
    /// Visit count.
    pub n: u64,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    /// Rollout paths that terminated at this node (diagnostic).
    pub path_ends: u64,
}

#[derive(Debug)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
    root: usize,
}

impl SearchTree {
    pub fn new(state: Tensor, step: usize) -> Self {
        Self {
            nodes: vec![SearchNode {
                state,
                step,
                q: 0.0,
                n: 0,
                children: Vec::new(),
                parent: None,
                path_ends: 0,
            }],
            root: 0,
        }
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: usize) -> &mut SearchNode {
        &mut self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_terminal(&self, id: usize) -> bool {
        self.nodes[id].step == 0
    }

    pub fn add_child(&mut self, parent: usize, state: Tensor, step: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(SearchNode {
            state,
            step,
            q: 0.0,
            n: 0,
            children: Vec::new(),
            parent: Some(parent),
            path_ends: 0,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Makes `child` the new root, keeping its subtree statistics.
    pub fn commit(&mut self, child: usize) -> Result<(), CoreError> {
        if self.nodes[child].parent != Some(self.root) {
            return Err(CoreError::invalid(
                "commit target is not a child of the current root",
            ));
        }
        self.root = child;
        Ok(())
    }
}

/// Upper confidence bound of a visited child.
pub fn ucb(q: f64, n: u64, parent_n: u64, c: f64) -> f64 {
    debug_assert!(n >= 1 && parent_n >= 1);
    q / n as f64 + c * ((parent_n as f64).ln() / n as f64).sqrt()
}

/// Child choice: unvisited children rank strictly first (ties by child
/// index), then the UCB argmax (ties by child index).
pub fn select_child(tree: &SearchTree, id: usize, c: f64) -> Option<usize> {
    let node = tree.node(id);
    if node.children.is_empty() {
        return None;
    }
    if let Some(&unvisited) = node.children.iter().find(|&&ch| tree.node(ch).n == 0) {
        return Some(unvisited);
    }
    let parent_n = node.n.max(1);
    let mut best = node.children[0];
    let mut best_score = f64::NEG_INFINITY;
    for &ch in &node.children {
        let cn = tree.node(ch);
        let score = ucb(cn.q, cn.n, parent_n, c);
        if score > best_score {
            best_score = score;
            best = ch;
        }
    }
    Some(best)
}

/// Adds `reward` to Q and bumps N along a root-to-leaf path.
pub fn backpropagate(
    tree: &mut SearchTree,
    path: &[usize],
    reward: f64,
) -> Result<(), CoreError> {
    if path.first() != Some(&tree.root()) {
        return Err(CoreError::invalid("path does not start at the root"));
    }
    for pair in path.windows(2) {
        if tree.node(pair[1]).parent != Some(pair[0]) {
            return Err(CoreError::invalid(format!(
                "disconnected path: {} is not the parent of {}",
                pair[0], pair[1]
            )));
        }
    }
    for &id in path {
        let node = tree.node_mut(id);
        node.q += reward;
        node.n += 1;
    }
    if let Some(&last) = path.last() {
        tree.node_mut(last).path_ends += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_tree() -> SearchTree {
        SearchTree::new(Tensor::scalar(0.0), 3)
    }

    #[test]
    fn ucb_formula() {
        // Q/N = 1, n = 1, parent = 3, c = 2 -> 1 + 2 sqrt(ln 3)
        let got = ucb(1.0, 1, 3, 2.0);
        let want = 1.0 + 2.0 * (3f64).ln().sqrt();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn pure_exploitation_at_c_zero() {
        let mut t = leaf_tree();
        let a = t.add_child(0, Tensor::scalar(1.0), 2);
        let b = t.add_child(0, Tensor::scalar(2.0), 2);
        t.node_mut(0).n = 4;
        t.node_mut(a).n = 2;
        t.node_mut(a).q = 1.0; // mean 0.5
        t.node_mut(b).n = 2;
        t.node_mut(b).q = 3.0; // mean 1.5
        assert_eq!(select_child(&t, 0, 0.0), Some(b));
    }

    #[test]
    fn unvisited_child_ranks_first() {
        let mut t = leaf_tree();
        let a = t.add_child(0, Tensor::scalar(1.0), 2);
        let b = t.add_child(0, Tensor::scalar(2.0), 2);
        t.node_mut(0).n = 10;
        t.node_mut(a).n = 3;
        t.node_mut(a).q = 300.0; // huge mean, still loses to unvisited b
        assert_eq!(select_child(&t, 0, 1.0), Some(b));
    }

    #[test]
    fn backprop_accumulates_along_path() {
        let mut t = leaf_tree();
        let a = t.add_child(0, Tensor::scalar(1.0), 2);
        backpropagate(&mut t, &[0, a], -2.5).unwrap();
        assert_eq!(t.node(0).n, 1);
        assert_eq!(t.node(0).q, -2.5);
        assert_eq!(t.node(a).n, 1);
        backpropagate(&mut t, &[0, a], -0.5).unwrap();
        assert!((t.node(a).q / t.node(a).n as f64 + 1.5).abs() < 1e-15);
    }

    #[test]
    fn off_path_nodes_untouched() {
        let mut t = leaf_tree();
        let a = t.add_child(0, Tensor::scalar(1.0), 2);
        let b = t.add_child(0, Tensor::scalar(2.0), 2);
        backpropagate(&mut t, &[0, a], 1.0).unwrap();
        assert_eq!(t.node(b).n, 0);
        assert_eq!(t.node(b).q, 0.0);
    }

    #[test]
    fn disconnected_path_rejected() {
        let mut t = leaf_tree();
        let a = t.add_child(0, Tensor::scalar(1.0), 2);
        let grand = t.add_child(a, Tensor::scalar(1.0), 1);
        assert!(backpropagate(&mut t, &[0, grand], 1.0).is_err());
        assert!(backpropagate(&mut t, &[a], 1.0).is_err());
    }
}
