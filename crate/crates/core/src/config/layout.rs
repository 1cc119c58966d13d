use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Placement {
    pub node: usize,
    pub local: usize,
}

/// Stage-to-device assignment. Entry `x` is the device running stage `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceLayout {
    pub gpus_per_node: usize,
    pub stage_to_device: Vec<Placement>,
}

impl DeviceLayout {
    pub fn stages(&self) -> usize {
        self.stage_to_device.len()
    }

    pub fn node_of(&self, stage: usize) -> usize {
        self.stage_to_device[stage].node
    }

    pub fn colocated(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn num_nodes(&self) -> usize {
        self.stage_to_device.iter().map(|d| d.node + 1).max().unwrap_or(0)
    }

    /// Stages hosted on `node`, in ascending order.
    pub fn stages_on(&self, node: usize) -> Vec<usize> {
        (0..self.stages()).filter(|&s| self.node_of(s) == node).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("layout needs p >= 1 and gpus_per_node >= 1 (p={p}, gpus_per_node={gpus_per_node})")]
    Empty { p: usize, gpus_per_node: usize },
    #[error("cannot co-locate pair ({evictor}, {acceptor}) on {nodes} nodes of {gpus_per_node} devices")]
    Infeasible { evictor: usize, acceptor: usize, nodes: usize, gpus_per_node: usize },
}

/// Stage `x` on node `x / gpus_per_node`.
pub fn identity_layout(p: usize, gpus_per_node: usize) -> Result<DeviceLayout, LayoutError> {
    if p == 0 || gpus_per_node == 0 {
        return Err(LayoutError::Empty { p, gpus_per_node });
    }
    let stage_to_device = (0..p)
        .map(|x| Placement { node: x / gpus_per_node, local: x % gpus_per_node })
        .collect();
    Ok(DeviceLayout { gpus_per_node, stage_to_device })
}

/// Places each evictor/acceptor pair `(x, p-1-x)` on one node, using the
/// minimum number of nodes `ceil(p / gpus_per_node)`.
///
/// Pairs are packed outermost-first, so with 16 stages on two 8-GPU nodes
/// node 0 gets `{0..=3, 12..=15}` and node 1 gets `{4..=11}`. With an odd
/// stage count the middle stage has no partner and takes any free slot.
pub fn pair_adjacent_layout(p: usize, gpus_per_node: usize) -> Result<DeviceLayout, LayoutError> {
    if p == 0 || gpus_per_node == 0 {
        return Err(LayoutError::Empty { p, gpus_per_node });
    }
    if p <= gpus_per_node {
        return identity_layout(p, gpus_per_node);
    }

    let nodes = p.div_ceil(gpus_per_node);
    let mut node_of = vec![usize::MAX; p];
    let mut free = vec![gpus_per_node; nodes];
    let mut current = 0;
    for x in 0..p / 2 {
        let partner = p - 1 - x;
        while current < nodes && free[current] < 2 {
            current += 1;
        }
        if current == nodes {
            return Err(LayoutError::Infeasible { evictor: x, acceptor: partner, nodes, gpus_per_node });
        }
        node_of[x] = current;
        node_of[partner] = current;
        free[current] -= 2;
    }
    if p % 2 == 1 {
        let node = free.iter().position(|&f| f > 0).expect("p <= nodes * gpus_per_node");
        node_of[p / 2] = node;
        free[node] -= 1;
    }

    let mut next_local = vec![0; nodes];
    let stage_to_device = node_of
        .into_iter()
        .map(|node| {
            let local = next_local[node];
            next_local[node] += 1;
            Placement { node, local }
        })
        .collect();
    Ok(DeviceLayout { gpus_per_node, stage_to_device })
}
