use std::collections::VecDeque;

use crate::volume::{Connectivity, Mask};

/// Result of connected-component labelling.
#[derive(Debug, Clone)]
pub struct Components {
    /// Component ids 1..=count; 0 for voxels outside the requested label.
    pub labels: Mask,
    pub count: usize,
    /// `sizes[k]` is the voxel count of component `k + 1`.
    pub sizes: Vec<usize>,
}

/// Labels maximal connected sets of voxels equal to `label`.
///
/// Components are numbered in ascending order of their smallest linear index.
pub fn connected_components(mask: &Mask, label: u32, connectivity: Connectivity) -> Components {
    label_where(mask, |l| l == label, connectivity)
}

/// Same as [`connected_components`] over all nonzero voxels.
pub fn connected_components_nonzero(mask: &Mask, connectivity: Connectivity) -> Components {
    label_where(mask, |l| l != 0, connectivity)
}

fn label_where(mask: &Mask, select: impl Fn(u32) -> bool, connectivity: Connectivity) -> Components {
    let grid = mask.grid();
    let src = mask.data();
    let mut out = vec![0u32; src.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..src.len() {
        if out[start] != 0 || !select(src[start]) {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        out[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            grid.for_each_neighbor(i, connectivity, |j| {
                if out[j] == 0 && select(src[j]) {
                    out[j] = id;
                    queue.push_back(j);
                }
            });
        }
        sizes.push(size);
    }

    Components {
        labels: Mask::new(grid.clone(), out).expect("same grid"),
        count: sizes.len(),
        sizes,
    }
}
