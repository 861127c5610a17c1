//! Weightless skip-GCN message passing over one domain's bipartite graph.
//!
//! One layer adds the mean of each node's neighbors to its own embedding;
//! there are no weights and no nonlinearity. The module output is the sum of
//! the layer outputs k = 1..L (the layer-0 input enters only through the
//! skip term inside each layer).

use crate::data::InteractionGraph;
use crate::error::{Error, Result};

/// Row-major n x d matrix of embeddings, one row per user or item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// out[r] = mean over nbrs[r] of src rows; zero for isolated nodes. This is
/// the single aggregation kernel shared by the plain forward pass and the
/// tape's aggregate primitive, so both paths produce identical bits.
pub fn aggregate_mean_into(src: &[f64], cols: usize, nbrs: &[Vec<u32>], out: &mut [f64]) {
    debug_assert_eq!(out.len(), nbrs.len() * cols);
    out.fill(0.0);
    for (r, list) in nbrs.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let dst = &mut out[r * cols..(r + 1) * cols];
        for &j in list {
            let s = &src[j as usize * cols..(j as usize + 1) * cols];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
        let w = 1.0 / list.len() as f64;
        for d in dst.iter_mut() {
            *d *= w;
        }
    }
}

fn check_shapes(users: &EmbeddingTable, items: &EmbeddingTable, graph: &InteractionGraph) -> Result<()> {
    if users.rows != graph.num_users() || items.rows != graph.num_items() {
        return Err(Error::usage(format!(
            "embedding tables ({} users, {} items) do not match graph ({}, {})",
            users.rows,
            items.rows,
            graph.num_users(),
            graph.num_items()
        )));
    }
    if users.cols != items.cols {
        return Err(Error::usage("user and item embeddings must share a dimension"));
    }
    Ok(())
}

/// One skip-GCN layer. Both outputs read the layer-l inputs (simultaneous
/// update); isolated nodes pass through unchanged.
pub fn skip_gcn_layer(
    users: &EmbeddingTable,
    items: &EmbeddingTable,
    graph: &InteractionGraph,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    check_shapes(users, items, graph)?;
    let d = users.cols;
    let mut next_users = EmbeddingTable::zeros(users.rows, d);
    let mut next_items = EmbeddingTable::zeros(items.rows, d);
    aggregate_mean_into(&items.data, d, graph.user_adj(), &mut next_users.data);
    aggregate_mean_into(&users.data, d, graph.item_adj(), &mut next_items.data);
    for (o, u) in next_users.data.iter_mut().zip(&users.data) {
        *o += u;
    }
    for (o, i) in next_items.data.iter_mut().zip(&items.data) {
        *o += i;
    }
    Ok((next_users, next_items))
}

/// Stacked propagation: returns the sum of the layer outputs k = 1..L.
pub fn propagate(
    users0: &EmbeddingTable,
    items0: &EmbeddingTable,
    graph: &InteractionGraph,
    layers: usize,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    if layers == 0 {
        return Err(Error::usage("propagation needs at least one layer"));
    }
    check_shapes(users0, items0, graph)?;
    let (mut cur_u, mut cur_i) = skip_gcn_layer(users0, items0, graph)?;
    let mut acc_u = cur_u.clone();
    let mut acc_i = cur_i.clone();
    for _ in 1..layers {
        let (next_u, next_i) = skip_gcn_layer(&cur_u, &cur_i, graph)?;
        for (a, v) in acc_u.data.iter_mut().zip(&next_u.data) {
            *a += v;
        }
        for (a, v) in acc_i.data.iter_mut().zip(&next_i.data) {
            *a += v;
        }
        cur_u = next_u;
        cur_i = next_i;
    }
    Ok((acc_u, acc_i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionGraph;

    fn graph_from(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> InteractionGraph {
        InteractionGraph::from_index_edges(
            num_users,
            num_items,
            edges.to_vec(),
            (0..num_users).map(|u| format!("u{u}")).collect(),
            (0..num_items).map(|i| format!("i{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn isolated_user_passes_through() {
        let g = graph_from(2, 1, &[(0, 0)]);
        let u = EmbeddingTable::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let i = EmbeddingTable::from_vec(1, 2, vec![0.5, 0.5]);
        let (u1, _) = skip_gcn_layer(&u, &i, &g).unwrap();
        assert_eq!(u1.row(1), &[3.0, 4.0]); // user 1 has no neighbors
        assert_eq!(u1.row(0), &[1.5, 2.5]);
    }

    #[test]
    fn neighbor_mean_hand_example() {
        // u = (1,1) with neighbors i1 = (1,0), i2 = (0,1): u' = (1.5, 1.5).
        let g = graph_from(1, 2, &[(0, 0), (0, 1)]);
        let u = EmbeddingTable::from_vec(1, 2, vec![1.0, 1.0]);
        let i = EmbeddingTable::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let (u1, _) = skip_gcn_layer(&u, &i, &g).unwrap();
        assert_eq!(u1.row(0), &[1.5, 1.5]);
    }

    #[test]
    fn update_is_simultaneous() {
        // Items must read layer-l user rows, not the freshly updated ones.
        let g = graph_from(1, 1, &[(0, 0)]);
        let u = EmbeddingTable::from_vec(1, 1, vec![2.0]);
        let i = EmbeddingTable::from_vec(1, 1, vec![5.0]);
        let (u1, i1) = skip_gcn_layer(&u, &i, &g).unwrap();
        assert_eq!(u1.row(0), &[7.0]); // 2 + 5
        assert_eq!(i1.row(0), &[7.0]); // 5 + 2, not 5 + 7
    }

    #[test]
    fn single_layer_propagate_equals_layer_output() {
        let g = graph_from(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let u = EmbeddingTable::from_vec(2, 3, (0..6).map(|x| x as f64).collect());
        let i = EmbeddingTable::from_vec(2, 3, (0..6).map(|x| 0.5 * x as f64).collect());
        let (lu, li) = skip_gcn_layer(&u, &i, &g).unwrap();
        let (pu, pi) = propagate(&u, &i, &g, 1).unwrap();
        assert_eq!(lu, pu);
        assert_eq!(li, pi);
    }

    #[test]
    fn isolated_graph_sums_to_l_times_input() {
        let g = graph_from(3, 2, &[]);
        let u = EmbeddingTable::from_vec(3, 2, vec![1.0, -1.0, 2.0, 0.5, 0.0, 3.0]);
        let i = EmbeddingTable::from_vec(2, 2, vec![1.0, 1.0, 2.0, 2.0]);
        let layers = 4;
        let (pu, pi) = propagate(&u, &i, &g, layers).unwrap();
        for (a, b) in pu.data.iter().zip(&u.data) {
            assert_eq!(*a, layers as f64 * b);
        }
        for (a, b) in pi.data.iter().zip(&i.data) {
            assert_eq!(*a, layers as f64 * b);
        }
    }

    #[test]
    fn two_layer_hand_computed_table() {
        // One user linked to two items, unit embeddings, L = 2:
        // layer 1: u = 2, i = 2 each; layer 2: u = 4, i = 4; sums: 6.
        let g = graph_from(1, 2, &[(0, 0), (0, 1)]);
        let u = EmbeddingTable::from_vec(1, 2, vec![1.0, 1.0]);
        let i = EmbeddingTable::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let (pu, pi) = propagate(&u, &i, &g, 2).unwrap();
        assert_eq!(pu.row(0), &[6.0, 6.0]);
        assert_eq!(pi.row(0), &[6.0, 6.0]);
        assert_eq!(pi.row(1), &[6.0, 6.0]);
    }

    #[test]
    fn propagation_is_linear() {
        let g = graph_from(3, 3, &[(0, 0), (0, 2), (1, 1), (2, 0), (2, 1)]);
        let u = EmbeddingTable::from_vec(3, 2, vec![0.3, -1.0, 2.0, 0.7, -0.2, 0.9]);
        let i = EmbeddingTable::from_vec(3, 2, vec![1.1, 0.4, -0.6, 0.0, 0.8, -1.3]);
        let alpha = 2.5;
        let us = EmbeddingTable::from_vec(3, 2, u.data.iter().map(|x| alpha * x).collect());
        let is_ = EmbeddingTable::from_vec(3, 2, i.data.iter().map(|x| alpha * x).collect());
        let (pu, pi) = propagate(&u, &i, &g, 3).unwrap();
        let (psu, psi) = propagate(&us, &is_, &g, 3).unwrap();
        for (a, b) in psu.data.iter().zip(&pu.data) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
        for (a, b) in psi.data.iter().zip(&pi.data) {
            assert!((a - alpha * b).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_is_permutation_equivariant() {
        let edges = [(0u32, 0u32), (0, 2), (1, 1), (2, 0), (2, 1), (3, 2)];
        let g = graph_from(4, 3, &edges);
        // Permute users by p, items by q.
        let p = [2usize, 0, 3, 1]; // new index of old user u is p[u]
        let q = [1usize, 2, 0];
        let perm_edges: Vec<(u32, u32)> = edges
            .iter()
            .map(|&(u, i)| (p[u as usize] as u32, q[i as usize] as u32))
            .collect();
        let gp = graph_from(4, 3, &perm_edges);

        let d = 2;
        let u = EmbeddingTable::from_vec(4, d, (0..8).map(|x| x as f64 * 0.37 - 1.0).collect());
        let i = EmbeddingTable::from_vec(3, d, (0..6).map(|x| x as f64 * 0.61 + 0.2).collect());
        let mut up = EmbeddingTable::zeros(4, d);
        let mut ip = EmbeddingTable::zeros(3, d);
        for old in 0..4 {
            up.row_mut(p[old]).copy_from_slice(u.row(old));
        }
        for old in 0..3 {
            ip.row_mut(q[old]).copy_from_slice(i.row(old));
        }

        let (pu, pi) = propagate(&u, &i, &g, 3).unwrap();
        let (ppu, ppi) = propagate(&up, &ip, &gp, 3).unwrap();
        for old in 0..4 {
            assert_eq!(pu.row(old), ppu.row(p[old]));
        }
        for old in 0..3 {
            assert_eq!(pi.row(old), ppi.row(q[old]));
        }
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let g = graph_from(2, 2, &[(0, 0)]);
        let u = EmbeddingTable::zeros(3, 2);
        let i = EmbeddingTable::zeros(2, 2);
        assert!(matches!(
            skip_gcn_layer(&u, &i, &g),
            Err(crate::error::Error::Usage(_))
        ));
    }

    #[test]
    fn gradients_flow_through_all_layers() {
        use crate::autodiff::{fd_check, Tape};
        let g = graph_from(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        let d = 2;
        let layers = 3;
        let u0: Vec<f64> = vec![0.4, -0.3, 0.9, 0.1];
        let i0: Vec<f64> = vec![-0.7, 0.2, 0.5, 0.8];

        let run = |u: &[f64]| {
            let mut t = Tape::new();
            let un = t.leaf(u);
            let in_ = t.leaf(&i0);
            let (mut cu, mut ci) = (un, in_);
            let (mut au, mut ai) = (None, None);
            for _ in 0..layers {
                let gu = t.aggregate(ci, g.user_adj_arc(), d);
                let gi = t.aggregate(cu, g.item_adj_arc(), d);
                let nu = t.add(cu, gu);
                let ni = t.add(ci, gi);
                au = Some(match au {
                    None => nu,
                    Some(a) => t.add(a, nu),
                });
                ai = Some(match ai {
                    None => ni,
                    Some(a) => t.add(a, ni),
                });
                cu = nu;
                ci = ni;
            }
            let su = t.dot(au.unwrap(), au.unwrap());
            let si = t.dot(ai.unwrap(), ai.unwrap());
            let obj = t.add(su, si);
            (t, un, obj)
        };

        let (t, un, obj) = run(&u0);
        let grads = t.backward(obj).unwrap();
        let analytic = t.grad(&grads, un).to_vec();
        assert!(analytic.iter().any(|&g| g != 0.0));
        let err = fd_check(
            |u| {
                let (t, _, obj) = run(u);
                t.scalar(obj)
            },
            &u0,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "fd error {err}");
    }

    #[test]
    fn taped_propagate_matches_plain_bitwise() {
        let g = graph_from(3, 4, &[(0, 0), (0, 3), (1, 1), (2, 0), (2, 2)]);
        let d = 3;
        let u0: Vec<f64> = (0..9).map(|x| (x as f64) * 0.21 - 0.8).collect();
        let i0: Vec<f64> = (0..12).map(|x| (x as f64) * 0.13 + 0.1).collect();
        let layers = 3;
        let (pu, pi) = propagate(
            &EmbeddingTable::from_vec(3, d, u0.clone()),
            &EmbeddingTable::from_vec(4, d, i0.clone()),
            &g,
            layers,
        )
        .unwrap();

        let mut t = crate::autodiff::Tape::new();
        let un = t.leaf(&u0);
        let in_ = t.leaf(&i0);
        let (mut cu, mut ci) = (un, in_);
        let (mut au, mut ai): (Option<crate::autodiff::NodeId>, _) = (None, None);
        for _ in 0..layers {
            let gu = t.aggregate(ci, g.user_adj_arc(), d);
            let gi = t.aggregate(cu, g.item_adj_arc(), d);
            let nu = t.add(cu, gu);
            let ni = t.add(ci, gi);
            au = Some(match au {
                None => nu,
                Some(a) => t.add(a, nu),
            });
            ai = Some(match ai {
                None => ni,
                Some(a) => t.add(a, ni),
            });
            cu = nu;
            ci = ni;
        }
        assert_eq!(t.value(au.unwrap()), &pu.data[..]);
        assert_eq!(t.value(ai.unwrap()), &pi.data[..]);
    }
}
