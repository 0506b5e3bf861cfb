use super::dag::{Dag, DagNode, NodeId, NodeKind};

/// Merges runs of consecutive compute nodes that share an output extent
/// and have no edge of any kind between them. Groups may grow without
/// bound; edges are recomputed on the result.
pub fn fuse(dag: &Dag) -> Dag {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, node) in dag.nodes().iter().enumerate() {
        let joins = match (groups.last(), node.output_extent()) {
            (Some(group), Some(extent)) => {
                let head = &dag.nodes()[group[0]];
                head.output_extent() == Some(extent)
                    && group
                        .iter()
                        .all(|&g| !dag.has_edge_between(NodeId(g as u32), node.id))
            }
            _ => false,
        };
        if joins {
            groups.last_mut().unwrap().push(i);
        } else {
            groups.push(vec![i]);
        }
    }

    let nodes = groups
        .iter()
        .enumerate()
        .map(|(k, group)| {
            let id = NodeId(k as u32);
            if let [single] = group.as_slice() {
                return DagNode::new(id, dag.nodes()[*single].kind.clone());
            }
            let statements = group
                .iter()
                .flat_map(|&g| dag.nodes()[g].statements().iter().cloned())
                .collect();
            DagNode::new(id, NodeKind::Compute { statements })
        })
        .collect();
    Dag::from_parts(nodes, dag.asts().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{ArrayId, Expr, Shape, ShapeMap, SliceSpec};

    fn shapes(ids: &[u32]) -> ShapeMap {
        ids.iter().map(|&i| (ArrayId(i), Shape::d2(8, 8))).collect()
    }

    fn assign(dag: &mut Dag, sh: &ShapeMap, out: u32, slice: &str, e: Expr) {
        let st = dag
            .build_statement(ArrayId(out), &SliceSpec::parse(slice).unwrap(), &e, sh)
            .unwrap();
        dag.add_statement(st);
    }

    #[test]
    fn independent_field_updates_fuse() {
        let sh = shapes(&[0, 1, 2, 3]);
        let mut dag = Dag::new();
        let (u, v) = (ArrayId(0), ArrayId(1));
        let rhs = |a: ArrayId, b: ArrayId| Expr::at(a, "1:-1, 1:-1") * Expr::at(b, "2:, 1:-1");
        assign(&mut dag, &sh, 2, "1:-1, 1:-1", rhs(u, v));
        assign(&mut dag, &sh, 3, "1:-1, 1:-1", rhs(v, u));
        let fused = fuse(&dag);
        assert_eq!(fused.len(), 1);
        assert_eq!(fused.nodes()[0].statements().len(), 2);
        assert_eq!(fused.nodes()[0].statements()[0].output, ArrayId(2));
    }

    #[test]
    fn dependent_nodes_do_not_fuse() {
        let sh = shapes(&[0, 1]);
        let mut dag = Dag::new();
        assign(&mut dag, &sh, 1, "1:-1, 1:-1", Expr::at(ArrayId(0), ":-2, 1:-1"));
        assign(&mut dag, &sh, 0, "1:-1, 1:-1", Expr::at(ArrayId(1), ":-2, 1:-1"));
        assert_eq!(fuse(&dag), dag);
    }

    #[test]
    fn output_dependencies_block_fusion() {
        let sh = shapes(&[0, 1]);
        let mut dag = Dag::new();
        assign(&mut dag, &sh, 1, "0:4, :", Expr::at(ArrayId(0), "0:4, :"));
        assign(&mut dag, &sh, 1, "4:8, :", Expr::at(ArrayId(0), "4:8, :"));
        assert_eq!(fuse(&dag).len(), 2);
    }

    #[test]
    fn different_extents_do_not_fuse() {
        let sh = shapes(&[0, 1]);
        let mut dag = Dag::new();
        assign(&mut dag, &sh, 0, "0, :", Expr::Const(1.0));
        assign(&mut dag, &sh, 1, ":, 0", Expr::Const(1.0));
        assert_eq!(fuse(&dag).len(), 2);
    }

    #[test]
    fn single_node_is_unchanged() {
        let sh = shapes(&[0]);
        let mut dag = Dag::new();
        assign(&mut dag, &sh, 0, ":, :", Expr::Const(2.0));
        assert_eq!(fuse(&dag), dag);
        assert_eq!(fuse(&Dag::new()), Dag::new());
    }

    #[test]
    fn groups_grow_past_two() {
        let sh = shapes(&[0, 1, 2, 3]);
        let mut dag = Dag::new();
        for out in 1..4 {
            assign(&mut dag, &sh, out, ":, :", Expr::at(ArrayId(0), ":, :") * out as f64);
        }
        let fused = fuse(&dag);
        assert_eq!(fused.len(), 1);
        assert_eq!(fused.statement_count(), 3);
    }
}
