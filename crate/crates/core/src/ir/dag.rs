use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use super::{ArrayId, AstId, AstTable, Expr, Region, Shape, ShapeMap, SliceSpec, StencilAst};
use crate::error::{Error, Result};
use crate::wire::{Reader, Wire, Writer};

/// One slice assignment `output[output_region] = ast(inputs...)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub ast: AstId,
    pub output: ArrayId,
    pub output_region: Region,
    pub inputs: Vec<ArrayId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "knl{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Array creation; on the server the array already exists (zeroed) by
    /// the time the node runs, so executing it is a no-op.
    Create { array: ArrayId, shape: Shape },
    Compute { statements: Vec<Statement> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DagNode {
    pub id: NodeId,
    pub kind: NodeKind,
    reads: BTreeSet<ArrayId>,
    writes: BTreeSet<ArrayId>,
}

impl DagNode {
    pub(crate) fn new(id: NodeId, kind: NodeKind) -> DagNode {
        let mut reads = BTreeSet::new();
        let mut writes = BTreeSet::new();
        match &kind {
            NodeKind::Create { array, .. } => {
                writes.insert(*array);
            }
            NodeKind::Compute { statements } => {
                for s in statements {
                    writes.insert(s.output);
                    reads.extend(s.inputs.iter().copied());
                }
            }
        }
        DagNode {
            id,
            kind,
            reads,
            writes,
        }
    }

    pub fn reads(&self) -> &BTreeSet<ArrayId> {
        &self.reads
    }

    pub fn writes(&self) -> &BTreeSet<ArrayId> {
        &self.writes
    }

    pub fn statements(&self) -> &[Statement] {
        match &self.kind {
            NodeKind::Compute { statements } => statements,
            NodeKind::Create { .. } => &[],
        }
    }

    pub fn is_compute(&self) -> bool {
        matches!(self.kind, NodeKind::Compute { .. })
    }

    /// Extent of the output slice; `None` for creation nodes.
    pub fn output_extent(&self) -> Option<[usize; 2]> {
        self.statements().first().map(|s| s.output_region.extent())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum DepKind {
    /// write then read
    True = 0,
    /// read then write
    Anti = 1,
    /// write then write
    Output = 2,
}

impl DepKind {
    fn from_code(c: u8) -> Result<DepKind> {
        match c {
            0 => Ok(DepKind::True),
            1 => Ok(DepKind::Anti),
            2 => Ok(DepKind::Output),
            _ => Err(Error::malformed(format!("bad edge kind {c}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            DepKind::True => "true",
            DepKind::Anti => "anti",
            DepKind::Output => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: DepKind,
}

/// A batch of statements in program order plus array-level dependency
/// edges and the ASTs they reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dag {
    nodes: Vec<DagNode>,
    edges: BTreeSet<Edge>,
    asts: AstTable,
}

impl Dag {
    pub fn new() -> Dag {
        Dag::default()
    }

    pub fn nodes(&self) -> &[DagNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn asts(&self) -> &AstTable {
        &self.asts
    }

    pub fn ast(&self, id: AstId) -> &StencilAst {
        self.asts.get(id).expect("statement references missing ast")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn compute_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_compute()).count()
    }

    pub fn statement_count(&self) -> usize {
        self.nodes.iter().map(|n| n.statements().len()).sum()
    }

    pub(crate) fn from_parts(nodes: Vec<DagNode>, asts: AstTable) -> Dag {
        let edges = compute_edges(&nodes);
        Dag { nodes, edges, asts }
    }

    /// Parameterizes `expr`, validates the assignment, and interns the AST.
    pub fn build_statement(
        &mut self,
        output: ArrayId,
        out_slice: &SliceSpec,
        expr: &Expr,
        shapes: &ShapeMap,
    ) -> Result<Statement> {
        let arrays = expr.arrays();
        if arrays.contains(&output) {
            return Err(Error::SelfDependency(output));
        }
        let out_shape = shapes.get(&output).ok_or(Error::UnknownArray(output))?;
        let output_region = out_slice.normalize(out_shape)?;
        let (ast, inputs) = expr.parameterize(shapes)?;
        self.build_statement_from_ast(ast, output, output_region, inputs, shapes)
    }

    /// Lower-level form taking an already parameterized AST.
    pub fn build_statement_from_ast(
        &mut self,
        ast: StencilAst,
        output: ArrayId,
        output_region: Region,
        inputs: Vec<ArrayId>,
        shapes: &ShapeMap,
    ) -> Result<Statement> {
        validate_statement(&ast, output, &output_region, &inputs, shapes)?;
        let id = self.asts.insert(ast);
        Ok(Statement {
            ast: id,
            output,
            output_region,
            inputs,
        })
    }

    /// Appends a single-statement node and its edges to every earlier node.
    pub fn add_statement(&mut self, stmt: Statement) -> NodeId {
        self.push_node(NodeKind::Compute {
            statements: vec![stmt],
        })
    }

    pub fn add_create(&mut self, array: ArrayId, shape: Shape) -> NodeId {
        self.push_node(NodeKind::Create { array, shape })
    }

    fn push_node(&mut self, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        let node = DagNode::new(id, kind);
        for prev in &self.nodes {
            for kind in dependency_kinds(prev, &node) {
                self.edges.insert(Edge {
                    from: prev.id,
                    to: id,
                    kind,
                });
            }
        }
        self.nodes.push(node);
        id
    }

    pub fn has_edge_between(&self, from: NodeId, to: NodeId) -> bool {
        let lo = Edge {
            from,
            to,
            kind: DepKind::True,
        };
        let hi = Edge {
            from,
            to,
            kind: DepKind::Output,
        };
        self.edges.range(lo..=hi).next().is_some()
    }

    /// Predecessor lists indexed by node position.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let p = &mut preds[e.to.0 as usize];
            if p.last() != Some(&(e.from.0 as usize)) {
                p.push(e.from.0 as usize);
            }
        }
        preds
    }

    /// Server-side re-check: every statement is well formed against the
    /// known shapes, AST digests match, and the edge set is exactly the
    /// one implied by the nodes' read and write sets.
    pub fn validate(&self, shapes: &ShapeMap) -> Result<()> {
        for (_, ast) in self.asts.iter() {
            ast.verify()?;
        }
        let mut shapes = shapes.clone();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 as usize != i {
                return Err(Error::MalformedDag(format!("node {i} has id {}", node.id)));
            }
            match &node.kind {
                NodeKind::Create { array, shape } => match shapes.get(array) {
                    Some(s) if s != shape => {
                        return Err(Error::MalformedDag(format!(
                            "create {array} {shape} conflicts with {s}"
                        )))
                    }
                    Some(_) => {}
                    None => {
                        shapes.insert(*array, *shape);
                    }
                },
                NodeKind::Compute { statements } => {
                    if statements.is_empty() {
                        return Err(Error::MalformedDag(format!("{} has no statements", node.id)));
                    }
                    let extent = statements[0].output_region.extent();
                    for s in statements {
                        let ast = self.asts.get(s.ast).ok_or_else(|| {
                            Error::MalformedDag(format!("{} references missing {}", node.id, s.ast))
                        })?;
                        validate_statement(ast, s.output, &s.output_region, &s.inputs, &shapes)?;
                        if s.output_region.extent() != extent {
                            return Err(Error::MalformedDag(format!(
                                "{} mixes output extents",
                                node.id
                            )));
                        }
                    }
                }
            }
        }
        if compute_edges(&self.nodes) != self.edges {
            return Err(Error::MalformedDag("edge set does not match accesses".into()));
        }
        Ok(())
    }

    /// Deterministic text form, one line per node.
    pub fn dump(&self) -> String {
        let mut out_edges: BTreeMap<NodeId, Vec<(NodeId, DepKind)>> = BTreeMap::new();
        for e in &self.edges {
            out_edges.entry(e.from).or_default().push((e.to, e.kind));
        }
        let set = |s: &BTreeSet<ArrayId>| {
            s.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut text = String::new();
        for node in &self.nodes {
            let body = match &node.kind {
                NodeKind::Create { array, shape } => format!("create {array} {shape}"),
                NodeKind::Compute { statements } => statements
                    .iter()
                    .map(|s| {
                        let args: Vec<String> = s.inputs.iter().map(|a| a.to_string()).collect();
                        format!("{}{} = {}({})", s.output, s.output_region, s.ast, args.join(","))
                    })
                    .collect::<Vec<_>>()
                    .join("; "),
            };
            let edges = out_edges
                .get(&node.id)
                .map(|v| {
                    v.iter()
                        .map(|(to, k)| format!("{to}:{}", k.name()))
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_default();
            let _ = writeln!(
                text,
                "{}: [{body}] reads={{{}}} writes={{{}}} edges→{{{edges}}}",
                node.id,
                set(&node.reads),
                set(&node.writes),
            );
        }
        text
    }
}

fn dependency_kinds(earlier: &DagNode, later: &DagNode) -> Vec<DepKind> {
    let mut kinds = Vec::with_capacity(3);
    if !earlier.writes.is_disjoint(&later.reads) {
        kinds.push(DepKind::True);
    }
    if !earlier.reads.is_disjoint(&later.writes) {
        kinds.push(DepKind::Anti);
    }
    if !earlier.writes.is_disjoint(&later.writes) {
        kinds.push(DepKind::Output);
    }
    kinds
}

/// All array-level edges between ordered node pairs. Only pairs sharing
/// at least one array are examined.
pub(crate) fn compute_edges(nodes: &[DagNode]) -> BTreeSet<Edge> {
    let mut by_array: BTreeMap<ArrayId, Vec<usize>> = BTreeMap::new();
    let mut edges = Vec::new();
    let mut candidates = Vec::new();
    for (j, node) in nodes.iter().enumerate() {
        candidates.clear();
        for a in node.reads.iter().chain(node.writes.iter()) {
            if let Some(list) = by_array.get(a) {
                candidates.extend(list.iter().copied());
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        for &i in &candidates {
            for kind in dependency_kinds(&nodes[i], node) {
                edges.push(Edge {
                    from: nodes[i].id,
                    to: node.id,
                    kind,
                });
            }
        }
        for a in node.reads.iter().chain(node.writes.iter()) {
            let list = by_array.entry(*a).or_default();
            if list.last() != Some(&j) {
                list.push(j);
            }
        }
    }
    edges.into_iter().collect()
}

fn validate_statement(
    ast: &StencilAst,
    output: ArrayId,
    output_region: &Region,
    inputs: &[ArrayId],
    shapes: &ShapeMap,
) -> Result<()> {
    if inputs.contains(&output) {
        return Err(Error::SelfDependency(output));
    }
    if inputs.len() != ast.arity() {
        return Err(Error::MalformedDag(format!(
            "ast arity {} but {} inputs bound",
            ast.arity(),
            inputs.len()
        )));
    }
    let out_shape = shapes.get(&output).ok_or(Error::UnknownArray(output))?;
    if !output_region.is_valid_for(out_shape) {
        return Err(Error::InvalidSlice(format!(
            "output region {output_region} outside {output} {out_shape}"
        )));
    }
    let expected = output_region.extent();
    let mut result = Ok(());
    ast.root().visit_slots(&mut |slot, region| {
        if result.is_err() {
            return;
        }
        let array = inputs[slot as usize];
        result = match shapes.get(&array) {
            None => Err(Error::UnknownArray(array)),
            Some(shape) if !region.is_valid_for(shape) => Err(Error::InvalidSlice(format!(
                "region {region} outside {array} {shape}"
            ))),
            Some(_) if region.extent() != expected => Err(Error::ShapeMismatch {
                expected,
                found: region.extent(),
            }),
            Some(_) => Ok(()),
        };
    });
    result
}

impl Wire for Statement {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.ast.0).u32(self.output.0).put(&self.output_region);
        w.u32(self.inputs.len() as u32);
        for a in &self.inputs {
            w.u32(a.0);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let ast = AstId(r.u32()?);
        let output = ArrayId(r.u32()?);
        let output_region = r.get()?;
        let n = r.count(4)?;
        let mut inputs = Vec::with_capacity(n);
        for _ in 0..n {
            inputs.push(ArrayId(r.u32()?));
        }
        Ok(Statement {
            ast,
            output,
            output_region,
            inputs,
        })
    }
}

impl Wire for Dag {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.asts);
        w.u32(self.nodes.len() as u32);
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Create { array, shape } => {
                    w.u8(0).u32(array.0).put(shape);
                }
                NodeKind::Compute { statements } => {
                    w.u8(1).u32(statements.len() as u32);
                    for s in statements {
                        s.encode(w);
                    }
                }
            }
        }
        w.u32(self.edges.len() as u32);
        for e in &self.edges {
            w.u32(e.from.0).u32(e.to.0).u8(e.kind as u8);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let asts: AstTable = r.get()?;
        let n = r.count(5)?;
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let kind = match r.u8()? {
                0 => {
                    let array = ArrayId(r.u32()?);
                    NodeKind::Create {
                        array,
                        shape: r.get()?,
                    }
                }
                1 => {
                    let k = r.count(28)?;
                    let mut statements = Vec::with_capacity(k);
                    for _ in 0..k {
                        statements.push(Statement::decode(r)?);
                    }
                    NodeKind::Compute { statements }
                }
                t => return Err(Error::malformed(format!("unknown node kind {t}"))),
            };
            nodes.push(DagNode::new(NodeId(i as u32), kind));
        }
        let m = r.count(9)?;
        let mut edges: Vec<Edge> = Vec::with_capacity(m);
        for _ in 0..m {
            let from = r.u32()?;
            let to = r.u32()?;
            let kind = DepKind::from_code(r.u8()?)?;
            if from >= to || to as usize >= n {
                return Err(Error::malformed(format!("edge {from}->{to} out of order")));
            }
            let e = Edge {
                from: NodeId(from),
                to: NodeId(to),
                kind,
            };
            // Canonical form: strictly increasing (from, to, kind).
            if edges.last().is_some_and(|last| *last >= e) {
                return Err(Error::malformed(format!("edge {from}->{to} not in canonical order")));
            }
            edges.push(e);
        }
        Ok(Dag {
            nodes,
            edges: edges.into_iter().collect(),
            asts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(n: usize, ids: &[u32]) -> ShapeMap {
        ids.iter().map(|&i| (ArrayId(i), Shape::d2(n, n))).collect()
    }

    fn s(t: &str) -> SliceSpec {
        SliceSpec::parse(t).unwrap()
    }

    fn jacobi(src: ArrayId) -> Expr {
        0.25 * (Expr::at(src, ":-2, 1:-1")
            + Expr::at(src, "2:, 1:-1")
            + Expr::at(src, "1:-1, :-2")
            + Expr::at(src, "1:-1, 2:"))
    }

    #[test]
    fn jacobi_statement_has_one_slot() {
        let sh = shapes(16, &[0, 1]);
        let mut dag = Dag::new();
        let st = dag
            .build_statement(ArrayId(1), &s("1:-1, 1:-1"), &jacobi(ArrayId(0)), &sh)
            .unwrap();
        assert_eq!(st.inputs, vec![ArrayId(0)]);
        let ast = dag.ast(st.ast);
        assert_eq!(ast.arity(), 1);
        let mut refs = 0;
        ast.root().visit_slots(&mut |slot, _| {
            assert_eq!(slot, 0);
            refs += 1;
        });
        assert_eq!(refs, 4);
    }

    #[test]
    fn boundary_constant_has_arity_zero() {
        let sh = shapes(16, &[0]);
        let mut dag = Dag::new();
        let st = dag
            .build_statement(ArrayId(0), &s("0, :"), &Expr::Const(1.0), &sh)
            .unwrap();
        assert!(st.inputs.is_empty());
        assert_eq!(dag.ast(st.ast).arity(), 0);
        assert_eq!(st.output_region.extent(), [1, 16]);
    }

    #[test]
    fn self_dependency_is_rejected() {
        let sh = shapes(16, &[2]);
        let mut dag = Dag::new();
        let e = Expr::at(ArrayId(2), "1:-1, 1:-1") + 1.0;
        let err = dag.build_statement(ArrayId(2), &s("1:-1, 1:-1"), &e, &sh);
        assert!(matches!(err, Err(Error::SelfDependency(ArrayId(2)))));
    }

    #[test]
    fn mismatched_extents_are_rejected() {
        let sh = shapes(16, &[0, 1]);
        let mut dag = Dag::new();
        let e = Expr::at(ArrayId(0), "1:, :");
        let err = dag.build_statement(ArrayId(1), &s(":, :"), &e, &sh);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let e = Expr::at(ArrayId(0), "::2, :");
        let err = dag.build_statement(ArrayId(1), &s(":, :"), &e, &sh);
        assert!(matches!(err, Err(Error::StridedSlice(2))));
    }

    #[test]
    fn raw_and_war_edges() {
        let sh = shapes(8, &[0, 1, 2]);
        let mut dag = Dag::new();
        let a = dag
            .build_statement(ArrayId(1), &s(":, :"), &Expr::at(ArrayId(0), ":, :"), &sh)
            .unwrap();
        let b = dag
            .build_statement(ArrayId(2), &s(":, :"), &Expr::at(ArrayId(1), ":, :"), &sh)
            .unwrap();
        let c = dag
            .build_statement(ArrayId(0), &s(":, :"), &Expr::Const(3.0), &sh)
            .unwrap();
        let na = dag.add_statement(a);
        let nb = dag.add_statement(b);
        let nc = dag.add_statement(c);
        let has = |from, to, kind| dag.edges().contains(&Edge { from, to, kind });
        assert!(has(na, nb, DepKind::True));
        assert!(has(na, nc, DepKind::Anti));
        assert!(!dag.has_edge_between(nb, nc));
        assert_eq!(dag.edges().len(), 2);
    }

    #[test]
    fn laplace_program_shares_one_loop_ast() {
        let (u1, u2) = (ArrayId(0), ArrayId(1));
        let sh = shapes(16, &[0, 1]);
        let mut dag = Dag::new();
        dag.add_create(u1, Shape::d2(16, 16));
        dag.add_create(u2, Shape::d2(16, 16));
        for arr in [u1, u2] {
            for b in ["0, :", "-1, :", ":, 0", ":, -1"] {
                let st = dag.build_statement(arr, &s(b), &Expr::Const(1.0), &sh).unwrap();
                dag.add_statement(st);
            }
        }
        let (mut src, mut dst) = (u1, u2);
        for _ in 0..10 {
            let st = dag
                .build_statement(dst, &s("1:-1, 1:-1"), &jacobi(src), &sh)
                .unwrap();
            dag.add_statement(st);
            std::mem::swap(&mut src, &mut dst);
        }
        assert_eq!(dag.len(), 2 + 8 + 10);
        // one constant AST and one relaxation AST
        assert_eq!(dag.asts().len(), 2);
        let loop_asts: BTreeSet<AstId> = dag.nodes()[10..]
            .iter()
            .map(|n| n.statements()[0].ast)
            .collect();
        assert_eq!(loop_asts.len(), 1);
        dag.validate(&ShapeMap::new()).unwrap();

        let text = dag.dump();
        assert!(text.starts_with("knl0: [create a0 (16,16)] reads={} writes={a0} edges→{"));
        assert!(text.contains("knl10: [a1[1:15,1:15] = ast1(a0)] reads={a0} writes={a1}"));
    }

    #[test]
    fn wire_roundtrip_and_tamper_detection() {
        let sh = shapes(8, &[0, 1]);
        let mut dag = Dag::new();
        let st = dag
            .build_statement(ArrayId(1), &s("1:-1, 1:-1"), &jacobi(ArrayId(0)), &sh)
            .unwrap();
        dag.add_statement(st);
        let st = dag
            .build_statement(ArrayId(0), &s("1:-1, 1:-1"), &jacobi(ArrayId(1)), &sh)
            .unwrap();
        dag.add_statement(st);
        let bytes = dag.to_bytes();
        let back = Dag::from_bytes(&bytes).unwrap();
        assert_eq!(back, dag);
        back.validate(&sh).unwrap();

        let mut stripped = Dag::from_bytes(&bytes).unwrap();
        stripped.edges.clear();
        assert!(matches!(stripped.validate(&sh), Err(Error::MalformedDag(_))));
    }
}
