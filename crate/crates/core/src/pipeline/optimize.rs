use super::functions::{ALWAYS_TRUE, IDENTITY};
use super::{DatasetGraph, OpKind, OperatorSpec};

/// Buffer size of an injected prefetch node.
pub const DEFAULT_PREFETCH_BUFFER: u64 = 2;

/// Static rewrites, applied in order:
///
/// 1. drop dead transformations (`map(identity)`, `filter(always_true)`);
/// 2. fuse `map` immediately followed by `filter` into `fused_map_filter`;
/// 3. append a prefetch before the sink when the graph has none.
///
/// Each pass preserves the output sequence and the result is a fixed point.
pub fn optimize(g: &DatasetGraph) -> DatasetGraph {
    let nodes = inject_prefetch(fuse_map_filter(eliminate_dead(g.nodes().to_vec())));
    DatasetGraph::from_nodes(nodes).expect("rewrites keep a valid graph")
}

fn eliminate_dead(nodes: Vec<OperatorSpec>) -> Vec<OperatorSpec> {
    nodes
        .into_iter()
        .filter(|n| match n.kind {
            OpKind::Map => n.fn_id("fn") != IDENTITY,
            OpKind::Filter => n.fn_id("fn") != ALWAYS_TRUE,
            _ => true,
        })
        .collect()
}

fn fuse_map_filter(nodes: Vec<OperatorSpec>) -> Vec<OperatorSpec> {
    let mut out: Vec<OperatorSpec> = Vec::with_capacity(nodes.len());
    for node in nodes {
        if node.kind == OpKind::Filter {
            if let Some(map) = out.pop_if(|prev| prev.kind == OpKind::Map) {
                let mut fused = OperatorSpec::new(OpKind::FusedMapFilter)
                    .with_str("map_fn", map.fn_id("fn"))
                    .with_str("filter_fn", node.fn_id("fn"));
                if let Ok(Some(arg)) = map.params.opt_u64("arg") {
                    fused = fused.with_u64("map_arg", arg);
                }
                if let Ok(Some(arg)) = node.params.opt_u64("arg") {
                    fused = fused.with_u64("filter_arg", arg);
                }
                if let Ok(Some(p)) = map.params.opt_u64("parallelism") {
                    fused = fused.with_u64("parallelism", p);
                }
                out.push(fused);
                continue;
            }
        }
        out.push(node);
    }
    out
}

fn inject_prefetch(mut nodes: Vec<OperatorSpec>) -> Vec<OperatorSpec> {
    if !nodes.iter().any(|n| n.kind == OpKind::Prefetch) {
        nodes.push(
            OperatorSpec::new(OpKind::Prefetch).with_u64("buffer_size", DEFAULT_PREFETCH_BUFFER),
        );
    }
    nodes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{FunctionRegistry, Pipeline};

    fn build(p: Pipeline) -> DatasetGraph {
        p.build(&FunctionRegistry::default()).unwrap()
    }

    #[test]
    fn identity_map_is_dead() {
        let g = optimize(&build(Pipeline::range(0, 8).map("identity").batch(2)));
        assert_eq!(
            g.kinds(),
            vec![OpKind::Source, OpKind::Batch, OpKind::Prefetch]
        );
    }

    #[test]
    fn map_filter_fusion() {
        let g = optimize(&build(
            Pipeline::range(0, 8)
                .map("xor_payload")
                .filter("even_key")
                .batch(2)
                .prefetch(2),
        ));
        assert_eq!(
            g.kinds(),
            vec![
                OpKind::Source,
                OpKind::FusedMapFilter,
                OpKind::Batch,
                OpKind::Prefetch
            ]
        );
        let fused = &g.nodes()[1];
        assert_eq!(fused.fn_id("map_fn"), "xor_payload");
        assert_eq!(fused.fn_id("filter_fn"), "even_key");
    }

    #[test]
    fn idempotent() {
        let g = optimize(&build(
            Pipeline::range(0, 8)
                .map("identity")
                .map("burn")
                .filter("always_true")
                .filter("odd_key"),
        ));
        assert_eq!(optimize(&g), g);
    }

    #[test]
    fn dead_filter_then_fusion_of_newly_adjacent_nodes() {
        let g = optimize(&build(
            Pipeline::range(0, 8)
                .map("burn")
                .filter("always_true")
                .filter("even_key"),
        ));
        assert_eq!(
            g.kinds(),
            vec![OpKind::Source, OpKind::FusedMapFilter, OpKind::Prefetch]
        );
    }
}
