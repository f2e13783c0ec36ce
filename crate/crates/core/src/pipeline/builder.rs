use std::str::FromStr;

use super::{DatasetGraph, FunctionRegistry, OpKind, OperatorSpec, PipelineError};

/// Unvalidated pipeline description.
///
/// Built either with the fluent [`Pipeline`] API or parsed from text:
///
/// ```text
/// source(type=range, end=6) | filter(fn=even_key) | batch(size=2)
/// ```
///
/// Values are integers, `[a, b, ...]` integer lists, `true`/`false`, or
/// strings (bare or double-quoted).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineSpec {
    pub nodes: Vec<OperatorSpec>,
}

/// Validates a description against the registry and returns the graph.
pub fn build_graph(
    spec: &PipelineSpec,
    registry: &FunctionRegistry,
) -> Result<DatasetGraph, PipelineError> {
    let graph = DatasetGraph::from_nodes(spec.nodes.clone())?;
    graph.check_functions(registry)?;
    Ok(graph)
}

/// Fluent builder.
#[derive(Debug, Clone)]
pub struct Pipeline {
    spec: PipelineSpec,
}

impl Pipeline {
    pub fn range(start: u64, end: u64) -> Self {
        Self::from_source(
            OperatorSpec::new(OpKind::Source)
                .with_str("type", "range")
                .with_u64("start", start)
                .with_u64("end", end),
        )
    }

    pub fn records(dir: &str, granularity: &str, shards: u64) -> Self {
        Self::from_source(
            OperatorSpec::new(OpKind::Source)
                .with_str("type", "records")
                .with_str("dir", dir)
                .with_str("granularity", granularity)
                .with_u64("shards", shards),
        )
    }

    pub fn from_source(source: OperatorSpec) -> Self {
        Self {
            spec: PipelineSpec {
                nodes: vec![source],
            },
        }
    }

    pub fn then(mut self, node: OperatorSpec) -> Self {
        self.spec.nodes.push(node);
        self
    }

    pub fn map(self, f: &str) -> Self {
        self.then(OperatorSpec::new(OpKind::Map).with_str("fn", f))
    }

    pub fn map_with(self, f: &str, arg: u64, parallelism: u64) -> Self {
        self.then(
            OperatorSpec::new(OpKind::Map)
                .with_str("fn", f)
                .with_u64("arg", arg)
                .with_u64("parallelism", parallelism),
        )
    }

    pub fn filter(self, p: &str) -> Self {
        self.then(OperatorSpec::new(OpKind::Filter).with_str("fn", p))
    }

    pub fn shuffle(self, buffer_size: u64, seed: u64) -> Self {
        self.then(
            OperatorSpec::new(OpKind::Shuffle)
                .with_u64("buffer_size", buffer_size)
                .with_u64("seed", seed),
        )
    }

    pub fn repeat(self, count: u64) -> Self {
        self.then(OperatorSpec::new(OpKind::Repeat).with_u64("count", count))
    }

    pub fn batch(self, size: u64) -> Self {
        self.then(OperatorSpec::new(OpKind::Batch).with_u64("size", size))
    }

    pub fn pad(self) -> Self {
        self.then(OperatorSpec::new(OpKind::Pad))
    }

    pub fn prefetch(self, buffer_size: u64) -> Self {
        self.then(OperatorSpec::new(OpKind::Prefetch).with_u64("buffer_size", buffer_size))
    }

    pub fn bucket_by_sequence_length(self, boundaries: &[u64], batch_size: u64) -> Self {
        self.then(
            OperatorSpec::new(OpKind::BucketBySequenceLength)
                .with_list("boundaries", boundaries)
                .with_u64("batch_size", batch_size),
        )
    }

    pub fn group_by_window(self, window_size: u64) -> Self {
        self.then(OperatorSpec::new(OpKind::GroupByWindow).with_u64("window_size", window_size))
    }

    pub fn flat_map(self, f: &str) -> Self {
        self.then(OperatorSpec::new(OpKind::FlatMap).with_str("fn", f))
    }

    pub fn take(self, count: u64) -> Self {
        self.then(OperatorSpec::new(OpKind::Take).with_u64("count", count))
    }

    pub fn cache(self) -> Self {
        self.then(OperatorSpec::new(OpKind::Cache))
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn build(&self, registry: &FunctionRegistry) -> Result<DatasetGraph, PipelineError> {
        build_graph(&self.spec, registry)
    }
}

impl FromStr for PipelineSpec {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = |m: String| PipelineError::MalformedSpec(m);
        let mut nodes = Vec::new();
        for stage in split_top_level(s, '|') {
            let stage = stage.trim();
            if stage.is_empty() {
                return Err(malformed("empty stage".into()));
            }
            let (name, args) = match stage.find('(') {
                Some(open) => {
                    if !stage.ends_with(')') {
                        return Err(malformed(format!("unclosed parenthesis in {stage:?}")));
                    }
                    (&stage[..open], &stage[open + 1..stage.len() - 1])
                }
                None => (stage, ""),
            };
            let kind = OpKind::from_name(name.trim())
                .ok_or_else(|| malformed(format!("unknown operator {:?}", name.trim())))?;
            let mut node = OperatorSpec::new(kind);
            for arg in split_top_level(args, ',') {
                let arg = arg.trim();
                if arg.is_empty() {
                    continue;
                }
                let (k, v) = arg
                    .split_once('=')
                    .ok_or_else(|| malformed(format!("expected key=value, got {arg:?}")))?;
                node = put_value(node, k.trim(), v.trim())?;
            }
            nodes.push(node);
        }
        Ok(PipelineSpec { nodes })
    }
}

fn put_value(node: OperatorSpec, key: &str, raw: &str) -> Result<OperatorSpec, PipelineError> {
    if let Some(inner) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let values = inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u64>().map_err(|_| {
                    PipelineError::MalformedSpec(format!("bad list item {s:?} for {key}"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(node.with_list(key, &values));
    }
    if let Some(q) = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        return Ok(node.with_str(key, q));
    }
    match raw {
        "true" => return Ok(node.with_bool(key, true)),
        "false" => return Ok(node.with_bool(key, false)),
        _ => {}
    }
    if let Ok(v) = raw.parse::<u64>() {
        return Ok(node.with_u64(key, v));
    }
    Ok(node.with_str(key, raw))
}

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut in_quotes = false;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '(' | '[' if !in_quotes => depth += 1,
            ')' | ']' if !in_quotes => depth -= 1,
            c if c == sep && depth == 0 && !in_quotes => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_text_form() {
        let spec: PipelineSpec = "source(type=range, end=6) | filter(fn=even_key) | batch(size=2)"
            .parse()
            .unwrap();
        let g = build_graph(&spec, &FunctionRegistry::default()).unwrap();
        assert_eq!(
            g.kinds(),
            vec![OpKind::Source, OpKind::Filter, OpKind::Batch]
        );
        let same = Pipeline::range(0, 6).filter("even_key").batch(2);
        // start=0 is explicit in the builder only
        assert_ne!(
            g.fingerprint(),
            same.build(&FunctionRegistry::default())
                .unwrap()
                .fingerprint()
        );
    }

    #[test]
    fn figure_style_bucketing_pipeline() {
        let spec: PipelineSpec = "source(type=range, end=100) \
            | bucket_by_sequence_length(boundaries=[128, 256], batch_size=4) \
            | group_by_window(window_size=2) | flat_map(fn=identity)"
            .parse()
            .unwrap();
        let g = build_graph(&spec, &FunctionRegistry::default()).unwrap();
        assert_eq!(g.nodes().len(), 4);
    }

    #[test]
    fn unknown_function_is_reported() {
        let err = Pipeline::range(0, 4)
            .map("not_registered")
            .build(&FunctionRegistry::default())
            .unwrap_err();
        assert_eq!(err, PipelineError::UnknownFunction("not_registered".into()));
    }

    #[test]
    fn malformed_text() {
        for bad in [
            "",
            "nosuchop(x=1)",
            "batch(size=2",
            "source(type=range, end)",
        ] {
            let r = bad.parse::<PipelineSpec>();
            assert!(
                r.is_err() || build_graph(&r.unwrap(), &FunctionRegistry::default()).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn quoted_strings_keep_separators() {
        let spec: PipelineSpec = r#"source(type=records, dir="/tmp/a,b|c")"#.parse().unwrap();
        assert_eq!(spec.nodes[0].params.str("dir").unwrap(), "/tmp/a,b|c");
    }
}
