//! Hierarchical knowledge graphs: typed nodes with scalar attributes, labelled
//! edges, and per-kind fact exports used to distil query results into named
//! values.

mod query;
mod registry;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Scalar;
use crate::template::join_natural;

pub use query::{AttributeFilter, ContextBundle, Direction, FilterOp, KGQuery, NodeFilter, RelationConstraint};
pub use registry::GraphRegistry;

/// Relations treated as parent → child links when no list is given.
pub const DEFAULT_HIERARCHY_RELATIONS: &[&str] = &["has-subdomain", "has-endpoint"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("hierarchy relations form a cycle through node `{0}`")]
    Cycle(String),
    #[error("unknown attribute operator `{0}`")]
    UnknownOperator(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("knowledge graph `{0}` is already registered")]
    DuplicateKgId(String),
    #[error("knowledge graph `{0}` is not registered")]
    UnknownKg(String),
}

impl GraphError {
    pub fn code(&self) -> &'static str {
        match self {
            GraphError::Io { .. } => "io-error",
            GraphError::Schema(_) => "schema-error",
            GraphError::Cycle(_) => "cycle-error",
            GraphError::UnknownOperator(_) => "unknown-attribute-operator",
            GraphError::InvalidQuery(_) => "invalid-query",
            GraphError::DuplicateKgId(_) => "duplicate-kg-id",
            GraphError::UnknownKg(_) => "unknown-kg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KGNode {
    #[serde(rename = "id")]
    pub node_id: String,
    pub kind: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Scalar>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KGEdge {
    pub from: String,
    pub to: String,
    pub relation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoaderFormat {
    #[default]
    Toml,
    Json,
}

/// Where a graph comes from. `source_id` doubles as the graph id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDescriptor")]
pub struct DataSourceDescriptor {
    pub source_id: String,
    pub uri: String,
    pub format: LoaderFormat,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    source_id: String,
    uri: String,
    #[serde(default)]
    format: Option<LoaderFormat>,
}

impl TryFrom<RawDescriptor> for DataSourceDescriptor {
    type Error = GraphError;

    fn try_from(raw: RawDescriptor) -> Result<Self, Self::Error> {
        let format = raw.format.unwrap_or_else(|| LoaderFormat::from_path(&raw.uri));
        DataSourceDescriptor::new(raw.source_id, raw.uri, format)
    }
}

impl DataSourceDescriptor {
    pub fn new(source_id: impl Into<String>, uri: impl Into<String>, format: LoaderFormat) -> Result<Self, GraphError> {
        let uri = uri.into();
        let source_id = source_id.into();
        if uri.trim().is_empty() {
            return Err(GraphError::Schema("data source uri is empty".into()));
        }
        if source_id.trim().is_empty() {
            return Err(GraphError::Schema("data source id is empty".into()));
        }
        Ok(Self { source_id, uri, format })
    }
}

impl LoaderFormat {
    fn from_path(uri: &str) -> Self {
        if uri.ends_with(".json") {
            LoaderFormat::Json
        } else {
            LoaderFormat::Toml
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    /// Value on the first matched node (by node id).
    #[default]
    First,
    /// Number of matched nodes of the kind.
    Count,
    Min,
    Max,
    Sum,
    /// All values joined as natural language.
    List,
    /// Like `list`, without repeats.
    Distinct,
}

/// Declares how matched nodes of `kind` turn into a named fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactExport {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub aggregate: Aggregate,
    /// Appended to each item when rendering `list`/`distinct` values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suffix: Option<String>,
}

impl FactExport {
    pub fn fact_name(&self) -> String {
        match (&self.name, &self.attribute) {
            (Some(name), _) => name.clone(),
            (None, Some(attr)) => attr.clone(),
            (None, None) => format!("{}_count", self.kind.replace('-', "_")),
        }
    }

    fn extract(&self, nodes: &[&KGNode]) -> Option<Scalar> {
        let of_kind: Vec<&KGNode> = nodes.iter().copied().filter(|n| n.kind == self.kind).collect();
        if self.aggregate == Aggregate::Count {
            return Some(Scalar::Number(of_kind.len() as f64));
        }
        let values: Vec<&Scalar> = match &self.attribute {
            Some(attr) => of_kind.iter().filter_map(|n| n.attributes.get(attr)).collect(),
            None => return None,
        };
        let numbers = || values.iter().filter_map(|v| v.as_f64());
        match self.aggregate {
            Aggregate::Count => unreachable!(),
            Aggregate::First => values.first().map(|v| (*v).clone()),
            Aggregate::Min => numbers().reduce(f64::min).map(Scalar::Number),
            Aggregate::Max => numbers().reduce(f64::max).map(Scalar::Number),
            Aggregate::Sum => {
                let mut it = numbers().peekable();
                it.peek()?;
                Some(Scalar::Number(it.sum()))
            }
            Aggregate::List | Aggregate::Distinct => {
                let mut items: Vec<&Scalar> = Vec::new();
                for v in values {
                    if self.aggregate == Aggregate::List || !items.contains(&v) {
                        items.push(v);
                    }
                }
                match (items.as_slice(), &self.suffix) {
                    ([], _) => None,
                    ([only], None) => Some((*only).clone()),
                    (_, suffix) => {
                        let suffix = suffix.as_deref().unwrap_or("");
                        let rendered: Vec<String> = items.iter().map(|v| format!("{v}{suffix}")).collect();
                        Some(Scalar::Text(join_natural(&rendered)))
                    }
                }
            }
        }
    }
}

/// On-disk shape of a knowledge graph file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy_relations: Option<Vec<String>>,
    #[serde(default)]
    pub nodes: Vec<KGNode>,
    #[serde(default)]
    pub edges: Vec<KGEdge>,
    #[serde(default)]
    pub facts: Vec<FactExport>,
}

impl GraphDocument {
    pub fn parse(text: &str, format: LoaderFormat) -> Result<Self, GraphError> {
        match format {
            LoaderFormat::Toml => toml::from_str(text).map_err(|e| GraphError::Schema(e.to_string())),
            LoaderFormat::Json => serde_json::from_str(text).map_err(|e| GraphError::Schema(e.to_string())),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("graph documents serialize to TOML")
    }
}

/// An immutable, indexed graph snapshot.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    kg_id: String,
    source: Option<DataSourceDescriptor>,
    nodes: BTreeMap<String, KGNode>,
    edges: Vec<KGEdge>,
    facts: Vec<FactExport>,
    hierarchy_relations: Vec<String>,
    by_kind: HashMap<String, BTreeSet<String>>,
    eq_index: HashMap<(String, String), HashMap<String, BTreeSet<String>>>,
    incident: HashMap<String, Vec<usize>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.kg_id == other.kg_id
            && self.nodes == other.nodes
            && self.edges == other.edges
            && self.facts == other.facts
            && self.hierarchy_relations == other.hierarchy_relations
    }
}

pub(crate) fn index_key(value: &Scalar) -> String {
    match value {
        Scalar::Bool(b) => format!("b:{b}"),
        Scalar::Number(n) => {
            let n = if *n == 0.0 { 0.0 } else { *n };
            format!("n:{}", n.to_bits())
        }
        Scalar::Text(s) => format!("t:{s}"),
    }
}

impl KnowledgeGraph {
    pub fn from_document(
        kg_id: impl Into<String>,
        doc: GraphDocument,
        source: Option<DataSourceDescriptor>,
    ) -> Result<Self, GraphError> {
        let kg_id = kg_id.into();
        let mut nodes = BTreeMap::new();
        for node in doc.nodes {
            if node.node_id.trim().is_empty() {
                return Err(GraphError::Schema("node with empty id".into()));
            }
            if node.kind.trim().is_empty() {
                return Err(GraphError::Schema(format!("node `{}` has an empty kind", node.node_id)));
            }
            if nodes.contains_key(&node.node_id) {
                return Err(GraphError::Schema(format!("duplicate node id `{}`", node.node_id)));
            }
            nodes.insert(node.node_id.clone(), node);
        }
        for edge in &doc.edges {
            for end in [&edge.from, &edge.to] {
                if !nodes.contains_key(end) {
                    return Err(GraphError::Schema(format!(
                        "edge {} -[{}]-> {} references missing node `{end}`",
                        edge.from, edge.relation, edge.to
                    )));
                }
            }
        }
        let hierarchy_relations = doc
            .hierarchy_relations
            .unwrap_or_else(|| DEFAULT_HIERARCHY_RELATIONS.iter().map(|s| s.to_string()).collect());
        check_hierarchy(&doc.edges, &hierarchy_relations)?;

        let mut by_kind: HashMap<String, BTreeSet<String>> = HashMap::new();
        let mut eq_index: HashMap<(String, String), HashMap<String, BTreeSet<String>>> = HashMap::new();
        for node in nodes.values() {
            by_kind.entry(node.kind.clone()).or_default().insert(node.node_id.clone());
            for (key, value) in &node.attributes {
                eq_index
                    .entry((node.kind.clone(), key.clone()))
                    .or_default()
                    .entry(index_key(value))
                    .or_default()
                    .insert(node.node_id.clone());
            }
        }
        let mut incident: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, edge) in doc.edges.iter().enumerate() {
            incident.entry(edge.from.clone()).or_default().push(i);
            if edge.to != edge.from {
                incident.entry(edge.to.clone()).or_default().push(i);
            }
        }

        Ok(Self {
            kg_id,
            source,
            nodes,
            edges: doc.edges,
            facts: doc.facts,
            hierarchy_relations,
            by_kind,
            eq_index,
            incident,
        })
    }

    pub fn kg_id(&self) -> &str {
        &self.kg_id
    }

    pub fn source(&self) -> Option<&DataSourceDescriptor> {
        self.source.as_ref()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KGNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&KGNode> {
        self.nodes.get(id)
    }

    pub fn edges(&self) -> &[KGEdge] {
        &self.edges
    }

    pub fn fact_exports(&self) -> &[FactExport] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            hierarchy_relations: Some(self.hierarchy_relations.clone()),
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges.clone(),
            facts: self.facts.clone(),
        }
    }

    pub(crate) fn incident_edges(&self, node_id: &str) -> impl Iterator<Item = &KGEdge> {
        self.incident
            .get(node_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.edges[i])
    }

    pub(crate) fn kind_members(&self, kind: &str) -> Option<&BTreeSet<String>> {
        self.by_kind.get(kind)
    }

    pub(crate) fn eq_lookup(&self, kind: &str, key: &str, value: &Scalar) -> Option<&BTreeSet<String>> {
        self.eq_index
            .get(&(kind.to_string(), key.to_string()))
            .and_then(|values| values.get(&index_key(value)))
    }

    /// Facts distilled from `nodes` by this graph's export declarations.
    pub fn render_facts(&self, nodes: &[&KGNode]) -> BTreeMap<String, Scalar> {
        self.facts
            .iter()
            .filter_map(|export| export.extract(nodes).map(|v| (export.fact_name(), v)))
            .collect()
    }

    /// The whole graph as one context bundle, with no narrowing at all.
    pub fn scan_all(&self) -> ContextBundle {
        let nodes: Vec<&KGNode> = self.nodes.values().collect();
        ContextBundle {
            kg_id: self.kg_id.clone(),
            sub_prompt_id: 0,
            rendered_facts: self.render_facts(&nodes),
            matched_nodes: nodes.into_iter().cloned().collect(),
            matched_edges: self.edges.clone(),
        }
    }
}

fn check_hierarchy(edges: &[KGEdge], relations: &[String]) -> Result<(), GraphError> {
    use petgraph::graphmap::DiGraphMap;

    let mut graph = DiGraphMap::<&str, ()>::new();
    for edge in edges.iter().filter(|e| relations.contains(&e.relation)) {
        if edge.from == edge.to {
            return Err(GraphError::Cycle(edge.from.clone()));
        }
        graph.add_edge(edge.from.as_str(), edge.to.as_str(), ());
    }
    petgraph::algo::toposort(&graph, None)
        .map(|_| ())
        .map_err(|cycle| GraphError::Cycle(cycle.node_id().to_string()))
}

/// Reads and validates the graph described by `desc`.
pub fn load_graph(desc: &DataSourceDescriptor) -> Result<KnowledgeGraph, GraphError> {
    let text = std::fs::read_to_string(Path::new(&desc.uri)).map_err(|e| GraphError::Io {
        path: desc.uri.clone(),
        message: e.to_string(),
    })?;
    let doc = GraphDocument::parse(&text, desc.format)?;
    KnowledgeGraph::from_document(desc.source_id.clone(), doc, Some(desc.clone()))
}
