use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GraphError, KGEdge, KGNode, KnowledgeGraph};
use crate::model::{Scalar, SubPromptId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FilterOp {
    Eq,
    Lt,
    Gt,
    Contains,
}

impl FromStr for FilterOp {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eq" => Ok(FilterOp::Eq),
            "lt" => Ok(FilterOp::Lt),
            "gt" => Ok(FilterOp::Gt),
            "contains" => Ok(FilterOp::Contains),
            other => Err(GraphError::UnknownOperator(other.to_string())),
        }
    }
}

impl TryFrom<String> for FilterOp {
    type Error = GraphError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FilterOp> for String {
    fn from(op: FilterOp) -> Self {
        op.to_string()
    }
}

impl fmt::Display for FilterOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterOp::Eq => "eq",
            FilterOp::Lt => "lt",
            FilterOp::Gt => "gt",
            FilterOp::Contains => "contains",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFilter {
    pub key: String,
    pub op: FilterOp,
    pub value: Scalar,
}

impl AttributeFilter {
    pub fn new(key: impl Into<String>, op: FilterOp, value: impl Into<Scalar>) -> Self {
        Self {
            key: key.into(),
            op,
            value: value.into(),
        }
    }

    pub fn matches(&self, node: &KGNode) -> bool {
        let Some(actual) = node.attributes.get(&self.key) else {
            return false;
        };
        match self.op {
            FilterOp::Eq => actual == &self.value,
            FilterOp::Lt => matches!((actual.as_f64(), self.value.as_f64()), (Some(a), Some(b)) if a < b),
            FilterOp::Gt => matches!((actual.as_f64(), self.value.as_f64()), (Some(a), Some(b)) if a > b),
            FilterOp::Contains => match (actual, &self.value) {
                (Scalar::Text(a), Scalar::Text(b)) => a.contains(b.as_str()),
                _ => false,
            },
        }
    }
}

/// Which way an edge must point, seen from the node being matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// matched node → related node
    Out,
    /// related node → matched node
    In,
    #[default]
    Any,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default)]
    pub attribute_filters: Vec<AttributeFilter>,
}

impl NodeFilter {
    pub fn matches(&self, node: &KGNode) -> bool {
        self.kind.as_ref().is_none_or(|k| &node.kind == k) && self.attribute_filters.iter().all(|f| f.matches(node))
    }
}

/// One-hop constraint: the node must have a `relation` edge to a node
/// accepted by `related`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConstraint {
    pub relation: String,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub related: NodeFilter,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KGQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_kind: Option<String>,
    #[serde(default)]
    pub attribute_filters: Vec<AttributeFilter>,
    #[serde(default)]
    pub relation_constraints: Vec<RelationConstraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl KGQuery {
    pub fn kind(kind: impl Into<String>) -> Self {
        Self {
            node_kind: Some(kind.into()),
            ..Default::default()
        }
    }

    pub fn filter(mut self, key: impl Into<String>, op: FilterOp, value: impl Into<Scalar>) -> Self {
        self.attribute_filters.push(AttributeFilter::new(key, op, value));
        self
    }

    pub fn related(mut self, constraint: RelationConstraint) -> Self {
        self.relation_constraints.push(constraint);
        self
    }

    pub fn limit(mut self, limit: usize) -> Self {
        self.limit = Some(limit);
        self
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.node_kind.is_none() && self.attribute_filters.is_empty() && self.relation_constraints.is_empty() {
            return Err(GraphError::InvalidQuery(
                "query needs a node kind, an attribute filter or a relation constraint".into(),
            ));
        }
        if self.limit == Some(0) {
            return Err(GraphError::InvalidQuery("limit must be positive".into()));
        }
        Ok(())
    }

    fn satisfied_by(&self, graph: &KnowledgeGraph, node: &KGNode) -> bool {
        self.node_kind.as_ref().is_none_or(|k| &node.kind == k)
            && self.attribute_filters.iter().all(|f| f.matches(node))
            && self.relation_constraints.iter().all(|c| {
                graph.incident_edges(&node.node_id).any(|edge| {
                    if edge.relation != c.relation {
                        return false;
                    }
                    let out = edge.from == node.node_id && matches!(c.direction, Direction::Out | Direction::Any);
                    let inc = edge.to == node.node_id && matches!(c.direction, Direction::In | Direction::Any);
                    (out && graph.node(&edge.to).is_some_and(|n| c.related.matches(n)))
                        || (inc && graph.node(&edge.from).is_some_and(|n| c.related.matches(n)))
                })
            })
    }
}

/// The slice of a graph retrieved for one sub-prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextBundle {
    pub kg_id: String,
    pub sub_prompt_id: SubPromptId,
    pub matched_nodes: Vec<KGNode>,
    pub matched_edges: Vec<KGEdge>,
    pub rendered_facts: BTreeMap<String, Scalar>,
}

impl ContextBundle {
    pub fn for_sub_prompt(mut self, id: SubPromptId) -> Self {
        self.sub_prompt_id = id;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.matched_nodes.is_empty()
    }
}

impl KnowledgeGraph {
    /// Nodes satisfying every part of `q`, in node-id order, plus the edges
    /// among them and the facts they export.
    pub fn query(&self, q: &KGQuery) -> Result<ContextBundle, GraphError> {
        q.validate()?;

        let indexed = q.node_kind.as_ref().and_then(|kind| {
            q.attribute_filters
                .iter()
                .find(|f| f.op == FilterOp::Eq)
                .map(|f| self.eq_lookup(kind, &f.key, &f.value))
        });
        let candidates: Box<dyn Iterator<Item = &KGNode>> = match (indexed, &q.node_kind) {
            (Some(None), _) => Box::new(std::iter::empty()),
            (Some(Some(ids)), _) => Box::new(ids.iter().filter_map(|id| self.node(id))),
            (None, Some(kind)) => match self.kind_members(kind) {
                Some(ids) => Box::new(ids.iter().filter_map(|id| self.node(id))),
                None => Box::new(std::iter::empty()),
            },
            (None, None) => Box::new(self.nodes()),
        };

        let mut matched: Vec<&KGNode> = candidates.filter(|n| q.satisfied_by(self, n)).collect();
        if let Some(limit) = q.limit {
            matched.truncate(limit);
        }
        let ids: BTreeSet<&str> = matched.iter().map(|n| n.node_id.as_str()).collect();
        let matched_edges = self
            .edges()
            .iter()
            .filter(|e| ids.contains(e.from.as_str()) && ids.contains(e.to.as_str()))
            .cloned()
            .collect();

        Ok(ContextBundle {
            kg_id: self.kg_id().to_string(),
            sub_prompt_id: 0,
            rendered_facts: self.render_facts(&matched),
            matched_nodes: matched.into_iter().cloned().collect(),
            matched_edges,
        })
    }
}
