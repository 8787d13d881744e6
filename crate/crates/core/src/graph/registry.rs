use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;

use super::{GraphError, KnowledgeGraph};

/// Graphs by id. Readers get an `Arc` snapshot, so a replacement never
/// disturbs a query already running against the old graph.
#[derive(Debug, Default)]
pub struct GraphRegistry {
    graphs: RwLock<BTreeMap<String, Arc<KnowledgeGraph>>>,
}

impl GraphRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, graph: KnowledgeGraph, replace: bool) -> Result<(), GraphError> {
        let mut graphs = self.graphs.write();
        if !replace && graphs.contains_key(graph.kg_id()) {
            return Err(GraphError::DuplicateKgId(graph.kg_id().to_string()));
        }
        graphs.insert(graph.kg_id().to_string(), Arc::new(graph));
        Ok(())
    }

    pub fn get(&self, kg_id: &str) -> Result<Arc<KnowledgeGraph>, GraphError> {
        self.graphs
            .read()
            .get(kg_id)
            .cloned()
            .ok_or_else(|| GraphError::UnknownKg(kg_id.to_string()))
    }

    pub fn contains(&self, kg_id: &str) -> bool {
        self.graphs.read().contains_key(kg_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.graphs.read().keys().cloned().collect()
    }
}
