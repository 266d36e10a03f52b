#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use onenet_core::exemplar::{ExemplarPool, HashingEmbedder};
use onenet_core::kb::{load_alias_table, load_dataset, load_entity_store};
use onenet_core::llm::TemplateSet;
use onenet_core::pipeline::StageBackends;
use onenet_core::{AliasTable, EntityStore, MentionRecord, MockBackend, Pipeline, PipelineConfig};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/case_study").join(name)
}

pub struct CaseStudy {
    pub store: Arc<EntityStore>,
    pub aliases: Arc<AliasTable>,
    pub dataset: Vec<MentionRecord>,
    pub train: Vec<MentionRecord>,
}

impl CaseStudy {
    pub fn load() -> Self {
        let store = load_entity_store(fixture("entities.jsonl")).unwrap();
        let aliases = load_alias_table(fixture("aliases.tsv")).unwrap();
        aliases.validate(&store).unwrap();
        Self {
            store: Arc::new(store),
            aliases: Arc::new(aliases),
            dataset: load_dataset(fixture("dataset.jsonl")).unwrap(),
            train: load_dataset(fixture("train.jsonl")).unwrap(),
        }
    }

    pub fn record(&self, id: &str) -> &MentionRecord {
        self.dataset.iter().find(|r| r.id == id).unwrap()
    }

    pub fn mock() -> Arc<MockBackend> {
        Arc::new(MockBackend::from_script_file(fixture("mock.jsonl")).unwrap())
    }

    pub fn config() -> PipelineConfig {
        PipelineConfig { dataset_id: "case-study".into(), ..PipelineConfig::default() }
    }

    pub fn bare_pipeline(&self, mock: Arc<MockBackend>, config: PipelineConfig) -> Pipeline {
        Pipeline::new(config, self.store.clone(), TemplateSet::default(), StageBackends::uniform(mock))
            .unwrap()
            .with_aliases(self.aliases.clone())
    }

    pub fn pool(&self) -> ExemplarPool {
        let teacher = self.bare_pipeline(Self::mock(), Self::config());
        teacher.build_pool(&self.train).unwrap().pool
    }

    /// The full pipeline with a distilled exemplar pool, over a fresh mock.
    pub fn pipeline(&self, mock: Arc<MockBackend>, config: PipelineConfig) -> Pipeline {
        self.bare_pipeline(mock, config)
            .with_pool(self.pool(), Box::new(HashingEmbedder::default()))
            .unwrap()
    }
}
