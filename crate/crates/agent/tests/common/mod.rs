#![allow(dead_code)]

use std::collections::BTreeMap;

use tkgqa_agent::gateway::RetryPolicy;
use tkgqa_agent::scripted::ScriptedResponder;
use tkgqa_agent::{Agent, EpisodeConfig, Gateway};
use tkgqa_core::eval::QuestionRecord;
use tkgqa_core::search::SearchSettings;
use tkgqa_core::{FactIndex, HashEmbedder, SearchTool, TkgStore};

pub const FACTS: &str = "\
China\tMake_statement\tJapan\t2005-03-01
Japan\tConsult\tChina\t2005-04
Iran\tHost_a_visit\tFrance\t2006
France\tCriticize_or_denounce\tIran\t2006-02-11
Abdul_Hamid\tExpress_intent_to_meet\tRanil_Wickremesinghe\t2007-01-05
Ranil_Wickremesinghe\tConsult\tAbdul_Hamid\t2007-02
China\tHost_a_visit\tIran\t2004/2006
Japan\tMake_statement\tFrance\t2008-12-30
";

pub struct Fixture {
    pub store: TkgStore,
    pub index: FactIndex,
    pub embedder: HashEmbedder,
}

impl Fixture {
    pub fn new() -> Self {
        let store = TkgStore::parse_tsv(FACTS).unwrap();
        let embedder = HashEmbedder::new(32, 11);
        let index = FactIndex::build(&store, &embedder, 4).unwrap();
        Self { store, index, embedder }
    }

    pub fn tool(&self) -> SearchTool<'_> {
        SearchTool::new(&self.store, &self.index, &self.embedder, SearchSettings::default()).unwrap()
    }
}

pub fn gateway(responder: ScriptedResponder) -> Gateway {
    Gateway::new(responder).with_retry(RetryPolicy::immediate())
}

pub fn with_agent<R>(responder: ScriptedResponder, f: impl FnOnce(&Agent<'_>) -> R) -> R {
    let fx = Fixture::new();
    let tool = fx.tool();
    let gw = gateway(responder);
    f(&Agent::new(&tool, &gw))
}

pub fn cfg(t_max: usize) -> EpisodeConfig {
    EpisodeConfig {
        t_max,
        record_timings: false,
        ..Default::default()
    }
}

pub fn question(id: &str, text: &str, answer: &str) -> QuestionRecord {
    QuestionRecord {
        id: id.into(),
        text: text.into(),
        answers: vec![answer.into()],
        labels: BTreeMap::new(),
    }
}

pub fn search(query: &str) -> String {
    format!("<think>Search for {query}.</think><search>{{\"query\":\"{query}\"}}</search>")
}

pub fn answer(a: &str) -> String {
    format!("<think>Found it.</think><answer>{a}</answer>")
}
