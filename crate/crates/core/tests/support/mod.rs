pub mod oracles;

use motionrag_core::contrastive::{train, ContrastiveModel, TrainConfig};
use motionrag_core::graph::{build_graph_from_corpus, prune, GraphBuildConfig, MotionGraph};
use motionrag_core::ingest::{synthesize_test_corpus, Corpus};
use ndarray::Array2;

#[allow(dead_code)]
/// Bundled corpus, its pruned graph, a trained embedding model and the
/// corpus music rows as a segment sequence.
pub struct Fixture {
    pub corpus: Corpus,
    pub graph: MotionGraph,
    pub model: ContrastiveModel,
    pub music: Array2<f64>,
}

#[allow(dead_code)]
pub fn fixture() -> Fixture {
    let corpus = synthesize_test_corpus(0, 16);
    let graph = prune(&build_graph_from_corpus(&corpus, &GraphBuildConfig::default()).unwrap()).unwrap();
    let model = train(&corpus, &TrainConfig::default()).unwrap().model;
    let (music, _) = corpus.paired_features();
    Fixture {
        corpus,
        graph,
        model,
        music,
    }
}
