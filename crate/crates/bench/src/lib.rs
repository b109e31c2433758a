//! Fixtures shared by the benchmarks in `benches/`.

use semrank_core::synth::{gaussian_mixture, MixtureSpec};
use semrank_core::EmbeddingStore;

/// A clustered store of `points` vectors in `dim` dimensions.
pub fn mixture_store(points: usize, dim: usize) -> EmbeddingStore {
    gaussian_mixture(&MixtureSpec {
        points,
        dim,
        components: 64,
        ..Default::default()
    })
    .expect("valid mixture spec")
    .store
}

/// Model outputs in the shapes the parser meets in practice, each with the
/// candidate count it should be parsed against.
pub fn parser_inputs() -> Vec<(&'static str, String, usize)> {
    let clean = r#"{"explanation":"Serums follow cleansers.","recommendations":["3","1","2","5","4","6","7","8","9","10"]}"#;
    let prose = format!(
        "Let me think about the history first. The user buys skin care.\n```json\n{clean}\n```\nThat is my answer."
    );
    let regex_only = "Step 1 Reasoning: \"the user likes serums\"\nStep 1 Category: \"Beauty > Skin Care\"\nPrediction: Candidate 7".to_owned();
    let broken = r#"{'explanation': 'trailing comma', 'recommendations': [2, 2, 11, 1,],}"#.to_owned();
    let garbage = "I cannot decide between these candidates. ".repeat(20);
    vec![
        ("clean_json", clean.to_owned(), 10),
        ("json_in_prose", prose, 10),
        ("regex_only", regex_only, 10),
        ("repaired", broken, 10),
        ("unparseable", garbage, 10),
    ]
}
