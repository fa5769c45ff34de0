// quick failure inspector
use maskdiff::checkpoint::load_bundle;
use maskdiff::conversation::read_corpus;
use maskdiff::sampler::{generate_full, ChatState, RemaskStrategy, SamplerConfig};
use maskdiff::conversation::AttentionMaskKind;

fn main() {
    let bundle = load_bundle(std::path::Path::new("/tmp/l10k/model.ckpt")).unwrap();
    let corpus = read_corpus(std::path::Path::new("/tmp/exp/corpus.eval.jsonl")).unwrap();
    let mut fails = 0;
    for (i, ex) in corpus.iter().enumerate().take(200) {
        let truth = &ex.turns[0].response;
        let state = ChatState::from_example_turn(ex, 0).unwrap();
        let cfg = SamplerConfig {
            gen_length: truth.len(),
            steps: usize::MAX,
            strategy: RemaskStrategy::LowConfidence,
            attention: AttentionMaskKind::NoMask,
            temperature: 0.0,
            seed: 7,
            block_size: None,
        };
        let (gen, _) = generate_full(&bundle, &state, &cfg).unwrap();
        if &gen != truth && fails < 12 {
            println!("ex {i}:\n  truth {truth:?}\n  gen   {gen:?}");
            fails += 1;
        }
    }
    println!("fails in first 200: counted above");
}
