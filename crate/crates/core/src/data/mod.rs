//! Text vocabulary, the synthetic paired corpus and BLEU-4.

pub mod bleu;
pub mod synth;
pub mod vocab;

pub use bleu::bleu4;
pub use synth::{gen_dataset, load_dataset, save_dataset, split_indices, PairedExample, SyntheticSpec};
pub use vocab::TextVocab;
