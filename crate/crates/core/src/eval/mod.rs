//! Measurement suite: dialogue entropy, the alignment benchmark, capability
//! probes and the ablation grid.

pub mod ablation;
pub mod alignment;
pub mod entropy;
pub mod probes;

pub use ablation::{default_columns, render_table, run_ablation_grid, AblationCell, AblationGrid, AblationSpec};
pub use alignment::{run_alignment_benchmark, AlignmentError, AlignmentResult, RepetitionTrace};
pub use entropy::{bigram_entropy, run_entropy, tokenizer_by_id, CharTokenizer, EntropyReport, Tokenizer, WordTokenizer};
pub use probes::{run_probes, ProbeResult, TaskRate};
