//! Reasoning texts: instruction instances, generation through a pluggable
//! adapter, four-dimension quality scoring and threshold filtering.

mod adapter;
mod instance;
mod score;

pub use adapter::{
    load_cot_fixture, load_explanation_fixture, parse_single_pass, truncate_tokens, Explanation,
    FixtureAdapter, GenerationAdapter, HttpTransport, RemoteAdapter, Transport, COT_TEMPLATE,
    EXPLANATION_DELIMITER, MAX_COT_TOKENS,
};
pub use instance::{build_instruction_instance, InstructionInstance, TASK_INSTRUCTION};
pub use score::{
    coherence, composite_score, filter_cots, label_sentence, load_cot_records, rank_agreement,
    render_cot_records, score_semantic_dimension, sentences, threshold_sweep, write_cot_records,
    CotRecord, CotScorer, SemanticDimension, SweepReport, SweepRow, DEFAULT_THRESHOLD,
    DEFAULT_WEIGHTS,
};
