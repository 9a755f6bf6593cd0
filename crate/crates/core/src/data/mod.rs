//! Data pipeline: raw interaction logs → filtered multi-domain sequences →
//! train/validation/test splits with per-domain negative candidate lists.

mod ingest;
mod sequences;
mod synth;
mod vocab;

pub use ingest::{ingest, records_to_csv, IngestFormat, IngestStats, InteractionRecord};
pub use sequences::{
    build_sequences, leave_one_out_split, EvalInstance, SplitConfig, SplitDataset, TrainInstance,
    UserSequence,
};
pub use synth::{synth_generate, SynthConfig};
pub use vocab::{filter_core, Vocab};
