//! Interpretability toolkit: CKA similarity, attention statistics and
//! network dissection over recorded activations.

pub mod activations;
pub mod attn;
pub mod cka;
pub mod dissect;
pub mod dump;

pub use activations::{probe, ActivationMatrix, ProbeOptions};
pub use attn::{attention_stats, AttentionReport};
pub use cka::{cka, cka_matrix, hsic1, CkaMatrix, Gram, GramPair};
pub use dissect::{dissect, ConceptCorpus, DissectOptions, DissectionReport};
pub use dump::{read_activation, write_activation};
