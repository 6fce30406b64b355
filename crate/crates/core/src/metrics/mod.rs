//! Evaluation measures: class-based mAP, ROC AUC, BLEU-n, ROUGE-L,
//! and simplified METEOR. Pure, stateless, thread-safe.

mod ranking;
mod text;

pub use ranking::{
    class_average_precision, map_table, roc_auc, weighted_and_macro, MapTable, RankedRetrieval,
    ScoredPredictions,
};
pub use text::{bleu_n, meteor_simplified, rouge_l, rouge_l_beta, stem, tokenize};
