//! Experiment harnesses: metric tables, cross-dataset regimes, and the
//! ablation grid over index composition and size.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{continue_training, train_alignment, AlignConfig, AlignmentModel, Embedder};
use crate::data::{Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::index::{build_index, extend_index, IndexTarget, RetrievalIndex};
use crate::metrics::{map_table, weighted_and_macro, RankedRetrieval, ScoredPredictions};
use crate::numerics::TrainConfig;
use crate::tasks::{
    prepare_samples, report_retrieval_eval, score_samples, train_classifier,
    train_report_retriever, NeighborMode, TaskContext, TaskModel,
};
use crate::augment::FusionConfig;

/// Provenance attached to every experiment output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RunMetadata {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

/// Per-sample model outputs kept for inspection and reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplePrediction {
    pub id: String,
    pub scores: Vec<f64>,
}

/// A per-class metric table with both averages, serializable to JSON
/// and CSV (one row per class plus the average rows).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentResult {
    pub task: String,
    pub metric: String,
    pub class_names: Vec<String>,
    /// `None` marks classes skipped for lack of positives.
    pub per_class: Vec<Option<f64>>,
    pub positive_counts: Vec<usize>,
    pub wavg: f64,
    pub avg: f64,
    pub per_sample: Vec<SamplePrediction>,
    pub metadata: RunMetadata,
}

impl ExperimentResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(0, e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    /// CSV: a provenance comment line, then `class,value,positives`
    /// rows, then the wAvg/Avg rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!(
            "# tool_version={} config_hash={} seed={}\n",
            self.metadata.tool_version, self.metadata.config_hash, self.metadata.seed
        ));
        out.push_str("class,value,positives\n");
        for ((name, value), count) in self
            .class_names
            .iter()
            .zip(self.per_class.iter())
            .zip(self.positive_counts.iter())
        {
            match value {
                Some(v) => out.push_str(&format!("{name},{v:.6},{count}\n")),
                None => out.push_str(&format!("{name},skipped,{count}\n")),
            }
        }
        out.push_str(&format!("wAvg,{:.6},\n", self.wavg));
        out.push_str(&format!("Avg,{:.6},\n", self.avg));
        fs::write(path, out)?;
        Ok(())
    }
}

/// Build an ExperimentResult from multi-label scores.
pub fn experiment_from_scores(
    task: &str,
    metric: &str,
    class_names: &[String],
    scored: &ScoredPredictions,
    ids: Vec<String>,
    metadata: RunMetadata,
) -> Result<ExperimentResult> {
    let per_class = scored.per_class_auc();
    let positive_counts = scored.positive_counts();
    let (wavg, avg) = weighted_and_macro(&per_class, &positive_counts)?;
    let per_sample = ids
        .into_iter()
        .zip(scored.scores.iter())
        .map(|(id, scores)| SamplePrediction {
            id,
            scores: scores.clone(),
        })
        .collect();
    Ok(ExperimentResult {
        task: task.to_string(),
        metric: metric.to_string(),
        class_names: class_names.to_vec(),
        per_class,
        positive_counts,
        wavg,
        avg,
        per_sample,
        metadata,
    })
}

/// Test-split retrieval rankings for one source modality against one
/// index: the raw material for class-based mAP tables.
pub fn retrieval_rankings(
    embedder: Embedder<'_>,
    dataset: &Dataset,
    index: &RetrievalIndex,
    source: Modality,
    k: usize,
) -> Result<Vec<RankedRetrieval>> {
    let pairs = dataset.split_pairs(Split::Test);
    if pairs.is_empty() {
        return Err(Error::Empty {
            what: "test split".into(),
        });
    }
    let mut rankings = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let record = match source {
            Modality::Image => &pair.image,
            Modality::Report => &pair.report,
        };
        let q = embedder.embed(record)?;
        let set = index.query_aligned(&q, &record.id, k, None)?;
        rankings.push(RankedRetrieval {
            query_labels: pair.labels,
            result_labels: set.neighbors.iter().map(|n| n.labels).collect(),
        });
    }
    Ok(rankings)
}

/// Convenience: test-split cross-modal retrieval mAP table.
pub fn retrieval_map_avg(
    embedder: Embedder<'_>,
    dataset: &Dataset,
    index: &RetrievalIndex,
    source: Modality,
    k: usize,
) -> Result<f64> {
    let rankings = retrieval_rankings(embedder, dataset, index, source, k)?;
    Ok(map_table(&rankings, &dataset.class_names)?.avg)
}

/// Eval-mode classification scores on a split.
pub fn classification_scores(
    model: &TaskModel,
    ctx: &TaskContext<'_>,
    dataset: &Dataset,
    split: Split,
) -> Result<(ScoredPredictions, Vec<String>)> {
    let samples = prepare_samples(
        ctx,
        dataset,
        split,
        model.fusion.as_ref(),
        model.neighbor_mode,
        model.random_seed,
        false,
    )?;
    let scored = score_samples(model, &samples)?;
    let ids = dataset
        .split_pairs(split)
        .iter()
        .map(|p| p.image.id.clone())
        .collect();
    Ok((scored, ids))
}

/// Plain text-metric bundle for the report-retrieval table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReportMetrics {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub exact_label_match_rate: f64,
}

impl From<crate::tasks::report::ReportEval> for ReportMetrics {
    fn from(e: crate::tasks::report::ReportEval) -> Self {
        Self {
            bleu_1: e.bleu[0],
            bleu_2: e.bleu[1],
            bleu_3: e.bleu[2],
            bleu_4: e.bleu[3],
            rouge_l: e.rouge_l,
            meteor: e.meteor,
            exact_label_match_rate: e.exact_label_match_rate,
        }
    }
}

/// Cross-dataset transfer regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Scratch,
    Frozen,
    Finetune,
}

/// Everything produced by stage one on the source dataset.
pub struct SourceArtifacts<'a> {
    pub alignment: &'a AlignmentModel,
    pub index_x: &'a RetrievalIndex,
    pub index_r: &'a RetrievalIndex,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossDatasetResult {
    pub regime: Regime,
    pub classification: ExperimentResult,
    pub report: ReportMetrics,
    /// Fraction of retrieved neighbours per index source over the
    /// target test queries; sums to 1. Present for FINETUNE.
    pub retrieval_provenance: Option<Vec<(String, f64)>>,
}

/// Run one transfer regime of the source artifacts on a target
/// dataset: SCRATCH retrains everything on the target, FROZEN reuses
/// alignment and indices unchanged, FINETUNE continues alignment
/// training on the target and extends the source indices with it.
pub fn run_cross_dataset(
    source: &SourceArtifacts<'_>,
    target: &Dataset,
    regime: Regime,
    align_config: &AlignConfig,
    fusion: FusionConfig,
    task_train: &TrainConfig,
    metadata: RunMetadata,
) -> Result<CrossDatasetResult> {
    if target.z_enc != source.alignment.z_enc {
        return Err(Error::ShapeMismatch {
            op: "run_cross_dataset",
            left_rows: 1,
            left_cols: source.alignment.z_enc,
            right_rows: 1,
            right_cols: target.z_enc,
        });
    }
    let (alignment, index_x, index_r) = match regime {
        Regime::Scratch => {
            let (model, _) = train_alignment(target, align_config)?;
            let ix = build_index(Embedder::Model(&model), target, IndexTarget::X)?;
            let ir = build_index(Embedder::Model(&model), target, IndexTarget::R)?;
            (model, ix, ir)
        }
        Regime::Frozen => (
            source.alignment.clone(),
            source.index_x.clone(),
            source.index_r.clone(),
        ),
        Regime::Finetune => {
            let (model, _) = continue_training(source.alignment.clone(), target, align_config)?;
            let ix = extend_index(source.index_x, Embedder::Model(&model), target)?;
            let ir = extend_index(source.index_r, Embedder::Model(&model), target)?;
            (model, ix, ir)
        }
    };

    let ctx = TaskContext::new(&alignment, Some(&index_x), Some(&index_r));
    let (task_model, _) = train_classifier(
        target,
        &ctx,
        Some(fusion),
        task_train,
        NeighborMode::Retrieved,
    )?;
    let (scored, ids) = classification_scores(&task_model, &ctx, target, Split::Test)?;
    let classification = experiment_from_scores(
        &format!("classification[{regime:?}]"),
        "auc",
        &target.class_names,
        &scored,
        ids,
        metadata.clone(),
    )?;

    let (report_model, _) =
        train_report_retriever(target, &ctx, fusion, task_train, alignment.tau)?;
    let report: ReportMetrics =
        report_retrieval_eval(&ctx, target, Some(&report_model), fusion.k.min(index_r.len()))?
            .into();

    let retrieval_provenance = if regime == Regime::Finetune {
        let mut counts = vec![0usize; index_r.sources.len()];
        let mut total = 0usize;
        for pair in target.split_pairs(Split::Test) {
            let q = alignment.project_eval(&pair.image)?;
            let set = index_r.query_aligned(&q, &pair.image.id, fusion.k.min(index_r.len()), None)?;
            for n in &set.neighbors {
                counts[n.source as usize] += 1;
                total += 1;
            }
        }
        Some(
            index_r
                .sources
                .iter()
                .cloned()
                .zip(counts.iter().map(|&c| c as f64 / total.max(1) as f64))
                .collect(),
        )
    } else {
        None
    };

    Ok(CrossDatasetResult {
        regime,
        classification,
        report,
        retrieval_provenance,
    })
}

/// Index composition arms for the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// No augmentation: the baseline classifier.
    None,
    /// Intra-modal branch only (image index).
    X,
    /// Inter-modal branch only (report index).
    R,
    /// Both branches (the full fusion).
    XR,
    /// Both branches fed uniformly random training entries.
    Random,
}

impl Composition {
    pub fn all() -> [Composition; 5] {
        [
            Composition::None,
            Composition::X,
            Composition::R,
            Composition::XR,
            Composition::Random,
        ]
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Composition::None),
            "x" => Ok(Composition::X),
            "r" => Ok(Composition::R),
            "xr" => Ok(Composition::XR),
            "random" => Ok(Composition::Random),
            other => Err(Error::invalid_parameter(
                "composition",
                format!("unknown composition {other}"),
            )),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Composition::None => "none",
            Composition::X => "x",
            Composition::R => "r",
            Composition::XR => "xr",
            Composition::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub compositions: Vec<Composition>,
    /// Index fractions in (0, 1]; entries are subsampled before build.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationCell {
    pub composition: String,
    pub fraction: f64,
    pub seed: u64,
    pub macro_auc: f64,
    pub wavg_auc: f64,
}

/// One classifier run per (composition, fraction, seed) cell; cells
/// run in parallel (each is internally deterministic) and results come
/// back in grid order.
pub fn run_ablations(
    dataset: &Dataset,
    alignment: &AlignmentModel,
    spec: &AblationSpec,
) -> Result<Vec<AblationCell>> {
    for &f in &spec.fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid_parameter(
                "fraction",
                format!("must lie in (0, 1], got {f}"),
            ));
        }
    }
    let grid: Vec<(Composition, f64, u64)> = spec
        .compositions
        .iter()
        .flat_map(|&c| {
            spec.fractions
                .iter()
                .flat_map(move |&f| spec.seeds.iter().map(move |&s| (c, f, s)))
        })
        .collect();

    let cells: Vec<Result<AblationCell>> = grid
        .par_iter()
        .map(|&(composition, fraction, seed)| {
            run_ablation_cell(dataset, alignment, spec, composition, fraction, seed)
        })
        .collect();
    cells.into_iter().collect()
}

fn run_ablation_cell(
    dataset: &Dataset,
    alignment: &AlignmentModel,
    spec: &AblationSpec,
    composition: Composition,
    fraction: f64,
    seed: u64,
) -> Result<AblationCell> {
    let sub = subsample_train(dataset, fraction, seed);
    let fusion = match composition {
        Composition::None => None,
        Composition::X => Some(FusionConfig {
            use_intra: true,
            use_inter: false,
            ..spec.fusion
        }),
        Composition::R => Some(FusionConfig {
            use_intra: false,
            use_inter: true,
            ..spec.fusion
        }),
        Composition::XR | Composition::Random => Some(FusionConfig {
            use_intra: true,
            use_inter: true,
            ..spec.fusion
        }),
    };
    if let Some(f) = &fusion {
        let train_entries = sub.split_pairs(Split::Train).len();
        if train_entries.saturating_sub(1) < f.k {
            return Err(Error::invalid_parameter(
                "fraction",
                format!(
                    "fraction {fraction} leaves {train_entries} train entries, fewer than k={}",
                    f.k
                ),
            ));
        }
    }
    let neighbor_mode = if composition == Composition::Random {
        NeighborMode::Random
    } else {
        NeighborMode::Retrieved
    };

    let index_x = build_index(Embedder::Model(alignment), &sub, IndexTarget::X)?;
    let index_r = build_index(Embedder::Model(alignment), &sub, IndexTarget::R)?;
    let ctx = TaskContext::new(alignment, Some(&index_x), Some(&index_r));
    let train = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let (model, _) = train_classifier(&sub, &ctx, fusion, &train, neighbor_mode)?;
    let (scored, _) = classification_scores(&model, &ctx, &sub, Split::Test)?;
    let per_class = scored.per_class_auc();
    let counts = scored.positive_counts();
    let (wavg, avg) = weighted_and_macro(&per_class, &counts)?;
    Ok(AblationCell {
        composition: composition.label().to_string(),
        fraction,
        seed,
        macro_auc: avg,
        wavg_auc: wavg,
    })
}

/// Deterministically subsample the TRAIN split to `fraction` of its
/// pairs (val/test untouched); fraction 1 keeps the dataset as-is.
pub fn subsample_train(dataset: &Dataset, fraction: f64, seed: u64) -> Dataset {
    if fraction >= 1.0 {
        return dataset.clone();
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let train: Vec<usize> = dataset
        .pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.split() == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let keep_n = ((train.len() as f64) * fraction).round().max(1.0) as usize;
    let mut shuffled = train.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xF7AC));
    shuffled.shuffle(&mut rng);
    let kept: std::collections::BTreeSet<usize> = shuffled.into_iter().take(keep_n).collect();
    let pairs = dataset
        .pairs
        .iter()
        .enumerate()
        .filter(|(i, p)| p.split() != Split::Train || kept.contains(i))
        .map(|(_, p)| p.clone())
        .collect();
    Dataset {
        name: dataset.name.clone(),
        pairs,
        class_names: dataset.class_names.clone(),
        z_enc: dataset.z_enc,
    }
}
