//! Retrieval metrics and model evaluation: deterministic similarity ranking,
//! recall at k in both directions, their mean, and the machine-readable
//! result record.
//!
//! Direction conventions: an image query ranks every caption in the manifest
//! (five per image) and hits if any of its own five appears in the top k; a
//! caption query ranks every image and hits on its own image. Queries come
//! from the requested split, corpora always span the whole manifest.

use serde::Serialize;

use cmer_autodiff::Tape;

use crate::config::RunConfig;
use crate::data::{caption_for_epoch, Dataset, Split, CAPTIONS_PER_IMAGE};
use crate::error::Result;
use crate::train::Model;

/// Ranks the corpus for each query by descending dot product (embeddings are
/// unit-norm, so this is cosine order), breaking ties by ascending corpus id.
pub fn rank_retrieval(queries: &[Vec<f64>], corpus: &[Vec<f64>]) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut scored: Vec<(f64, usize)> = corpus
                .iter()
                .enumerate()
                .map(|(id, c)| (q.iter().zip(c).map(|(a, b)| a * b).sum::<f64>(), id))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            scored.into_iter().map(|(_, id)| id).collect()
        })
        .collect()
}

/// Percentage of queries whose ground truth shows up in the top `k`. A `k`
/// beyond the corpus is clamped with a warning.
pub fn recall_at_k(rankings: &[Vec<usize>], ground_truth: &[Vec<usize>], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let corpus = rankings[0].len();
    let k = if k > corpus {
        eprintln!("warning: recall@{k} clamped to corpus size {corpus}");
        corpus
    } else {
        k
    };
    let hits = rankings
        .iter()
        .zip(ground_truth)
        .filter(|(ranking, truth)| ranking[..k].iter().any(|id| truth.contains(id)))
        .count();
    100.0 * hits as f64 / rankings.len() as f64
}

/// Rank (1-based) of the first ground-truth item in each ranking.
pub fn first_hit_ranks(rankings: &[Vec<usize>], ground_truth: &[Vec<usize>]) -> Vec<usize> {
    rankings
        .iter()
        .zip(ground_truth)
        .map(|(ranking, truth)| {
            ranking
                .iter()
                .position(|id| truth.contains(id))
                .map(|p| p + 1)
                .unwrap_or(ranking.len() + 1)
        })
        .collect()
}

/// Arithmetic mean of the six recall values (both directions, k in 1/5/10).
pub fn mean_recall(values: &[f64; 6]) -> f64 {
    values.iter().sum::<f64>() / 6.0
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionRecall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Full evaluation record; serialized untruncated, rounded only for display.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    pub iqt: DirectionRecall,
    pub tqi: DirectionRecall,
    pub mr: f64,
    pub config: RunConfig,
}

/// One CSV row of the optional per-query dump.
#[derive(Debug, Clone)]
pub struct QueryRank {
    pub query_id: String,
    pub rank_of_first_hit: usize,
}

pub struct Evaluation {
    pub result: RetrievalResult,
    pub per_query: Vec<QueryRank>,
}

/// Embeds every image and caption once, then scores the split's queries
/// against the full corpora in both directions.
pub fn evaluate(model: &Model, dataset: &Dataset, split: Split, cfg: &RunConfig) -> Result<Evaluation> {
    let query_samples = crate::data::split_indices(dataset.len(), split);
    evaluate_over(model, dataset, &query_samples, None, cfg)
}

/// Evaluation core; `corpus_samples` of `None` means the whole manifest.
/// Restricting the corpus to the query set gives the cheap per-epoch
/// validation score.
pub fn evaluate_over(
    model: &Model,
    dataset: &Dataset,
    query_samples: &[usize],
    corpus_samples: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let corpus_samples: Vec<usize> = match corpus_samples {
        Some(s) => s.to_vec(),
        None => (0..dataset.len()).collect(),
    };
    let mut tape = Tape::inference();

    let mut image_embs = Vec::with_capacity(corpus_samples.len());
    let mut caption_embs = Vec::with_capacity(corpus_samples.len() * CAPTIONS_PER_IMAGE);
    for &s in &corpus_samples {
        image_embs.push(model.encode_image(&mut tape, &dataset.images[s])?.to_vec());
        for c in 0..CAPTIONS_PER_IMAGE {
            let tokens = dataset.token_sequence(s, c, cfg)?;
            caption_embs.push(model.encode_text(&mut tape, &tokens)?.to_vec());
        }
    }
    let corpus_pos = |sample: usize| {
        corpus_samples
            .iter()
            .position(|&s| s == sample)
            .expect("query sample present in corpus")
    };

    // image query -> captions
    let iqt_queries: Vec<Vec<f64>> = query_samples
        .iter()
        .map(|&s| image_embs[corpus_pos(s)].clone())
        .collect();
    let iqt_truth: Vec<Vec<usize>> = query_samples
        .iter()
        .map(|&s| {
            let base = corpus_pos(s) * CAPTIONS_PER_IMAGE;
            (base..base + CAPTIONS_PER_IMAGE).collect()
        })
        .collect();
    let iqt_rankings = rank_retrieval(&iqt_queries, &caption_embs);

    // caption query -> images
    let mut tqi_queries = Vec::with_capacity(query_samples.len() * CAPTIONS_PER_IMAGE);
    let mut tqi_truth = Vec::with_capacity(tqi_queries.capacity());
    let mut tqi_ids = Vec::with_capacity(tqi_queries.capacity());
    for &s in query_samples {
        let pos = corpus_pos(s);
        for c in 0..CAPTIONS_PER_IMAGE {
            tqi_queries.push(caption_embs[pos * CAPTIONS_PER_IMAGE + c].clone());
            tqi_truth.push(vec![pos]);
            tqi_ids.push(format!("tqi/{s}/{c}"));
        }
    }
    let tqi_rankings = rank_retrieval(&tqi_queries, &image_embs);

    let iqt = DirectionRecall {
        r1: recall_at_k(&iqt_rankings, &iqt_truth, 1),
        r5: recall_at_k(&iqt_rankings, &iqt_truth, 5),
        r10: recall_at_k(&iqt_rankings, &iqt_truth, 10),
    };
    let tqi = DirectionRecall {
        r1: recall_at_k(&tqi_rankings, &tqi_truth, 1),
        r5: recall_at_k(&tqi_rankings, &tqi_truth, 5),
        r10: recall_at_k(&tqi_rankings, &tqi_truth, 10),
    };
    let mr = mean_recall(&[iqt.r1, iqt.r5, iqt.r10, tqi.r1, tqi.r5, tqi.r10]);

    let mut per_query = Vec::new();
    for (&s, rank) in query_samples
        .iter()
        .zip(first_hit_ranks(&iqt_rankings, &iqt_truth))
    {
        per_query.push(QueryRank {
            query_id: format!("iqt/{s}"),
            rank_of_first_hit: rank,
        });
    }
    for (id, rank) in tqi_ids
        .into_iter()
        .zip(first_hit_ranks(&tqi_rankings, &tqi_truth))
    {
        per_query.push(QueryRank {
            query_id: id,
            rank_of_first_hit: rank,
        });
    }

    Ok(Evaluation {
        result: RetrievalResult {
            iqt,
            tqi,
            mr,
            config: cfg.clone(),
        },
        per_query,
    })
}

/// The caption slot the trainer would use this epoch; exposed so callers can
/// reason about coverage.
pub fn training_caption_slot(epoch: usize) -> usize {
    caption_for_epoch(epoch)
}

/// Renders the per-query dump as CSV.
pub fn ranks_csv(rows: &[QueryRank]) -> String {
    let mut out = String::from("query_id,rank_of_first_hit\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.query_id, r.rank_of_first_hit));
    }
    out
}

/// Two-decimal human-readable rendering of a result.
pub fn format_result(r: &RetrievalResult) -> String {
    format!(
        "image->text  R@1 {:6.2}  R@5 {:6.2}  R@10 {:6.2}\n\
         text->image  R@1 {:6.2}  R@5 {:6.2}  R@10 {:6.2}\n\
         mR {:.2}",
        r.iqt.r1, r.iqt.r5, r.iqt.r10, r.tqi.r1, r.tqi.r5, r.tqi.r10, r.mr
    )
}
