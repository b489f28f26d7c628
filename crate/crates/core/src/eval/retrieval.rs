use crate::error::{Error, Result};

/// Query × gallery similarity scores with the gold pairing and optional
/// relevance sets for MAP.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    scores: Vec<f64>,
    queries: usize,
    gallery: usize,
    gold: Vec<usize>,
    relevance: Option<Vec<Vec<usize>>>,
}

impl RankedRetrieval {
    pub fn new(scores: Vec<Vec<f64>>, gold: Vec<usize>) -> Result<Self> {
        let queries = scores.len();
        if queries == 0 {
            return Err(Error::Input("retrieval needs at least one query".into()));
        }
        let gallery = scores[0].len();
        if gallery == 0 || scores.iter().any(|r| r.len() != gallery) {
            return Err(Error::Input("score rows must be non-empty and of equal length".into()));
        }
        if gold.len() != queries {
            return Err(Error::Input(format!("{} gold indices for {queries} queries", gold.len())));
        }
        if let Some(g) = gold.iter().find(|&&g| g >= gallery) {
            return Err(Error::Input(format!("gold index {g} out of range for gallery of {gallery}")));
        }
        if scores.iter().flatten().any(|s| s.is_nan()) {
            return Err(Error::Input("scores contain NaN".into()));
        }
        Ok(Self {
            scores: scores.into_iter().flatten().collect(),
            queries,
            gallery,
            gold,
            relevance: None,
        })
    }

    /// Gold pairing `i ↔ i` on a square matrix.
    pub fn diagonal(scores: Vec<Vec<f64>>) -> Result<Self> {
        let n = scores.len();
        Self::new(scores, (0..n).collect())
    }

    pub fn with_relevance(mut self, relevance: Vec<Vec<usize>>) -> Result<Self> {
        if relevance.len() != self.queries {
            return Err(Error::Input(format!(
                "{} relevance sets for {} queries",
                relevance.len(),
                self.queries
            )));
        }
        if relevance.iter().flatten().any(|&j| j >= self.gallery) {
            return Err(Error::Input("relevance index out of range".into()));
        }
        self.relevance = Some(relevance);
        Ok(self)
    }

    pub fn num_queries(&self) -> usize {
        self.queries
    }

    pub fn gallery_size(&self) -> usize {
        self.gallery
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.gallery..(q + 1) * self.gallery]
    }

    /// Gallery indices of query `q` by descending score, ties by ascending
    /// index.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut order: Vec<usize> = (0..self.gallery).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }

    /// 1-based rank of the gold item.
    pub fn gold_rank(&self, q: usize) -> usize {
        let row = self.row(q);
        let g = self.gold[q];
        1 + (0..self.gallery)
            .filter(|&j| row[j] > row[g] || (row[j] == row[g] && j < g))
            .count()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.gallery {
            return Err(Error::Parameter(format!("k = {k} outside 1..={}", self.gallery)));
        }
        Ok(())
    }
}

/// Percentage of queries whose gold item ranks within the top `k`.
pub fn recall_at_k(r: &RankedRetrieval, k: usize) -> Result<f64> {
    r.check_k(k)?;
    let hits = (0..r.queries).filter(|&q| r.gold_rank(q) <= k).count();
    Ok(100.0 * hits as f64 / r.queries as f64)
}

/// Average precision truncated at `k`, normalised by `min(|R|, k)`.
pub fn average_precision_at_k(ranking: &[usize], relevant: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, j) in ranking.iter().take(k).enumerate() {
        if relevant.contains(j) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len().min(k) as f64
}

/// Mean truncated AP over queries with a non-empty relevance set.
pub fn map_at_k(r: &RankedRetrieval, k: usize) -> Result<f64> {
    r.check_k(k)?;
    let relevance = r
        .relevance
        .as_ref()
        .ok_or_else(|| Error::Input("MAP requires relevance sets".into()))?;
    let mut total = 0.0;
    let mut used = 0usize;
    for (q, rel) in relevance.iter().enumerate() {
        if rel.is_empty() {
            log::warn!("query {q} has no relevant gallery items; skipped");
            continue;
        }
        total += average_precision_at_k(&r.ranking(q), rel, k);
        used += 1;
    }
    if used == 0 {
        return Err(Error::Input("every query has an empty relevance set".into()));
    }
    Ok(100.0 * total / used as f64)
}

/// Gallery items sharing at least one label with each query.
pub fn shared_label_relevance<T: PartialEq>(query_labels: &[Vec<T>], gallery_labels: &[Vec<T>]) -> Vec<Vec<usize>> {
    query_labels
        .iter()
        .map(|ql| {
            gallery_labels
                .iter()
                .enumerate()
                .filter(|(_, gl)| gl.iter().any(|g| ql.contains(g)))
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}
