//! Duplicate and outlier removal in embedding space.
//!
//! Every surviving pair of images should have cosine similarity inside
//! `[alpha, beta]`. Two greedy passes enforce this:
//!
//! 1. **Dedup** (`sim > beta`): repeatedly take the most similar surviving
//!    pair and drop the endpoint with fewer neighbours (`sim <= beta`).
//! 2. **Outliers** (`sim < alpha`): repeatedly take the least similar
//!    surviving pair and drop the endpoint with fewer neighbours in
//!    `[alpha, beta]`.
//!
//! Ties on the extreme pair go to the lexicographically smallest id pair, and
//! ties on neighbour count remove the larger id, so every trace is a total
//! order. `alpha` is found by bisection so that the outlier pass keeps the
//! requested fraction of the post-dedup images.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetManifest, FilterVerdict, ImageRecord};

pub const DEFAULT_BETA: f64 = 0.9825;
pub const DEFAULT_RETENTION: f64 = 0.9;
pub const DEFAULT_SEARCH_ITERATIONS: u32 = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterParams {
    pub beta: f64,
    pub retention_target: f64,
    /// Fixed lower bound; `None` searches for one.
    pub alpha: Option<f64>,
    pub per_class: bool,
    pub search_iterations: u32,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            beta: DEFAULT_BETA,
            retention_target: DEFAULT_RETENTION,
            alpha: None,
            per_class: true,
            search_iterations: DEFAULT_SEARCH_ITERATIONS,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::validation("filter.beta", "must be in (0, 1]"));
        }
        if !(self.retention_target > 0.0 && self.retention_target <= 1.0) {
            return Err(Error::validation("filter.retention_target", "must be in (0, 1]"));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha.is_finite() && alpha < self.beta) {
                return Err(Error::validation("filter.alpha", "must be finite and below beta"));
            }
        }
        if self.search_iterations == 0 {
            return Err(Error::validation("filter.search_iterations", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub kept: usize,
    pub removed_duplicate: usize,
    pub removed_outlier: usize,
    /// Lower bound used for this class (absent when the class was skipped).
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Smallest lower bound applied across groups; every surviving same-group pair is at least this similar.
    pub alpha_used: f64,
    pub beta: f64,
    pub removed_duplicates: Vec<String>,
    pub removed_outliers: Vec<String>,
    /// kept / (kept + removed outliers), over post-dedup images.
    pub retention_achieved: f64,
    pub per_class_breakdown: BTreeMap<String, ClassBreakdown>,
    pub warnings: Vec<String>,
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// For each vector, the number of others whose similarity lies in `[alpha, beta]`.
pub fn neighbor_counts(embeddings: &[Vec<f64>], alpha: f64, beta: f64) -> Result<Vec<usize>> {
    let matrix = SimilarityMatrix::new(embeddings)?;
    let all: Vec<usize> = (0..embeddings.len()).collect();
    Ok(matrix.counts_in_range(&all, alpha, beta))
}

/// Dense pairwise cosine similarities.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    n: usize,
    sims: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut norms = Vec::with_capacity(n);
        for r in rows {
            let nr = norm(r);
            if nr == 0.0 || !nr.is_finite() {
                return Err(Error::Domain("cosine similarity of a zero or non-finite vector".into()));
            }
            if r.len() != rows[0].len() {
                return Err(Error::DimensionMismatch {
                    expected: rows[0].len(),
                    actual: r.len(),
                });
            }
            norms.push(nr);
        }
        let mut sims = vec![0.0; n * n];
        for i in 0..n {
            sims[i * n + i] = 1.0;
            for j in i + 1..n {
                let s = (dot(&rows[i], &rows[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                sims[i * n + j] = s;
                sims[j * n + i] = s;
            }
        }
        Ok(SimilarityMatrix { n, sims })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.sims[i * self.n + j]
    }

    fn counts_in_range(&self, members: &[usize], alpha: f64, beta: f64) -> Vec<usize> {
        members
            .iter()
            .map(|&i| {
                members
                    .iter()
                    .filter(|&&j| j != i && (alpha..=beta).contains(&self.get(i, j)))
                    .count()
            })
            .collect()
    }
}

/// Ids plus their similarity matrix; the unit every pass works on.
#[derive(Debug, Clone)]
pub struct Candidates {
    ids: Vec<String>,
    matrix: SimilarityMatrix,
}

/// Survivors and removals of one pass, both as ids. Removals are in removal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassOutcome {
    pub survivors: Vec<String>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Violation {
    /// `sim > beta`; the most similar pair goes first.
    AboveBeta,
    /// `sim < alpha`; the least similar pair goes first.
    BelowAlpha,
}

struct Pair {
    sim: f64,
    a: usize,
    b: usize,
}

impl Candidates {
    pub fn new(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::validation("candidates", "id and embedding counts differ"));
        }
        let mut sorted = ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("candidates", "ids must be unique"));
        }
        Ok(Candidates {
            ids,
            matrix: SimilarityMatrix::new(rows)?,
        })
    }

    pub fn from_images(images: &[&ImageRecord]) -> Result<Self> {
        let ids = images.iter().map(|i| i.id.clone()).collect();
        let rows: Vec<Vec<f64>> = images.iter().map(|i| i.embedding.to_f64()).collect();
        Self::new(ids, &rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    fn index_of(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    fn resolve(&self, ids: &[String]) -> Vec<usize> {
        let index = self.index_of();
        ids.iter().map(|id| index[id.as_str()]).collect()
    }

    /// Lexicographic order on the (smaller id, larger id) pair.
    fn id_pair_cmp(&self, x: &Pair, y: &Pair) -> Ordering {
        let key = |p: &Pair| {
            let (a, b) = (&self.ids[p.a], &self.ids[p.b]);
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        };
        key(x).cmp(&key(y))
    }

    fn violating_pairs(&self, members: &[usize], kind: Violation, alpha: f64, beta: f64) -> Vec<Pair> {
        let mut pairs = Vec::new();
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                let sim = self.matrix.get(i, j);
                let violates = match kind {
                    Violation::AboveBeta => sim > beta,
                    Violation::BelowAlpha => sim < alpha,
                };
                if violates {
                    pairs.push(Pair { sim, a: i, b: j });
                }
            }
        }
        pairs.sort_by(|p, q| {
            let by_sim = match kind {
                Violation::AboveBeta => q.sim.total_cmp(&p.sim),
                Violation::BelowAlpha => p.sim.total_cmp(&q.sim),
            };
            by_sim.then_with(|| self.id_pair_cmp(p, q))
        });
        pairs
    }

    /// Runs one greedy pass over `members` given pairs already sorted worst-first.
    ///
    /// Removing a point never changes other pairs' similarities, so the worst
    /// surviving pair at each step is the next sorted pair with both endpoints
    /// alive. Neighbour counts are decremented incrementally, which matches a
    /// full recount after every removal.
    fn greedy(&self, members: &[usize], pairs: &[Pair], lo: f64, hi: f64) -> (Vec<usize>, Vec<usize>) {
        let mut alive = vec![false; self.len()];
        for &m in members {
            alive[m] = true;
        }
        let counts_vec = self.matrix.counts_in_range(members, lo, hi);
        let mut counts = vec![0usize; self.len()];
        for (&m, c) in members.iter().zip(counts_vec) {
            counts[m] = c;
        }
        let mut removed = Vec::new();
        for pair in pairs {
            if !(alive[pair.a] && alive[pair.b]) {
                continue;
            }
            let victim = match counts[pair.a].cmp(&counts[pair.b]) {
                Ordering::Less => pair.a,
                Ordering::Greater => pair.b,
                Ordering::Equal => {
                    if self.ids[pair.a] > self.ids[pair.b] {
                        pair.a
                    } else {
                        pair.b
                    }
                }
            };
            alive[victim] = false;
            removed.push(victim);
            for &m in members {
                if alive[m] && (lo..=hi).contains(&self.matrix.get(victim, m)) {
                    counts[m] -= 1;
                }
            }
        }
        let survivors = members.iter().copied().filter(|&m| alive[m]).collect();
        (survivors, removed)
    }

    fn outcome(&self, survivors: Vec<usize>, removed: Vec<usize>) -> PassOutcome {
        PassOutcome {
            survivors: survivors.into_iter().map(|i| self.ids[i].clone()).collect(),
            removed: removed.into_iter().map(|i| self.ids[i].clone()).collect(),
        }
    }

    fn dedup_members(&self, members: &[usize], beta: f64) -> (Vec<usize>, Vec<usize>) {
        let pairs = self.violating_pairs(members, Violation::AboveBeta, -1.0, beta);
        self.greedy(members, &pairs, -1.0, beta)
    }

    fn outlier_members(&self, members: &[usize], alpha: f64, beta: f64) -> (Vec<usize>, Vec<usize>) {
        let pairs = self.violating_pairs(members, Violation::BelowAlpha, alpha, beta);
        self.greedy(members, &pairs, alpha, beta)
    }
}

/// Removes near-duplicates until no surviving pair exceeds `beta`.
pub fn dedup_pass(candidates: &Candidates, beta: f64) -> PassOutcome {
    let all: Vec<usize> = (0..candidates.len()).collect();
    let (s, r) = candidates.dedup_members(&all, beta);
    candidates.outcome(s, r)
}

/// Removes outliers among `members` (all candidates when `None`) until no
/// surviving pair falls below `alpha`.
pub fn outlier_pass(candidates: &Candidates, members: Option<&[String]>, alpha: f64, beta: f64) -> PassOutcome {
    let members = match members {
        Some(ids) => candidates.resolve(ids),
        None => (0..candidates.len()).collect(),
    };
    let (s, r) = candidates.outlier_members(&members, alpha, beta);
    candidates.outcome(s, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearch {
    pub alpha: f64,
    pub retention: f64,
    pub outcome: PassOutcome,
    /// Every probed `(alpha, retention)` in probe order.
    pub probes: Vec<(f64, f64)>,
}

/// Bisects `alpha` over `[-1, beta]` for the largest probed value whose
/// outlier pass keeps at least `retention_target` of `members`.
///
/// Retention is not guaranteed monotone in `alpha`; the result is the largest
/// probed value that met the target.
pub fn search_alpha(candidates: &Candidates, members: Option<&[String]>, params: &FilterParams) -> Result<AlphaSearch> {
    params.validate()?;
    let members = match members {
        Some(ids) => candidates.resolve(ids),
        None => (0..candidates.len()).collect(),
    };
    let n = members.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            class: String::new(),
            message: format!("alpha search needs at least 2 images, got {n}"),
        });
    }
    let beta = params.beta;
    // All pairs sorted ascending once; a probe's violations are a prefix.
    let all_pairs = candidates.violating_pairs(&members, Violation::BelowAlpha, f64::INFINITY, beta);
    let mut memo: HashMap<u64, (Vec<usize>, Vec<usize>)> = HashMap::new();
    let mut probe = |alpha: f64| -> (Vec<usize>, Vec<usize>) {
        memo.entry(alpha.to_bits())
            .or_insert_with(|| {
                let cut = all_pairs.partition_point(|p| p.sim < alpha);
                candidates.greedy(&members, &all_pairs[..cut], alpha, beta)
            })
            .clone()
    };

    let mut best_alpha = -1.0;
    let mut best = probe(-1.0);
    let retain = |kept: &Vec<usize>| kept.len() as f64 / n as f64;
    assert!(retain(&best.0) >= params.retention_target, "retention at alpha = -1 is always 1");
    let mut probes = vec![(-1.0, retain(&best.0))];
    let (mut lo, mut hi) = (-1.0f64, beta);
    for _ in 0..params.search_iterations {
        let mid = 0.5 * (lo + hi);
        let result = probe(mid);
        let r = retain(&result.0);
        probes.push((mid, r));
        if r >= params.retention_target {
            if mid > best_alpha {
                best_alpha = mid;
                best = result;
            }
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(AlphaSearch {
        alpha: best_alpha,
        retention: retain(&best.0),
        outcome: candidates.outcome(best.0, best.1),
        probes,
    })
}

/// Runs dedup then the outlier pass (fixed or searched alpha) per class, or
/// once over all images with `per_class = false`. Returns a new manifest with
/// verdicts rewritten and the revision bumped; the input is untouched.
pub fn filter_dataset(manifest: &DatasetManifest, params: &FilterParams) -> Result<(DatasetManifest, FilterReport)> {
    params.validate()?;
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    if params.per_class {
        for class in &manifest.classes {
            let members = (0..manifest.images.len())
                .filter(|&i| &manifest.images[i].class_label == class)
                .collect();
            groups.push((class.clone(), members));
        }
    } else {
        groups.push(("all images".to_string(), (0..manifest.images.len()).collect()));
    }

    let mut verdicts = vec![FilterVerdict::Kept; manifest.images.len()];
    let mut report = FilterReport {
        alpha_used: f64::INFINITY,
        beta: params.beta,
        removed_duplicates: Vec::new(),
        removed_outliers: Vec::new(),
        retention_achieved: 1.0,
        per_class_breakdown: manifest.classes.iter().map(|c| (c.clone(), ClassBreakdown::default())).collect(),
        warnings: Vec::new(),
    };
    let (mut phase2_total, mut phase2_kept) = (0usize, 0usize);

    for (group, members) in &groups {
        if members.len() < 2 {
            report
                .warnings
                .push(format!("`{group}` has {} image(s); filtering skipped", members.len()));
            continue;
        }
        let images: Vec<&ImageRecord> = members.iter().map(|&i| &manifest.images[i]).collect();
        let candidates = Candidates::from_images(&images)?;
        let dedup = dedup_pass(&candidates, params.beta);
        let (alpha, outliers) = if dedup.survivors.len() < 2 {
            report.warnings.push(format!("`{group}` has fewer than 2 images after dedup; outlier pass skipped"));
            (-1.0, PassOutcome { survivors: dedup.survivors.clone(), removed: Vec::new() })
        } else if let Some(alpha) = params.alpha {
            (alpha, outlier_pass(&candidates, Some(&dedup.survivors), alpha, params.beta))
        } else {
            let search = search_alpha(&candidates, Some(&dedup.survivors), params)?;
            (search.alpha, search.outcome)
        };
        phase2_total += dedup.survivors.len();
        phase2_kept += outliers.survivors.len();
        report.alpha_used = report.alpha_used.min(alpha);

        let local: HashMap<&str, usize> = members
            .iter()
            .map(|&i| (manifest.images[i].id.as_str(), i))
            .collect();
        for id in &dedup.removed {
            verdicts[local[id.as_str()]] = FilterVerdict::RemovedDuplicate;
        }
        for id in &outliers.removed {
            verdicts[local[id.as_str()]] = FilterVerdict::RemovedOutlier;
        }
        report.removed_duplicates.extend(dedup.removed);
        report.removed_outliers.extend(outliers.removed);
        if params.per_class {
            report.per_class_breakdown.get_mut(group).expect("known class").alpha = Some(alpha);
        } else {
            for b in report.per_class_breakdown.values_mut() {
                b.alpha = Some(alpha);
            }
        }
    }

    if !report.alpha_used.is_finite() {
        report.alpha_used = params.alpha.unwrap_or(-1.0);
    }
    if phase2_total > 0 {
        report.retention_achieved = phase2_kept as f64 / phase2_total as f64;
    }

    let mut out = manifest.clone();
    out.revision = manifest.revision + 1;
    for (img, verdict) in out.images.iter_mut().zip(verdicts) {
        img.filter_verdict = verdict;
        let b = report.per_class_breakdown.entry(img.class_label.clone()).or_default();
        match verdict {
            FilterVerdict::Kept => b.kept += 1,
            FilterVerdict::RemovedDuplicate => b.removed_duplicate += 1,
            FilterVerdict::RemovedOutlier => b.removed_outlier += 1,
            FilterVerdict::Pending => {}
        }
    }
    Ok((out, report))
}

/// Marks every image kept without filtering.
pub fn keep_all(manifest: &DatasetManifest) -> DatasetManifest {
    let mut out = manifest.clone();
    for img in &mut out.images {
        img.filter_verdict = FilterVerdict::Kept;
    }
    out
}
