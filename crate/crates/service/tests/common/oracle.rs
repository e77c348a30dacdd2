//! Brute-force reference for duplicate/outlier filtering: every step rescans
//! all surviving pairs and recounts neighbours from scratch.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use air_core::filter::FilterParams;
use air_core::model::{DatasetManifest, FilterVerdict};

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt())).clamp(-1.0, 1.0)
}

struct Group<'a> {
    ids: Vec<&'a str>,
    sims: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
enum Kind {
    Above(f64),
    Below(f64),
}

impl Group<'_> {
    fn neighbours(&self, alive: &[bool], x: usize, lo: f64, hi: f64) -> usize {
        (0..self.ids.len())
            .filter(|&y| y != x && alive[y] && self.sims[x][y] >= lo && self.sims[x][y] <= hi)
            .count()
    }

    /// Returns the removed indices in order; `alive` is updated in place.
    fn greedy(&self, alive: &mut [bool], kind: Kind, lo: f64, hi: f64) -> Vec<usize> {
        let n = self.ids.len();
        let mut removed = Vec::new();
        loop {
            let mut worst: Option<(usize, usize)> = None;
            for a in 0..n {
                for b in a + 1..n {
                    if !(alive[a] && alive[b]) {
                        continue;
                    }
                    let s = self.sims[a][b];
                    let violates = match kind {
                        Kind::Above(beta) => s > beta,
                        Kind::Below(alpha) => s < alpha,
                    };
                    if !violates {
                        continue;
                    }
                    worst = match worst {
                        None => Some((a, b)),
                        Some((c, d)) => {
                            let t = self.sims[c][d];
                            let ord = match kind {
                                Kind::Above(_) => t.total_cmp(&s),
                                Kind::Below(_) => s.total_cmp(&t),
                            };
                            let better = match ord {
                                Ordering::Less => true,
                                Ordering::Greater => false,
                                Ordering::Equal => self.pair_key(a, b) < self.pair_key(c, d),
                            };
                            if better {
                                Some((a, b))
                            } else {
                                Some((c, d))
                            }
                        }
                    };
                }
            }
            let Some((a, b)) = worst else { break };
            let (na, nb) = (self.neighbours(alive, a, lo, hi), self.neighbours(alive, b, lo, hi));
            let victim = if na < nb {
                a
            } else if nb < na {
                b
            } else if self.ids[a] > self.ids[b] {
                a
            } else {
                b
            };
            alive[victim] = false;
            removed.push(victim);
        }
        removed
    }

    fn pair_key(&self, a: usize, b: usize) -> (&str, &str) {
        let (x, y) = (self.ids[a], self.ids[b]);
        if x <= y {
            (x, y)
        } else {
            (y, x)
        }
    }
}

pub struct OracleResult {
    pub verdicts: HashMap<String, FilterVerdict>,
    pub alphas: BTreeMap<String, f64>,
    pub retention: f64,
}

/// Reference filter following the documented greedy rules and bisection.
pub fn filter(manifest: &DatasetManifest, params: &FilterParams) -> OracleResult {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    if params.per_class {
        for c in &manifest.classes {
            groups.push((c.clone(), (0..manifest.images.len()).filter(|&i| &manifest.images[i].class_label == c).collect()));
        }
    } else {
        groups.push((String::new(), (0..manifest.images.len()).collect()));
    }
    let mut verdicts: HashMap<String, FilterVerdict> =
        manifest.images.iter().map(|i| (i.id.clone(), FilterVerdict::Kept)).collect();
    let mut alphas = BTreeMap::new();
    let (mut total, mut kept) = (0usize, 0usize);
    let beta = params.beta;
    for (name, members) in groups {
        if members.len() < 2 {
            continue;
        }
        let rows: Vec<Vec<f64>> = members.iter().map(|&i| manifest.images[i].embedding.to_f64()).collect();
        let group = Group {
            ids: members.iter().map(|&i| manifest.images[i].id.as_str()).collect(),
            sims: rows.iter().map(|u| rows.iter().map(|v| cosine(u, v)).collect()).collect(),
        };
        let mut alive = vec![true; members.len()];
        for r in group.greedy(&mut alive, Kind::Above(beta), -1.0, beta) {
            verdicts.insert(group.ids[r].to_string(), FilterVerdict::RemovedDuplicate);
        }
        let phase2 = alive.iter().filter(|a| **a).count();
        let run = |alpha: f64| {
            let mut a = alive.clone();
            group.greedy(&mut a, Kind::Below(alpha), alpha, beta)
        };
        let (alpha, removed) = if phase2 < 2 {
            (-1.0, Vec::new())
        } else if let Some(alpha) = params.alpha {
            (alpha, run(alpha))
        } else {
            let retain = |removed: &Vec<usize>| (phase2 - removed.len()) as f64 / phase2 as f64;
            let mut best_alpha = -1.0;
            let mut best = run(-1.0);
            let (mut lo, mut hi) = (-1.0f64, beta);
            for _ in 0..params.search_iterations {
                let mid = 0.5 * (lo + hi);
                let r = run(mid);
                if retain(&r) >= params.retention_target {
                    if mid > best_alpha {
                        best_alpha = mid;
                        best = r;
                    }
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (best_alpha, best)
        };
        for r in &removed {
            verdicts.insert(group.ids[*r].to_string(), FilterVerdict::RemovedOutlier);
        }
        total += phase2;
        kept += phase2 - removed.len();
        alphas.insert(name, alpha);
    }
    OracleResult {
        verdicts,
        alphas,
        retention: if total == 0 { 1.0 } else { kept as f64 / total as f64 },
    }
}
