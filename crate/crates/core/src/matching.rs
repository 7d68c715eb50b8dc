//! Greedy nearest-neighbour propensity matching and whole-set fold splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::propensity::PropensityModel;
use crate::rng::{stream, substream};

/// Partition of sample indices into matched sets plus leftovers. Each set
/// lists its treated unit first, followed by its controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSets {
    pub sets: Vec<Vec<usize>>,
    pub unmatched: Vec<usize>,
    /// Caliper actually applied, in logit units (`None` = unbounded).
    pub caliper: Option<f64>,
}

impl MatchedSets {
    pub fn n_sets(&self) -> usize {
        self.sets.len()
    }

    pub fn n_matched(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// One-line summary: set count, unmatched count, caliper.
    pub fn diagnostics(&self) -> String {
        match self.caliper {
            Some(c) => format!(
                "matched_sets={} unmatched={} caliper={c:.6}",
                self.n_sets(),
                self.unmatched.len()
            ),
            None => format!(
                "matched_sets={} unmatched={} caliper=none",
                self.n_sets(),
                self.unmatched.len()
            ),
        }
    }
}

/// Maximum logit distance between a treated unit and its controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caliper {
    None,
    /// Absolute width in logit units.
    Fixed(f64),
    /// Multiple of the standard deviation of the logits.
    StdMultiple(f64),
}

impl Default for Caliper {
    fn default() -> Self {
        Caliper::StdMultiple(0.2)
    }
}

/// The score matched on; probabilities are mapped to logits first.
#[derive(Debug, Clone, Copy)]
pub enum MatchScore<'a> {
    Propensity(&'a [f64]),
    Logit(&'a [f64]),
}

impl MatchScore<'_> {
    fn logits(&self) -> Vec<f64> {
        match *self {
            MatchScore::Logit(z) => z.to_vec(),
            MatchScore::Propensity(p) => p.iter().map(|&e| (e / (1.0 - e)).ln()).collect(),
        }
    }
}

/// Matches on the unclipped logit of `prop`'s `e(x, 1)`.
pub fn build_matched_sets(
    data: &Dataset,
    prop: &PropensityModel,
    caliper: Caliper,
    controls_per_set: usize,
) -> Result<MatchedSets> {
    let logits = prop.linear_predictors(&data.x)?;
    match_on_scores(&data.t, MatchScore::Logit(&logits), caliper, controls_per_set)
}

/// Greedy matching without replacement: treated units in descending score
/// order each take their `controls_per_set` nearest available controls
/// within the caliper; units without enough in-caliper controls stay
/// unmatched.
pub fn match_on_scores(
    arms: &[Arm],
    score: MatchScore<'_>,
    caliper: Caliper,
    controls_per_set: usize,
) -> Result<MatchedSets> {
    let logits = score.logits();
    if logits.len() != arms.len() {
        return Err(Error::DimensionMismatch {
            expected: arms.len(),
            found: logits.len(),
        });
    }
    if controls_per_set == 0 {
        return Err(Error::invalid("controls_per_set must be positive"));
    }
    if logits.iter().any(|z| z.is_nan()) {
        return Err(Error::invalid("NaN matching score"));
    }
    let mut treated: Vec<usize> = (0..arms.len()).filter(|&i| arms[i] == Arm::Treated).collect();
    let mut controls: Vec<usize> = (0..arms.len()).filter(|&i| arms[i] == Arm::Control).collect();
    if treated.is_empty() {
        return Err(Error::SingleArm(Arm::Control));
    }
    if controls.is_empty() {
        return Err(Error::SingleArm(Arm::Treated));
    }
    let width = match caliper {
        Caliper::None => None,
        Caliper::Fixed(w) => Some(w),
        Caliper::StdMultiple(f) => {
            let n = logits.len() as f64;
            let mean = logits.iter().sum::<f64>() / n;
            let var = logits.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            Some(f * var.sqrt())
        }
    };
    if let Some(w) = width {
        if !(w >= 0.0) {
            return Err(Error::invalid(format!("caliper must be nonnegative, got {w}")));
        }
    }

    treated.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    controls.sort_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(a.cmp(&b)));
    let control_scores: Vec<f64> = controls.iter().map(|&c| logits[c]).collect();
    let mut avail = Availability::new(controls.len());

    let mut sets = Vec::new();
    let mut unmatched = Vec::new();
    let mut used = vec![false; controls.len()];
    for &ti in &treated {
        let s = logits[ti];
        let pos = control_scores.partition_point(|&c| c < s);
        let mut left = avail.prev(pos);
        let mut right = avail.next(pos);
        let mut picked = Vec::with_capacity(controls_per_set);
        while picked.len() < controls_per_set {
            let dl = left.map(|p| (s - control_scores[p], controls[p]));
            let dr = right.map(|p| (control_scores[p] - s, controls[p]));
            let take_left = match (dl, dr) {
                (None, None) => break,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (Some(l), Some(r)) => l.0 < r.0 || (l.0 == r.0 && l.1 < r.1),
            };
            let (p, d) = if take_left {
                let p = left.unwrap();
                left = p.checked_sub(1).and_then(|q| avail.prev(q + 1));
                (p, dl.unwrap().0)
            } else {
                let p = right.unwrap();
                right = avail.next(p + 1);
                (p, dr.unwrap().0)
            };
            if width.is_some_and(|w| d > w) {
                break;
            }
            picked.push(p);
        }
        if picked.len() == controls_per_set {
            let mut set = vec![ti];
            for &p in &picked {
                avail.remove(p);
                used[p] = true;
                set.push(controls[p]);
            }
            sets.push(set);
        } else {
            unmatched.push(ti);
        }
    }
    let n_unmatched_treated = unmatched.len();
    unmatched.extend(controls.iter().zip(&used).filter(|(_, &u)| !u).map(|(&c, _)| c));
    unmatched.sort_unstable();
    if sets.is_empty() {
        return Err(Error::NoMatchedSets {
            unmatched: n_unmatched_treated,
        });
    }
    Ok(MatchedSets {
        sets,
        unmatched,
        caliper: width,
    })
}

/// Nearest-available lookups over sorted positions with path compression.
struct Availability {
    // next_root[p]: smallest available position >= p (len = n + 1, n = none)
    next_root: Vec<usize>,
    // prev_root[p]: 1 + largest available position < p (0 = none)
    prev_root: Vec<usize>,
}

impl Availability {
    fn new(n: usize) -> Self {
        Self {
            next_root: (0..=n).collect(),
            prev_root: (0..=n).collect(),
        }
    }

    fn find(parent: &mut [usize], mut p: usize) -> usize {
        let mut root = p;
        while parent[root] != root {
            root = parent[root];
        }
        while parent[p] != root {
            let nxt = parent[p];
            parent[p] = root;
            p = nxt;
        }
        root
    }

    /// Smallest available position `>= p`.
    fn next(&mut self, p: usize) -> Option<usize> {
        let n = self.next_root.len() - 1;
        let r = Self::find(&mut self.next_root, p.min(n));
        (r < n).then_some(r)
    }

    /// Largest available position `< p`.
    fn prev(&mut self, p: usize) -> Option<usize> {
        let r = Self::find(&mut self.prev_root, p);
        r.checked_sub(1)
    }

    fn remove(&mut self, p: usize) {
        self.next_root[p] = p + 1;
        self.prev_root[p + 1] = p;
    }
}

/// Whole matched sets assigned to the train or test fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub train_sets: Vec<usize>,
    pub test_sets: Vec<usize>,
    pub ratio_permille: u32,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn ratio(&self) -> f64 {
        self.ratio_permille as f64 / 1000.0
    }

    /// Sample indices of the train and test folds in set order.
    pub fn fold_indices(&self, sets: &MatchedSets) -> (Vec<usize>, Vec<usize>) {
        let gather = |ids: &[usize]| ids.iter().flat_map(|&s| sets.sets[s].iter().copied()).collect();
        (gather(&self.train_sets), gather(&self.test_sets))
    }

    /// The matched sets of each fold in fold-local coordinates (positions
    /// within the vectors returned by [`Self::fold_indices`]).
    pub fn local_groups(&self, sets: &MatchedSets) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let local = |ids: &[usize]| {
            let mut offset = 0;
            ids.iter()
                .map(|&s| {
                    let len = sets.sets[s].len();
                    let g = (offset..offset + len).collect();
                    offset += len;
                    g
                })
                .collect()
        };
        (local(&self.train_sets), local(&self.test_sets))
    }
}

/// Uniformly random split of whole sets with `ceil(ratio * #sets)` in train
/// (kept within `[1, #sets - 1]`).
pub fn split_sets(sets: &MatchedSets, ratio: f64, seed: u64) -> Result<FoldAssignment> {
    let k = sets.n_sets();
    if k < 2 {
        return Err(Error::TooFewSets { found: k, required: 2 });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("train ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = ((ratio * k as f64).ceil() as usize).clamp(1, k - 1);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut substream(seed, stream::FOLD_SPLIT));
    let mut train_sets = order[..n_train].to_vec();
    let mut test_sets = order[n_train..].to_vec();
    train_sets.sort_unstable();
    test_sets.sort_unstable();
    Ok(FoldAssignment {
        train_sets,
        test_sets,
        ratio_permille: (ratio * 1000.0).round() as u32,
        seed,
    })
}
