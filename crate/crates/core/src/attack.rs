//! Label inference from leaked top-k gradient indices.
//!
//! The attacker holds the per-round global models and i.i.d. labelled data.
//! For every (label, round) it computes a *teacher* index set, the top-k
//! of one full-batch gradient of θ^t on that label's records, and scores
//! each observed user against the teachers, either by Jaccard similarity
//! or with small classifiers trained on the teachers. The label set is then
//! read off the score vector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flcore::data::Dataset;
use crate::flcore::mlp::TinyMlp;
use crate::flcore::{topk_sparsify, Federation, FlConfig, RoundLeak};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Jac,
    Nn,
    NnSingle,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Jac => "jac",
            Method::Nn => "nn",
            Method::NnSingle => "nn-single",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jac" => Ok(Method::Jac),
            "nn" => Ok(Method::Nn),
            "nn-single" | "nn_single" => Ok(Method::NnSingle),
            other => Err(Error::InvalidParameter(format!("unknown attack method `{other}`"))),
        }
    }
}

/// How the Jaccard path concatenates a user's rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Concat {
    /// Sets of `(round, index)` pairs.
    #[default]
    RoundPairs,
    /// Plain union of indices across rounds.
    Union,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub method: Method,
    pub concat: Concat,
    /// Number of labels per user, if the attacker knows it.
    pub known_count: Option<usize>,
    /// Observation granularity; indices are bucketed by `index / c`.
    pub cacheline_c: u32,
    pub nn_hidden: usize,
    pub nn_epochs: usize,
    pub nn_lr: f32,
    /// Extra teacher sets per (label, round) computed on random
    /// sub-batches, used as classifier training data.
    pub nn_augment: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: Method::Jac,
            concat: Concat::RoundPairs,
            known_count: None,
            cacheline_c: 1,
            nn_hidden: 64,
            nn_epochs: 100,
            nn_lr: 0.5,
            nn_augment: 16,
            seed: 0,
        }
    }
}

/// `teacher[l, t]` for every label and every round with a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTable {
    pub classes: usize,
    /// Width of an index set after bucketing.
    pub width: usize,
    pub rounds: Vec<u64>,
    /// `sets[r][l]`, `r` indexing `rounds`.
    pub sets: Vec<Vec<BTreeSet<u32>>>,
    /// Sub-batch teachers, `augmented[r][l]`; empty unless requested.
    pub augmented: Vec<Vec<Vec<BTreeSet<u32>>>>,
}

impl TeacherTable {
    fn round_pos(&self, round: u64) -> Result<usize> {
        self.rounds.binary_search(&round).map_err(|_| Error::MissingModel(round))
    }

    pub fn get(&self, label: usize, round: u64) -> Result<&BTreeSet<u32>> {
        Ok(&self.sets[self.round_pos(round)?][label])
    }
}

pub fn bucket(set: &BTreeSet<u32>, c: u32) -> BTreeSet<u32> {
    if c <= 1 {
        return set.clone();
    }
    set.iter().map(|&i| i / c).collect()
}

fn teacher_set(mlp: &TinyMlp, theta: &[f32], data: &Dataset, alpha: f64, c: u32) -> BTreeSet<u32> {
    // No dropout, so the RNG is never consulted.
    let (_, grad) = mlp.loss_and_grad(theta, data.batch(), 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    bucket(&topk_sparsify(&grad, alpha).indices().collect(), c)
}

fn subsample<R: Rng + ?Sized>(data: &Dataset, rng: &mut R) -> Dataset {
    let size = (data.len() / 2).max(1);
    let mut out = Dataset::new(data.dim);
    for i in rand::seq::index::sample(rng, data.len(), size) {
        out.push(data.row(i), data.labels[i]);
    }
    out
}

/// Teacher index sets from one full-batch backward pass of each θ^t on
/// each label's records. `augment > 0` adds that many sub-batch teachers
/// per cell for classifier training.
pub fn build_teachers(
    models: &BTreeMap<u64, Vec<f32>>,
    mlp: &TinyMlp,
    data_by_label: &[Dataset],
    alpha: f64,
    cacheline_c: u32,
    augment: usize,
    seed: u64,
) -> Result<TeacherTable> {
    if let Some(l) = data_by_label.iter().position(Dataset::is_empty) {
        return Err(Error::MissingTeacherData(l));
    }
    let c = cacheline_c.max(1);
    let width = mlp.param_count().div_ceil(c as usize);
    let rounds: Vec<u64> = models.keys().copied().collect();
    let cells: Vec<(usize, usize)> =
        (0..rounds.len()).flat_map(|r| (0..data_by_label.len()).map(move |l| (r, l))).collect();
    let computed: Vec<(BTreeSet<u32>, Vec<BTreeSet<u32>>)> = cells
        .par_iter()
        .map(|&(r, l)| {
            let theta = &models[&rounds[r]];
            let full = teacher_set(mlp, theta, &data_by_label[l], alpha, c);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((rounds[r] << 32) | l as u64));
            let extra = (0..augment)
                .map(|_| teacher_set(mlp, theta, &subsample(&data_by_label[l], &mut rng), alpha, c))
                .collect();
            (full, extra)
        })
        .collect();
    let classes = data_by_label.len();
    let mut sets = vec![Vec::with_capacity(classes); rounds.len()];
    let mut augmented = vec![Vec::with_capacity(classes); rounds.len()];
    for ((r, _), (full, extra)) in cells.into_iter().zip(computed) {
        sets[r].push(full);
        augmented[r].push(extra);
    }
    Ok(TeacherTable { classes, width, rounds, sets, augmented })
}

/// `|a ∩ b| / |a ∪ b|`, and 0 when both are empty.
pub fn jaccard(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-label scores, index = label.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackScore {
    pub method: Method,
    pub scores: Vec<f64>,
}

impl AttackScore {
    /// Highest-scoring label; lowest label wins ties.
    pub fn top1(&self) -> usize {
        let mut best = 0;
        for (l, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = l;
            }
        }
        best
    }
}

/// One user's observed sets, keyed by round.
pub type UserView = BTreeMap<u64, BTreeSet<u32>>;

/// Regroups a leak log by user, bucketing indices by `c`.
pub fn user_views(leaks: &[RoundLeak], c: u32) -> BTreeMap<u32, UserView> {
    let mut out: BTreeMap<u32, UserView> = BTreeMap::new();
    for leak in leaks {
        for (&user, set) in &leak.entries {
            out.entry(user).or_default().insert(leak.round, bucket(set, c));
        }
    }
    out
}

pub fn score_jac(view: &UserView, teachers: &TeacherTable, concat: Concat) -> Result<AttackScore> {
    if view.is_empty() {
        return Err(Error::NoObservations);
    }
    let mut scores = Vec::with_capacity(teachers.classes);
    for l in 0..teachers.classes {
        let s = match concat {
            Concat::RoundPairs => {
                let (mut inter, mut union) = (0usize, 0usize);
                for (&t, leak) in view {
                    let teacher = teachers.get(l, t)?;
                    let i = leak.intersection(teacher).count();
                    inter += i;
                    union += leak.len() + teacher.len() - i;
                }
                if union == 0 {
                    0.0
                } else {
                    inter as f64 / union as f64
                }
            }
            Concat::Union => {
                let mut a = BTreeSet::new();
                let mut b = BTreeSet::new();
                for (&t, leak) in view {
                    a.extend(leak.iter().copied());
                    b.extend(teachers.get(l, t)?.iter().copied());
                }
                jaccard(&a, &b)
            }
        };
        scores.push(s);
    }
    Ok(AttackScore { method: Method::Jac, scores })
}

fn multi_hot_into(set: &BTreeSet<u32>, offset: usize, row: &mut [f32]) {
    for &i in set {
        row[offset + i as usize] = 1.0;
    }
}

/// Classifiers trained on the teacher table: one per round (`Nn`) or one
/// over the round-concatenated input (`NnSingle`).
#[derive(Debug, Clone)]
pub struct NnScorer {
    variant: Method,
    mlp: TinyMlp,
    rounds: Vec<u64>,
    width: usize,
    /// One parameter vector per round for `Nn`, a single one for `NnSingle`.
    thetas: Vec<Vec<f32>>,
}

impl NnScorer {
    pub fn train(teachers: &TeacherTable, variant: Method, cfg: &AttackConfig) -> Result<Self> {
        let rounds = teachers.rounds.clone();
        let width = teachers.width;
        let classes = teachers.classes;
        let samples = |r: usize, l: usize| std::iter::once(&teachers.sets[r][l]).chain(&teachers.augmented[r][l]);
        match variant {
            Method::Jac => Err(Error::InvalidParameter("jac has no classifier".into())),
            Method::Nn => {
                let mlp = TinyMlp::new(width, cfg.nn_hidden, classes);
                let thetas = (0..rounds.len())
                    .into_par_iter()
                    .map(|r| {
                        let mut x = Vec::new();
                        let mut y = Vec::new();
                        let mut row = vec![0.0f32; width];
                        for l in 0..classes {
                            for set in samples(r, l) {
                                row.iter_mut().for_each(|v| *v = 0.0);
                                multi_hot_into(set, 0, &mut row);
                                x.extend_from_slice(&row);
                                y.push(l);
                            }
                        }
                        fit(&mlp, &x, &y, cfg, rounds[r])
                    })
                    .collect();
                Ok(NnScorer { variant, mlp, rounds, width, thetas })
            }
            Method::NnSingle => {
                let input = width * rounds.len();
                let mlp = TinyMlp::new(input, cfg.nn_hidden, classes);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
                let per_label = 1 + cfg.nn_augment;
                let mut x = Vec::new();
                let mut y = Vec::new();
                let mut row = vec![0.0f32; input];
                for l in 0..classes {
                    for s in 0..per_label {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        // The first sample sees every round; the rest drop
                        // rounds at random, as absent users do.
                        let mut any = false;
                        for r in 0..rounds.len() {
                            let keep = s == 0 || rng.gen_bool(0.5);
                            if keep {
                                let set = if s == 0 {
                                    &teachers.sets[r][l]
                                } else {
                                    let aug = &teachers.augmented[r][l];
                                    if aug.is_empty() {
                                        &teachers.sets[r][l]
                                    } else {
                                        &aug[rng.gen_range(0..aug.len())]
                                    }
                                };
                                multi_hot_into(set, r * width, &mut row);
                                any = true;
                            }
                        }
                        if !any {
                            let r = rng.gen_range(0..rounds.len());
                            multi_hot_into(&teachers.sets[r][l], r * width, &mut row);
                        }
                        x.extend_from_slice(&row);
                        y.push(l);
                    }
                }
                let theta = fit(&mlp, &x, &y, cfg, u64::MAX);
                Ok(NnScorer { variant, mlp, rounds, width, thetas: vec![theta] })
            }
        }
    }

    pub fn score(&self, view: &UserView) -> Result<AttackScore> {
        if view.is_empty() {
            return Err(Error::NoObservations);
        }
        let pos = |t: u64| self.rounds.binary_search(&t).map_err(|_| Error::MissingModel(t));
        let scores = match self.variant {
            Method::NnSingle => {
                let mut row = vec![0.0f32; self.mlp.input];
                for (&t, set) in view {
                    multi_hot_into(set, pos(t)? * self.width, &mut row);
                }
                self.mlp.predict_proba(&self.thetas[0], &row).into_iter().map(f64::from).collect()
            }
            _ => {
                let mut acc = vec![0.0f64; self.mlp.output];
                for (&t, set) in view {
                    let mut row = vec![0.0f32; self.width];
                    multi_hot_into(set, 0, &mut row);
                    for (a, p) in acc.iter_mut().zip(self.mlp.predict_proba(&self.thetas[pos(t)?], &row)) {
                        *a += p as f64;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= view.len() as f64);
                acc
            }
        };
        Ok(AttackScore { method: self.variant, scores })
    }

    /// Scores a raw input row (diagnostics).
    pub fn score_row(&self, round_slot: usize, row: &[f32]) -> Vec<f32> {
        self.mlp.predict_proba(&self.thetas[round_slot.min(self.thetas.len() - 1)], row)
    }
}

fn fit(mlp: &TinyMlp, x: &[f32], y: &[usize], cfg: &AttackConfig, tag: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ tag.rotate_left(17));
    let mut theta = mlp.init(&mut rng);
    mlp.sgd(&mut theta, crate::flcore::mlp::Batch { x, labels: y }, cfg.nn_lr, cfg.nn_epochs, 32, 0.5, &mut rng);
    theta
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub labels: BTreeSet<usize>,
    /// All scores were equal; `labels` is the lowest label.
    pub degenerate: bool,
}

/// Top `known_count` labels, or the higher cluster of a two-means split.
pub fn extract_labels(score: &AttackScore, known_count: Option<usize>) -> Result<Extraction> {
    let s = &score.scores;
    if s.is_empty() {
        return Err(Error::InvalidParameter("empty score vector".into()));
    }
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if let Some(m) = known_count {
        if m == 0 || m > s.len() {
            return Err(Error::InvalidParameter(format!("known count {m} not in 1..={}", s.len())));
        }
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        return Ok(Extraction { labels: order[..m].iter().copied().collect(), degenerate: min == max });
    }
    if min == max {
        return Ok(Extraction { labels: [score.top1()].into(), degenerate: true });
    }
    let (mut lo, mut hi) = (min, max);
    for _ in 0..100 {
        let (mut sl, mut nl, mut sh, mut nh) = (0.0, 0usize, 0.0, 0usize);
        for &v in s {
            // Ties between the centroids go to the upper cluster.
            if (v - lo).abs() < (v - hi).abs() {
                sl += v;
                nl += 1;
            } else {
                sh += v;
                nh += 1;
            }
        }
        let new_lo = if nl > 0 { sl / nl as f64 } else { lo };
        let new_hi = if nh > 0 { sh / nh as f64 } else { hi };
        let moved = (new_lo - lo).abs().max((new_hi - hi).abs());
        lo = new_lo;
        hi = new_hi;
        if moved < 1e-9 {
            break;
        }
    }
    let labels = (0..s.len()).filter(|&l| (s[l] - lo).abs() >= (s[l] - hi).abs()).collect();
    Ok(Extraction { labels, degenerate: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub user: u32,
    pub method: Method,
    pub predicted: BTreeSet<usize>,
    pub top1: usize,
    pub truth: BTreeSet<usize>,
    pub degenerate: bool,
}

/// `(all, top1)`: exact-set match rate and top-label containment rate.
pub fn evaluate_attack(results: &[AttackResult]) -> Result<(f64, f64)> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let n = results.len() as f64;
    let all = results.iter().filter(|r| r.predicted == r.truth).count() as f64 / n;
    let top1 = results.iter().filter(|r| r.truth.contains(&r.top1)).count() as f64 / n;
    Ok((all, top1))
}

/// Teachers, scoring and extraction for every observed user. `truth[u]`
/// is user `u`'s label set (empty if unknown).
pub fn run_attack(
    leaks: &[RoundLeak],
    models: &BTreeMap<u64, Vec<f32>>,
    mlp: &TinyMlp,
    attacker_data: &Dataset,
    classes: usize,
    alpha: f64,
    truth: &[BTreeSet<usize>],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let views = user_views(leaks, cfg.cacheline_c);
    if views.is_empty() {
        return Err(Error::NoObservations);
    }
    let observed: BTreeSet<u64> = leaks.iter().filter(|l| !l.is_empty()).map(|l| l.round).collect();
    let mut used = BTreeMap::new();
    for t in observed {
        used.insert(t, models.get(&t).ok_or(Error::MissingModel(t))?.clone());
    }
    let by_label: Vec<Dataset> = (0..classes).map(|l| attacker_data.filter_label(l)).collect();
    let augment = if cfg.method == Method::Jac { 0 } else { cfg.nn_augment };
    let teachers = build_teachers(&used, mlp, &by_label, alpha, cfg.cacheline_c, augment, cfg.seed)?;
    let nn = match cfg.method {
        Method::Jac => None,
        m => Some(NnScorer::train(&teachers, m, cfg)?),
    };
    views
        .par_iter()
        .map(|(&user, view)| {
            let score = match &nn {
                None => score_jac(view, &teachers, cfg.concat)?,
                Some(s) => s.score(view)?,
            };
            let ex = extract_labels(&score, cfg.known_count)?;
            Ok(AttackResult {
                user,
                method: cfg.method,
                predicted: ex.labels,
                top1: score.top1(),
                truth: truth.get(user as usize).cloned().unwrap_or_default(),
                degenerate: ex.degenerate,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSummary {
    pub all: f64,
    pub top1: f64,
    pub users: usize,
    pub final_accuracy: f64,
}

/// Trains a federation under `fl`, then attacks its leak log.
pub fn simulate(fl: &FlConfig, cfg: &AttackConfig) -> Result<AttackSummary> {
    let fed = Federation::build(fl)?;
    let out = crate::flcore::train(fl, &fed)?;
    let models = out.checkpoints.iter().enumerate().map(|(t, th)| (t as u64, th.clone())).collect();
    let results =
        run_attack(&out.leaks, &models, &fed.mlp, &fed.test, fl.classes(), fl.alpha, &fed.truth(), cfg)?;
    let (all, top1) = evaluate_attack(&results)?;
    let final_accuracy = out.reports.last().map_or(0.0, |r| r.test_accuracy);
    Ok(AttackSummary { all, top1, users: results.len(), final_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    fn table(sets: Vec<Vec<BTreeSet<u32>>>, width: usize) -> TeacherTable {
        let rounds = (0..sets.len() as u64).collect();
        let classes = sets[0].len();
        let augmented = vec![vec![Vec::new(); classes]; sets.len()];
        TeacherTable { classes, width, rounds, sets, augmented }
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&set(&[5, 6]), &set(&[5, 6])), 1.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[2])), 0.0);
        assert_eq!(jaccard(&set(&[]), &set(&[])), 0.0);
    }

    #[test]
    fn jac_scores_exact_teacher_as_one() {
        let t = table(vec![vec![set(&[0, 1]), set(&[2, 3]), set(&[1, 2])]], 4);
        let view: UserView = [(0, set(&[2, 3]))].into();
        let s = score_jac(&view, &t, Concat::RoundPairs).unwrap();
        assert_eq!(s.scores, vec![0.0, 1.0, 1.0 / 3.0]);
        assert_eq!(s.top1(), 1);
        assert!(matches!(score_jac(&UserView::new(), &t, Concat::RoundPairs), Err(Error::NoObservations)));
        let late: UserView = [(4, set(&[1]))].into();
        assert!(matches!(score_jac(&late, &t, Concat::Union), Err(Error::MissingModel(4))));
    }

    #[test]
    fn round_pairs_differ_from_union() {
        let t = table(vec![vec![set(&[0]), set(&[1])], vec![set(&[1]), set(&[0])]], 2);
        let view: UserView = [(0, set(&[0])), (1, set(&[1]))].into();
        let pairs = score_jac(&view, &t, Concat::RoundPairs).unwrap();
        assert_eq!(pairs.scores, vec![1.0, 0.0]);
        let union = score_jac(&view, &t, Concat::Union).unwrap();
        assert_eq!(union.scores, vec![1.0, 1.0]);
    }

    #[test]
    fn extraction_examples() {
        let s = |v: &[f64]| AttackScore { method: Method::Jac, scores: v.to_vec() };
        let two = extract_labels(&s(&[0.9, 0.85, 0.1, 0.05]), None).unwrap();
        assert_eq!(two.labels, [0, 1].into());
        assert!(!two.degenerate);
        assert_eq!(extract_labels(&s(&[0.2, 0.7, 0.4]), Some(1)).unwrap().labels, [1].into());
        assert_eq!(extract_labels(&s(&[0.2, 0.7, 0.4]), Some(2)).unwrap().labels, [1, 2].into());
        let flat = extract_labels(&s(&[0.5, 0.5, 0.5]), None).unwrap();
        assert!(flat.degenerate);
        assert_eq!(flat.labels, [0].into());
        assert!(extract_labels(&s(&[0.5]), Some(2)).is_err());
    }

    #[test]
    fn evaluation_examples() {
        let r = |pred: &[usize], top1: usize, truth: &[usize]| AttackResult {
            user: 0,
            method: Method::Jac,
            predicted: pred.iter().copied().collect(),
            top1,
            truth: truth.iter().copied().collect(),
            degenerate: false,
        };
        assert_eq!(evaluate_attack(&[r(&[1, 3, 5], 1, &[1, 3, 5])]).unwrap(), (1.0, 1.0));
        assert_eq!(evaluate_attack(&[r(&[5], 5, &[4, 5])]).unwrap(), (0.0, 1.0));
        assert_eq!(evaluate_attack(&[r(&[1, 3, 5], 1, &[1, 3, 5]), r(&[2], 2, &[4, 5])]).unwrap(), (0.5, 0.5));
        assert!(matches!(evaluate_attack(&[]), Err(Error::EmptyResults)));
    }

    #[test]
    fn bucketing() {
        assert_eq!(bucket(&set(&[0, 7, 8, 17]), 8), set(&[0, 1, 2]));
        assert_eq!(bucket(&set(&[3, 4]), 1), set(&[3, 4]));
    }

    fn small_fl() -> (FlConfig, Federation, BTreeMap<u64, Vec<f32>>) {
        let fl = FlConfig::default();
        let fed = Federation::build(&fl).unwrap();
        let models = [(0u64, fed.initial_model(&fl).theta)].into();
        (fl, fed, models)
    }

    #[test]
    fn teacher_shape_and_degenerate_alpha() {
        let (fl, fed, models) = small_fl();
        let by_label: Vec<Dataset> = (0..10).map(|l| fed.test.filter_label(l)).collect();
        let t = build_teachers(&models, &fed.mlp, &by_label, fl.alpha, 1, 0, 0).unwrap();
        let k = crate::aggregation::sparse_k(fl.alpha, fed.mlp.param_count());
        assert!(t.sets[0].iter().all(|s| s.len() == k));
        assert_eq!(t, build_teachers(&models, &fed.mlp, &by_label, fl.alpha, 1, 0, 0).unwrap());

        let full = build_teachers(&models, &fed.mlp, &by_label, 1.0, 1, 0, 0).unwrap();
        let view: UserView = [(0, full.sets[0][3].clone())].into();
        let s = score_jac(&view, &full, Concat::RoundPairs).unwrap();
        assert!(s.scores.iter().all(|&v| v == 1.0));

        let mut missing = by_label.clone();
        missing[4] = Dataset::new(missing[4].dim);
        assert!(matches!(
            build_teachers(&models, &fed.mlp, &missing, fl.alpha, 1, 0, 0),
            Err(Error::MissingTeacherData(4))
        ));
    }

    // A fresh single-label client's top-k is closer to its own label's
    // teacher than to the others', on average.
    #[test]
    fn teachers_correlate_with_labels() {
        let (fl, fed, models) = small_fl();
        let by_label: Vec<Dataset> = (0..10).map(|l| fed.test.filter_label(l)).collect();
        let t = build_teachers(&models, &fed.mlp, &by_label, fl.alpha, 1, 0, 0).unwrap();
        let mut own = 0.0;
        let mut other = 0.0;
        for shard in &fed.clients {
            for &l in &shard.labels {
                let mine = shard.data.filter_label(l);
                let s = teacher_set(&fed.mlp, &models[&0], &mine, fl.alpha, 1);
                for (m, teacher) in t.sets[0].iter().enumerate() {
                    if m == l {
                        own += jaccard(&s, teacher);
                    } else {
                        other += jaccard(&s, teacher) / 9.0;
                    }
                }
            }
        }
        assert!(own > other, "own {own} other {other}");
    }

    #[test]
    fn nn_fits_its_teachers() {
        let (fl, fed, models) = small_fl();
        let by_label: Vec<Dataset> = (0..10).map(|l| fed.test.filter_label(l)).collect();
        let cfg = AttackConfig { method: Method::Nn, ..Default::default() };
        let t = build_teachers(&models, &fed.mlp, &by_label, fl.alpha, 1, cfg.nn_augment, 0).unwrap();
        for variant in [Method::Nn, Method::NnSingle] {
            let nn = NnScorer::train(&t, variant, &cfg).unwrap();
            let hits = (0..10)
                .filter(|&l| nn.score(&[(0, t.sets[0][l].clone())].into()).unwrap().top1() == l)
                .count();
            assert!(hits >= 9, "{variant}: {hits}/10");
        }
        let nn = NnScorer::train(&t, Method::Nn, &cfg).unwrap();
        let p = nn.score_row(0, &vec![0.0; t.width]);
        let spread = p.iter().cloned().fold(f32::MIN, f32::max) - p.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread < 0.5, "zero input spread {spread}");
    }

    proptest! {
        #[test]
        fn jac_is_order_invariant_and_monotone(
            a in prop::collection::btree_set(0u32..40, 1..20),
            b in prop::collection::btree_set(0u32..40, 1..20),
            extra in 40u32..60,
        ) {
            let t = table(vec![vec![b.clone()]], 60);
            let view: UserView = [(0, a.clone())].into();
            let before = score_jac(&view, &t, Concat::RoundPairs).unwrap().scores[0];
            prop_assert_eq!(before, jaccard(&a, &b));
            let mut a2 = a.clone();
            a2.insert(extra);
            let mut b2 = b.clone();
            b2.insert(extra);
            let t2 = table(vec![vec![b2]], 60);
            let after = score_jac(&[(0, a2)].into(), &t2, Concat::RoundPairs).unwrap().scores[0];
            prop_assert!(after >= before);
        }
    }
}
