//! The experience pool: islands of clusters keyed by rounded score, the
//! two-level context sampler, periodic island reset, the insight store and
//! line-oriented checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::constraints::CheckReport;
use crate::expr::{Expression, Params};
use crate::optimizer::Fitted;
use crate::scoring::{
    cluster_distribution, normalize_scores, pace_score, temperature, BudgetState, PaceParams, TemperatureSchedule,
};
use crate::seeds;

pub const DEFAULT_ISLANDS: usize = 10;
/// Length scale of the short-program preference inside a cluster.
pub const LENGTH_SCALE: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("island {island} out of range (pool has {count})")]
    IslandOutOfRange { island: usize, count: usize },
    #[error("infeasible candidate cannot be registered")]
    Infeasible,
    #[error("pool is empty")]
    Empty,
    #[error("pool needs at least one island")]
    NoIslands,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint record at line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Evolution,
    Refine,
    Repair,
    Reseed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub stage: Stage,
    #[serde(default)]
    pub parents: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub expr: Expression,
    pub params: Params,
    /// Negative train MSE.
    pub score_mse: f64,
    pub valid: bool,
    pub report: CheckReport,
    /// Train residuals `y - y_hat`.
    #[serde(default)]
    pub residual: Vec<f64>,
    pub lineage: Lineage,
}

impl Candidate {
    /// Candidate from a fit; the id is assigned on registration.
    pub fn from_fitted(f: Fitted, residual: Vec<f64>, lineage: Lineage) -> Candidate {
        Candidate {
            id: 0,
            score_mse: f.score_mse(),
            valid: f.report.valid,
            params: f.fit.params,
            expr: f.expr,
            report: f.report,
            residual,
            lineage,
        }
    }

    pub fn len(&self) -> usize {
        self.expr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expr.is_empty()
    }

    pub fn feasible(&self) -> bool {
        self.score_mse.is_finite()
    }
}

/// Score rounded to 6 significant figures.
pub fn signature(score: f64) -> f64 {
    format!("{score:.5e}").parse().unwrap_or(score)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub signature: f64,
    pub members: Vec<Candidate>,
}

impl Cluster {
    pub fn has_valid(&self) -> bool {
        self.members.iter().any(|c| c.valid)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Island {
    pub id: usize,
    pub clusters: Vec<Cluster>,
    pub registered: u64,
}

impl Island {
    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.clusters.iter().flat_map(|c| c.members.iter())
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.candidates().max_by(|a, b| a.score_mse.total_cmp(&b.score_mse))
    }

    fn insert(&mut self, c: Candidate) {
        let sig = signature(c.score_mse);
        match self.clusters.iter_mut().find(|cl| cl.signature == sig) {
            Some(cl) => cl.members.push(c),
            None => self.clusters.push(Cluster { signature: sig, members: vec![c] }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsightKind {
    Success,
    Failure,
}

/// Reusable lesson distilled from a refinement attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub id: u64,
    pub text: String,
    pub kind: InsightKind,
    pub island: usize,
    /// Unit-norm residual of the candidate the lesson came from.
    #[serde(default)]
    pub fingerprint: Vec<f64>,
    /// Budget position when the insight was recorded.
    pub created_at: u64,
    #[serde(default)]
    pub sources: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub islands: Vec<Island>,
    pub insights: Vec<Insight>,
    /// Free-form counters persisted with the pool (used by the pipeline).
    pub counters: BTreeMap<String, u64>,
    next_id: u64,
    total_registered: u64,
}

/// Sampling knobs for [`Pool::sample_context`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub k: usize,
    pub pace: PaceParams,
    pub schedule: TemperatureSchedule,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { k: 2, pace: PaceParams::default(), schedule: TemperatureSchedule::default() }
    }
}

impl Pool {
    pub fn new(num_islands: usize) -> Result<Pool, PoolError> {
        if num_islands == 0 {
            return Err(PoolError::NoIslands);
        }
        Ok(Pool {
            islands: (0..num_islands).map(|id| Island { id, ..Island::default() }).collect(),
            insights: Vec::new(),
            counters: BTreeMap::new(),
            next_id: 0,
            total_registered: 0,
        })
    }

    pub fn num_islands(&self) -> usize {
        self.islands.len()
    }

    pub fn total_registered(&self) -> u64 {
        self.total_registered
    }

    pub fn len(&self) -> usize {
        self.candidates().count()
    }

    pub fn is_empty(&self) -> bool {
        self.islands.iter().all(Island::is_empty)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &Candidate> {
        self.islands.iter().flat_map(Island::candidates)
    }

    /// Highest-scoring candidate overall.
    pub fn best(&self) -> Option<&Candidate> {
        self.candidates().max_by(|a, b| a.score_mse.total_cmp(&b.score_mse))
    }

    pub fn best_valid(&self) -> Option<&Candidate> {
        self.candidates().filter(|c| c.valid).max_by(|a, b| a.score_mse.total_cmp(&b.score_mse))
    }

    /// Inserts `c` under a fresh id and returns the id.
    pub fn register(&mut self, mut c: Candidate, island: usize) -> Result<u64, PoolError> {
        if island >= self.islands.len() {
            return Err(PoolError::IslandOutOfRange { island, count: self.islands.len() });
        }
        if !c.feasible() {
            return Err(PoolError::Infeasible);
        }
        c.id = self.next_id;
        self.next_id += 1;
        self.total_registered += 1;
        let isl = &mut self.islands[island];
        isl.registered += 1;
        isl.insert(c);
        Ok(self.next_id - 1)
    }

    /// Candidate `i` goes to island `i mod num_islands`.
    pub fn assign_warmup(&mut self, cs: Vec<Candidate>) -> Result<Vec<u64>, PoolError> {
        let n = self.islands.len();
        cs.into_iter().enumerate().filter(|(_, c)| c.feasible()).map(|(i, c)| self.register(c, i % n)).collect()
    }

    /// Two-level sampling: an island uniformly among non-empty ones, `k`
    /// clusters from the annealed softmax, then one member per cluster
    /// favouring short valid programs. Returned worst to best.
    pub fn sample_context(
        &self,
        budget: BudgetState,
        sp: &SamplingParams,
        seed: u64,
    ) -> Result<(usize, Vec<Candidate>), PoolError> {
        let non_empty: Vec<&Island> = self.islands.iter().filter(|i| !i.is_empty()).collect();
        if non_empty.is_empty() {
            return Err(PoolError::Empty);
        }
        let mut rng = seeds::rng(seed);
        let island = non_empty[rng.random_range(0..non_empty.len())];

        let sigs: Vec<f64> = island.clusters.iter().map(|c| c.signature).collect();
        let norm = normalize_scores(&sigs).expect("island is non-empty with finite scores");
        let pace: Vec<f64> =
            island.clusters.iter().zip(&norm).map(|(c, s)| pace_score(*s, c.has_valid(), budget, &sp.pace)).collect();
        let tau = temperature(self.total_registered, &sp.schedule);
        let mut probs = cluster_distribution(&pace, tau).expect("finite pace scores");

        let replace = island.clusters.len() < sp.k;
        let mut picked = Vec::with_capacity(sp.k);
        for _ in 0..sp.k {
            let ci = draw(&probs, &mut rng);
            picked.push(member(&island.clusters[ci], &mut rng).clone());
            if !replace {
                probs[ci] = 0.0;
                let z: f64 = probs.iter().sum();
                if z > 0.0 {
                    probs.iter_mut().for_each(|p| *p /= z);
                } else {
                    // remaining mass underflowed; spread it over undrawn clusters
                    let left: Vec<usize> =
                        (0..probs.len()).filter(|&j| !picked_cluster(&picked, &island.clusters[j])).collect();
                    for &j in &left {
                        probs[j] = 1.0 / left.len() as f64;
                    }
                }
            }
        }
        picked.sort_by(|a, b| a.score_mse.total_cmp(&b.score_mse));
        Ok((island.id, picked))
    }

    /// Clears the worse half of the islands (ranked by best score, lower id
    /// wins ties) and reseeds each with a copy of a random survivor's best.
    pub fn reset_weak_islands(&mut self, seed: u64) {
        let n = self.islands.len();
        if n < 2 {
            return;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let best = |i: usize| self.islands[i].best().map_or(f64::NEG_INFINITY, |c| c.score_mse);
        order.sort_by(|&a, &b| best(b).total_cmp(&best(a)).then(a.cmp(&b)));
        let keep = n - n / 2;
        let survivors: Vec<usize> = order[..keep].iter().copied().filter(|&i| !self.islands[i].is_empty()).collect();
        if survivors.is_empty() {
            return;
        }
        let mut rng = seeds::rng(seed);
        for &weak in &order[keep..] {
            let donor = survivors[rng.random_range(0..survivors.len())];
            let src = self.islands[donor].best().expect("survivor is non-empty").clone();
            self.islands[weak].clusters.clear();
            let copy = Candidate { lineage: Lineage { stage: Stage::Reseed, parents: vec![src.id] }, ..src };
            self.register(copy, weak).expect("feasible copy into a valid island");
        }
    }

    /// Stores `ins` under a fresh id and returns the id.
    pub fn add_insight(&mut self, mut ins: Insight) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        ins.id = id;
        self.insights.push(ins);
        id
    }

    /// Writes one JSON record per line: a `meta` header, then every
    /// candidate, then every insight.
    pub fn save(&self, path: &Path) -> Result<(), PoolError> {
        let io = |source| PoolError::Io { path: path.to_path_buf(), source };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let meta = Record::Meta(Meta {
            num_islands: self.islands.len(),
            next_id: self.next_id,
            total_registered: self.total_registered,
            island_registered: self.islands.iter().map(|i| i.registered).collect(),
            counters: self.counters.clone(),
        });
        let line = |r: &Record| serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{}", line(&meta)).map_err(io)?;
        for isl in &self.islands {
            for c in isl.candidates() {
                let r = Record::Candidate { island: isl.id, candidate: Box::new(c.clone()) };
                writeln!(w, "{}", line(&r)).map_err(io)?;
            }
        }
        for ins in &self.insights {
            writeln!(w, "{}", line(&Record::Insight(ins.clone()))).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a checkpoint written by [`Pool::save`]. An empty file yields an
    /// empty pool with the default island count.
    pub fn load(path: &Path) -> Result<Pool, PoolError> {
        let file = File::open(path).map_err(|source| PoolError::Io { path: path.to_path_buf(), source })?;
        let mut pool: Option<Pool> = None;
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let lineno = k + 1;
            let line = line.map_err(|source| PoolError::Io { path: path.to_path_buf(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |msg: String| PoolError::Corrupt { line: lineno, msg };
            let rec: Record = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            match rec {
                Record::Meta(m) => {
                    if pool.is_some() {
                        return Err(corrupt("duplicate meta record".into()));
                    }
                    if m.island_registered.len() != m.num_islands {
                        return Err(corrupt("island count mismatch".into()));
                    }
                    let mut p = Pool::new(m.num_islands).map_err(|e| corrupt(e.to_string()))?;
                    p.next_id = m.next_id;
                    p.total_registered = m.total_registered;
                    p.counters = m.counters;
                    for (isl, r) in p.islands.iter_mut().zip(m.island_registered) {
                        isl.registered = r;
                    }
                    pool = Some(p);
                }
                Record::Candidate { island, candidate } => {
                    let p = pool.as_mut().ok_or_else(|| corrupt("candidate before meta".into()))?;
                    if island >= p.islands.len() {
                        return Err(corrupt(format!("island {island} out of range")));
                    }
                    if !candidate.feasible() {
                        return Err(corrupt("non-finite score".into()));
                    }
                    p.islands[island].insert(*candidate);
                }
                Record::Insight(ins) => {
                    let p = pool.as_mut().ok_or_else(|| corrupt("insight before meta".into()))?;
                    p.insights.push(ins);
                }
            }
        }
        match pool {
            Some(p) => Ok(p),
            None => Pool::new(DEFAULT_ISLANDS),
        }
    }
}

fn picked_cluster(picked: &[Candidate], cl: &Cluster) -> bool {
    picked.iter().any(|p| cl.members.iter().any(|m| m.id == p.id))
}

fn draw(probs: &[f64], rng: &mut seeds::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn member<'a>(cl: &'a Cluster, rng: &mut seeds::Rng) -> &'a Candidate {
    let any_valid = cl.has_valid();
    let pool: Vec<&Candidate> = cl.members.iter().filter(|c| c.valid || !any_valid).collect();
    let w: Vec<f64> = pool.iter().map(|c| (-(c.len() as f64) / LENGTH_SCALE).exp()).collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
    pool[draw(&probs, rng)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    num_islands: usize,
    next_id: u64,
    total_registered: u64,
    island_registered: Vec<u64>,
    #[serde(default)]
    counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Meta(Meta),
    Candidate {
        island: usize,
        #[serde(flatten)]
        candidate: Box<Candidate>,
    },
    Insight(Insight),
}
