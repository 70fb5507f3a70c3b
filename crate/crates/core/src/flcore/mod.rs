//! Desk-scale DP-FedAVG with a simulated trust boundary.
//!
//! Clients train a [`mlp::TinyMlp`] locally, top-k sparsify and clip their
//! model delta, and seal it for the enclave. Inside the enclave the round's
//! sample is drawn, envelopes are verified and opened, the selected
//! aggregator sums the updates and Gaussian noise is added. When the
//! aggregator is Linear the enclave's memory trace is replayed through
//! [`leaked_indices`] to produce the attacker's view of the round.

pub mod config;
pub mod crypto;
pub mod data;
pub mod mlp;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{average_and_perturb, sparse_k, AggregationInput, Aggregator, SparseGradient};
use crate::error::{Error, Result};
use crate::primitives::SENTINEL_INDEX;
use crate::trace::{leaked_indices, AccessTrace, LeakLayout, NullSink};

pub use config::{DatasetConfig, DatasetKind, FlConfig};
use crypto::{AuthenticatedCipher, Envelope, HmacStreamCipher, KeyStore};
use data::{ClientShard, Dataset, GaussianClusters};
use mlp::TinyMlp;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub theta: Vec<f32>,
    pub round: u64,
}

/// Top `ceil(alpha * d)` entries by magnitude, lower index first on ties,
/// returned in ascending index order.
pub fn topk_sparsify(delta: &[f32], alpha: f64) -> SparseGradient {
    let d = delta.len();
    let k = sparse_k(alpha, d).min(d);
    let mut order: Vec<u32> = (0..d as u32).collect();
    let key = |i: &u32| delta[*i as usize].abs();
    if k < d {
        order.select_nth_unstable_by(k, |a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
        order.truncate(k);
    }
    order.sort_unstable();
    let entries = order.into_iter().map(|i| (i, delta[i as usize])).collect();
    SparseGradient::new(entries, d).expect("distinct in-range indices")
}

/// Scales values by `min(1, clip / ||g||)`.
pub fn l2_clip(g: SparseGradient, clip: f64) -> SparseGradient {
    let norm = g.l2_norm();
    if norm <= clip {
        return g;
    }
    let scale = clip / norm;
    g.map_values(|v| (v as f64 * scale) as f32)
}

/// Independent Bernoulli(q) draw per user, in user order.
pub fn sample_participants<R: Rng + ?Sized>(n_users: u32, q: f64, rng: &mut R) -> BTreeSet<u32> {
    // One draw per user even when q = 1 keeps the stream position fixed.
    (0..n_users).filter(|_| rng.gen::<f64>() < q).collect()
}

/// Fixed-size plaintext: `u32 k`, `u32 d`, then `k` records of
/// `u32 index`, `f32 value` (little-endian), sentinel-padded.
pub fn encode_gradient(g: &SparseGradient, k: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * k);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(g.model_dim() as u32).to_le_bytes());
    for cell in g.to_cells(k)? {
        let (i, v) = cell.unpack();
        out.extend_from_slice(&i.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_gradient(bytes: &[u8]) -> Result<SparseGradient> {
    let word = |at: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|b| b.try_into().expect("4 bytes"))
            .ok_or_else(|| Error::Format("truncated gradient payload".into()))
    };
    let k = u32::from_le_bytes(word(0)?) as usize;
    let d = u32::from_le_bytes(word(4)?) as usize;
    if bytes.len() != 8 + 8 * k {
        return Err(Error::Format(format!("payload length {} does not match k = {k}", bytes.len())));
    }
    let mut entries = Vec::with_capacity(k);
    for r in 0..k {
        let index = u32::from_le_bytes(word(8 + 8 * r)?);
        let value = f32::from_le_bytes(word(12 + 8 * r)?);
        if index != SENTINEL_INDEX {
            entries.push((index, value));
        }
    }
    SparseGradient::new(entries, d)
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub user: u32,
    pub delta: SparseGradient,
    pub envelope: Envelope,
}

/// Local training, sparsification, clipping and sealing for one client.
#[allow(clippy::too_many_arguments)]
pub fn client_update<R: Rng + ?Sized>(
    user: u32,
    model: &GlobalModel,
    mlp: &TinyMlp,
    shard: &Dataset,
    cfg: &FlConfig,
    key: &crypto::SharedKey,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let mut local = model.theta.clone();
    mlp.sgd(&mut local, shard.batch(), cfg.lr_client, cfg.local_epochs, cfg.batch_size, 0.0, rng);
    let delta: Vec<f32> = local.iter().zip(&model.theta).map(|(l, g)| l - g).collect();
    let sparse = l2_clip(topk_sparsify(&delta, cfg.alpha), cfg.clip);
    let k = sparse_k(cfg.alpha, delta.len());
    let envelope = HmacStreamCipher.seal(key, user, model.round, &encode_gradient(&sparse, k)?);
    Ok(ClientUpdate { user, delta: sparse, envelope })
}

/// The enclave's per-round admission state.
#[derive(Debug)]
pub struct RoundVerifier<'a> {
    keys: &'a KeyStore,
    round: u64,
    expected: BTreeSet<u32>,
    seen: HashSet<u32>,
}

impl<'a> RoundVerifier<'a> {
    pub fn new(keys: &'a KeyStore, round: u64, expected: BTreeSet<u32>) -> Self {
        RoundVerifier { keys, round, expected, seen: HashSet::new() }
    }

    pub fn expected(&self) -> &BTreeSet<u32> {
        &self.expected
    }

    /// Admits one envelope. A rejection affects only this envelope.
    pub fn verify_and_decrypt(&mut self, env: &Envelope) -> Result<SparseGradient> {
        if !self.expected.contains(&env.user) || env.round != self.round {
            return Err(Error::NotSampled(env.user));
        }
        if self.seen.contains(&env.user) {
            return Err(Error::DuplicateSubmission(env.user));
        }
        let key = self.keys.get(env.user).ok_or(Error::UnknownUser(env.user))?;
        let plain = HmacStreamCipher.open(key, env)?;
        let g = decode_gradient(&plain)?;
        self.seen.insert(env.user);
        Ok(g)
    }
}

/// One round's observed index sets, keyed by user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundLeak {
    pub round: u64,
    pub entries: BTreeMap<u32, BTreeSet<u32>>,
}

impl RoundLeak {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stream {
    Data = 1,
    Init = 2,
    Keys = 3,
    Sampling = 4,
    Client = 5,
    Noise = 6,
    Oram = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent ChaCha stream for `(seed, purpose, round, user)`.
fn stream(seed: u64, purpose: Stream, round: u64, user: u64) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed ^ splitmix(purpose as u64)) ^ round) ^ user);
    ChaCha8Rng::seed_from_u64(s)
}

/// Client population plus the held-out set used for accuracy and by the
/// attacker.
#[derive(Debug, Clone)]
pub struct Federation {
    pub mlp: TinyMlp,
    pub clients: Vec<ClientShard>,
    pub test: Dataset,
    pub keys: KeyStore,
}

impl Federation {
    pub fn build(cfg: &FlConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Data, 0, 0);
        let ds = &cfg.dataset;
        let (pool, test) = match ds.kind {
            DatasetKind::Synthetic => {
                let g = GaussianClusters::new(ds.classes, cfg.model_input, ds.separation, &mut rng);
                let pool = g.generate(ds.train_per_class, &mut rng);
                let test = g.generate(ds.test_per_class, &mut rng);
                (pool, test)
            }
            DatasetKind::Idx => {
                let images = ds.path.clone().expect("validated");
                let labels = ds.labels_path.clone().unwrap_or_else(|| idx_label_path(&images));
                let all = data::load_idx(&images, &labels, cfg.model_input)?;
                if let Some(&bad) = all.labels.iter().find(|&&l| l >= ds.classes) {
                    return Err(Error::Config {
                        key: "dataset.classes".into(),
                        message: format!("label {bad} present in data"),
                    });
                }
                let fraction = (ds.test_per_class * ds.classes) as f64 / all.len().max(1) as f64;
                let (train, test) = data::split_holdout(&all, fraction.min(0.5), &mut rng);
                (train, test)
            }
        };
        let clients = data::partition_label_skew(
            &pool,
            cfg.n_users as usize,
            ds.labels_per_user,
            ds.samples_per_user,
            &mut rng,
        )?;
        let keys = KeyStore::provision(cfg.n_users, &mut stream(cfg.seed, Stream::Keys, 0, 0));
        Ok(Federation { mlp: TinyMlp::new(cfg.model_input, cfg.model_hidden, ds.classes), clients, test, keys })
    }

    pub fn initial_model(&self, cfg: &FlConfig) -> GlobalModel {
        GlobalModel { theta: self.mlp.init(&mut stream(cfg.seed, Stream::Init, 0, 0)), round: 0 }
    }

    pub fn truth(&self) -> Vec<BTreeSet<usize>> {
        self.clients.iter().map(|c| c.labels.clone()).collect()
    }
}

/// `train-images-idx3-ubyte` -> `train-labels-idx1-ubyte`.
fn idx_label_path(images: &Path) -> PathBuf {
    let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    images.with_file_name(name.replace("images", "labels").replace("idx3", "idx1"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: u64,
    pub participants: usize,
    pub accepted: usize,
    pub test_accuracy: f64,
}

/// One round of Algorithm-1 FedAVG. Returns the next model and, for the
/// Linear aggregator, the per-user leak recovered from the enclave trace.
pub fn run_round(
    model: &GlobalModel,
    cfg: &FlConfig,
    fed: &Federation,
) -> Result<(GlobalModel, RoundLeak, RoundReport)> {
    let t = model.round;
    let d = model.theta.len();
    let k = sparse_k(cfg.alpha, d);
    let sampled = sample_participants(cfg.n_users, cfg.q, &mut stream(cfg.seed, Stream::Sampling, t, 0));

    // Client side (untrusted, parallel).
    let envelopes: Vec<Envelope> = sampled
        .par_iter()
        .map(|&u| {
            let key = fed.keys.get(u).ok_or(Error::UnknownUser(u))?;
            let mut rng = stream(cfg.seed, Stream::Client, t, u as u64);
            client_update(u, model, &fed.mlp, &fed.clients[u as usize].data, cfg, key, &mut rng)
                .map(|c| c.envelope)
        })
        .collect::<Result<_>>()?;

    // Enclave side.
    let mut verifier = RoundVerifier::new(&fed.keys, t, sampled.clone());
    let mut users = Vec::new();
    let mut grads = Vec::new();
    for env in &envelopes {
        if let Ok(g) = verifier.verify_and_decrypt(env) {
            users.push(env.user);
            grads.push(g);
        }
    }
    if grads.is_empty() {
        return Err(Error::NoValidUpdates(t));
    }
    let input = AggregationInput::from_gradients(&grads, k, d)?;
    let mut oram_rng = stream(cfg.seed, Stream::Oram, t, 0);
    let mut leak = RoundLeak { round: t, entries: BTreeMap::new() };
    let agg = if cfg.aggregator == Aggregator::Linear {
        let sink = RefCell::new(AccessTrace::new());
        let agg = cfg.aggregator.run(&input, &mut oram_rng, &sink)?;
        let layout = LeakLayout { n: users.len(), k, d, granularity: 1 };
        for (u, set) in users.iter().zip(leaked_indices(&sink.into_inner(), layout)?) {
            leak.entries.insert(*u, set.into_iter().map(|c| c as u32).collect());
        }
        agg
    } else {
        cfg.aggregator.run(&input, &mut oram_rng, &RefCell::new(NullSink))?
    };
    let expected = cfg.q * cfg.n_users as f64;
    let mut noise_rng = stream(cfg.seed, Stream::Noise, t, 0);
    let avg = average_and_perturb(agg, expected, cfg.sigma * cfg.clip, &mut noise_rng, &RefCell::new(NullSink))?;
    let theta: Vec<f32> = model.theta.iter().zip(&avg.values).map(|(w, a)| w + cfg.lr_server * a).collect();
    let acc = fed.mlp.accuracy(&theta, fed.test.batch());
    let report = RoundReport { round: t, participants: sampled.len(), accepted: users.len(), test_accuracy: acc };
    Ok((GlobalModel { theta, round: t + 1 }, leak, report))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: GlobalModel,
    /// `checkpoints[t]` is the model at the start of round `t`; the last
    /// entry is the final model.
    pub checkpoints: Vec<Vec<f32>>,
    pub leaks: Vec<RoundLeak>,
    pub reports: Vec<RoundReport>,
}

pub fn train(cfg: &FlConfig, fed: &Federation) -> Result<TrainOutput> {
    let mut model = fed.initial_model(cfg);
    let mut checkpoints = vec![model.theta.clone()];
    let mut leaks = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..cfg.rounds {
        let (next, leak, report) = run_round(&model, cfg, fed)?;
        model = next;
        checkpoints.push(model.theta.clone());
        if !leak.is_empty() {
            leaks.push(leak);
        }
        reports.push(report);
    }
    Ok(TrainOutput { model, checkpoints, leaks, reports })
}

#[derive(Debug, Serialize, Deserialize)]
struct LeakRecord {
    round: u64,
    user: u32,
    indices: Vec<u32>,
}

/// One JSON object per participant-round.
pub fn write_leak_log<W: Write>(leaks: &[RoundLeak], mut w: W) -> Result<()> {
    for leak in leaks {
        for (&user, set) in &leak.entries {
            let rec = LeakRecord { round: leak.round, user, indices: set.iter().copied().collect() };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_leak_log<R: Read>(r: R) -> Result<Vec<RoundLeak>> {
    let mut rounds: BTreeMap<u64, RoundLeak> = BTreeMap::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LeakRecord = serde_json::from_str(&line)?;
        let leak = rounds.entry(rec.round).or_insert_with(|| RoundLeak { round: rec.round, ..Default::default() });
        leak.entries.insert(rec.user, rec.indices.into_iter().collect());
    }
    Ok(rounds.into_values().collect())
}

pub fn save_leak_log(leaks: &[RoundLeak], path: impl AsRef<Path>) -> Result<()> {
    write_leak_log(leaks, BufWriter::new(File::create(path)?))
}

pub fn load_leak_log(path: impl AsRef<Path>) -> Result<Vec<RoundLeak>> {
    read_leak_log(File::open(path)?)
}

const MODEL_MAGIC: &[u8; 4] = b"OLVM";

pub fn write_checkpoint<W: Write>(theta: &[f32], mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(theta.len() as u32).to_le_bytes())?;
    for v in theta {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let d = u32::from_le_bytes(word) as usize;
    let mut raw = vec![0u8; 4 * d];
    r.read_exact(&mut raw).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
}

/// `dir/model_<t>.olvm`.
pub fn checkpoint_path(dir: impl AsRef<Path>, round: u64) -> PathBuf {
    dir.as_ref().join(format!("model_{round}.olvm"))
}

pub fn save_checkpoint(theta: &[f32], path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(theta, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
