//! Datasets and the label-skew partitioner.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mlp::Batch;
use crate::error::{Error, Result};

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Dataset { dim, x: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: &[f32], label: usize) {
        debug_assert_eq!(features.len(), self.dim);
        self.x.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch { x: &self.x, labels: &self.labels }
    }

    /// The subset carrying `label`.
    pub fn filter_label(&self, label: usize) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for i in (0..self.len()).filter(|&i| self.labels[i] == label) {
            out.push(self.row(i), label);
        }
        out
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

/// Gaussian clusters: one mean per class drawn from `N(0, separation^2)`
/// per feature, samples at unit variance around their class mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClusters {
    pub means: Vec<Vec<f32>>,
}

impl GaussianClusters {
    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, separation: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, separation.max(0.0)).expect("finite separation");
        let means = (0..classes).map(|_| (0..dim).map(|_| normal.sample(rng)).collect()).collect();
        GaussianClusters { means }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, label: usize, count: usize, out: &mut Dataset, rng: &mut R) {
        let mut row = vec![0.0f32; self.dim()];
        for _ in 0..count {
            for (v, &m) in row.iter_mut().zip(&self.means[label]) {
                let z: f32 = rand_distr::StandardNormal.sample(rng);
                *v = m + z;
            }
            out.push(&row, label);
        }
    }

    /// `per_class` samples of every class.
    pub fn generate<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Dataset {
        let mut out = Dataset::new(self.dim());
        for label in 0..self.classes() {
            self.sample_into(label, per_class, &mut out, rng);
        }
        out
    }
}

/// One client's local data and the label subset it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub labels: BTreeSet<usize>,
    pub data: Dataset,
}

/// Label-skew partition: every client receives `labels_per_client` distinct
/// labels chosen uniformly and `samples_per_client` records split evenly
/// among them, drawn with replacement from the pool's records of each label.
pub fn partition_label_skew<R: Rng + ?Sized>(
    pool: &Dataset,
    clients: usize,
    labels_per_client: usize,
    samples_per_client: usize,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    let classes: Vec<usize> = pool.label_set().into_iter().collect();
    if labels_per_client == 0 || labels_per_client > classes.len() {
        return Err(Error::InvalidParameter(format!(
            "labels per client {labels_per_client} not in 1..={}",
            classes.len()
        )));
    }
    let by_label: Vec<Vec<usize>> =
        classes.iter().map(|&l| (0..pool.len()).filter(|&i| pool.labels[i] == l).collect()).collect();
    let mut shards = Vec::with_capacity(clients);
    for _ in 0..clients {
        let chosen: Vec<usize> = rand::seq::index::sample(rng, classes.len(), labels_per_client).into_vec();
        let mut data = Dataset::new(pool.dim);
        for (slot, &c) in chosen.iter().enumerate() {
            let count = samples_per_client / labels_per_client
                + usize::from(slot < samples_per_client % labels_per_client);
            for _ in 0..count {
                let &i = by_label[c].choose(rng).expect("label pool is nonempty");
                data.push(pool.row(i), classes[c]);
            }
        }
        shards.push(ClientShard { labels: chosen.iter().map(|&c| classes[c]).collect(), data });
    }
    Ok(shards)
}

fn read_be_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated IDX header".into()))?;
    Ok(u32::from_be_bytes(b))
}

/// Reads an IDX image file (magic 0x00000803) and label file (magic
/// 0x00000801), average-pooling each flattened image into `input_dim`
/// contiguous bins scaled to [0, 1].
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, input_dim: usize) -> Result<Dataset> {
    let mut img = BufReader::new(File::open(images)?);
    if read_be_u32(&mut img)? != 0x0000_0803 {
        return Err(Error::Format("bad IDX image magic".into()));
    }
    let count = read_be_u32(&mut img)? as usize;
    let pixels = read_be_u32(&mut img)? as usize * read_be_u32(&mut img)? as usize;
    let mut lab = BufReader::new(File::open(labels)?);
    if read_be_u32(&mut lab)? != 0x0000_0801 {
        return Err(Error::Format("bad IDX label magic".into()));
    }
    if read_be_u32(&mut lab)? as usize != count {
        return Err(Error::Format("IDX image and label counts differ".into()));
    }
    if input_dim == 0 || input_dim > pixels {
        return Err(Error::InvalidParameter(format!("cannot pool {pixels} pixels into {input_dim} features")));
    }
    let mut raw = vec![0u8; count * pixels];
    img.read_exact(&mut raw).map_err(|_| Error::Format("truncated IDX images".into()))?;
    let mut raw_labels = vec![0u8; count];
    lab.read_exact(&mut raw_labels).map_err(|_| Error::Format("truncated IDX labels".into()))?;
    let mut out = Dataset::new(input_dim);
    let mut row = vec![0.0f32; input_dim];
    for (image, &label) in raw.chunks_exact(pixels).zip(&raw_labels) {
        for (b, slot) in row.iter_mut().enumerate() {
            let (lo, hi) = (b * pixels / input_dim, (b + 1) * pixels / input_dim);
            let sum: u32 = image[lo..hi].iter().map(|&p| p as u32).sum();
            *slot = sum as f32 / ((hi - lo) as f32 * 255.0);
        }
        out.push(&row, label as usize);
    }
    Ok(out)
}

/// Shuffles under `rng` and moves a `test_fraction` share of the records
/// into a held-out set. Returns `(train, test)`.
pub fn split_holdout<R: Rng + ?Sized>(data: &Dataset, test_fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let cut = ((data.len() as f64) * test_fraction).round() as usize;
    let mut train = Dataset::new(data.dim);
    let mut test = Dataset::new(data.dim);
    for (pos, &i) in order.iter().enumerate() {
        let dst = if pos < cut { &mut test } else { &mut train };
        dst.push(data.row(i), data.labels[i]);
    }
    (train, test)
}
