//! Synthetic token-classification data with engineered label conflicts.
//!
//! Each task owns a set of Gaussian feature clusters and a cluster→label map.
//! The two tasks of a confusion pair draw from the *same* cluster centers but
//! label every shared cluster differently (the second map is the first one
//! composed with a derangement of the classes), so tokens with nearly equal
//! features pull the classifier in different directions. A small per-task
//! offset (`task_signal`) is the only feature that tells the paired tasks
//! apart.
//!
//! Binary format (`STGD`, little-endian):
//!
//! ```text
//! [u8; 4] "STGD" | u32 version | u32 N | u32 dim | u32 C | u32 T
//! N x ( f64 x dim | u32 label | u32 task )
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StgcError};
use crate::numkit::{Matrix, Rng};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"STGD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_tasks: usize,
    pub clusters_per_task: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub samples: usize,
    /// Task pairs sharing cluster centers with conflicting label maps.
    pub confusion_pairs: Vec<(usize, usize)>,
    pub noise_sigma: f64,
    /// Norm of the per-task feature offset.
    pub task_signal: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_tasks: 4,
            clusters_per_task: 8,
            input_dim: 16,
            num_classes: 8,
            samples: 8192,
            confusion_pairs: vec![(0, 1), (2, 3)],
            noise_sigma: 0.1,
            task_signal: 1.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StgcError::Config(m));
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.num_tasks == 0
            || self.clusters_per_task == 0
            || self.input_dim == 0
            || self.samples == 0
        {
            return bad("num_tasks, clusters_per_task, input_dim and samples must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(self.task_signal >= 0.0 && self.task_signal.is_finite()) {
            return bad(format!(
                "task_signal must be >= 0, got {}",
                self.task_signal
            ));
        }
        for &(a, b) in &self.confusion_pairs {
            if a >= self.num_tasks || b >= self.num_tasks || a == b {
                return bad(format!(
                    "confusion pair ({a}, {b}) must name two distinct tasks below {}",
                    self.num_tasks
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_tasks: usize,
    pub samples: Vec<TokenSample>,
}

/// Generator side information, useful for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLayout {
    /// Center group of each task (paired tasks share a group).
    pub center_group: Vec<usize>,
    /// `label_maps[task][cluster]`
    pub label_maps: Vec<Vec<usize>>,
    /// Cluster index of every generated sample, in dataset order.
    pub sample_clusters: Vec<usize>,
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

fn derangement(rng: &mut Rng, n: usize) -> Vec<usize> {
    loop {
        let p = rng.permutation(n);
        if p.iter().enumerate().all(|(i, &v)| i != v) {
            return p;
        }
    }
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    generate_with_layout(spec).map(|(d, _)| d)
}

pub fn generate_with_layout(spec: &SynthSpec) -> Result<(Dataset, SynthLayout)> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut center_rng = root.derive(1);
    let mut label_rng = root.derive(2);
    let mut noise_rng = root.derive(3);
    let mut order_rng = root.derive(4);

    let t = spec.num_tasks;
    let mut parent: Vec<usize> = (0..t).collect();
    for &(a, b) in &spec.confusion_pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[rb.max(ra)] = rb.min(ra);
        }
    }
    let center_group: Vec<usize> = (0..t).map(|i| find(&mut parent, i)).collect();

    let dim = spec.input_dim;
    let mut centers: Vec<Option<Vec<Vec<f64>>>> = vec![None; t];
    for &g in &center_group {
        if centers[g].is_none() {
            centers[g] = Some(
                (0..spec.clusters_per_task)
                    .map(|_| (0..dim).map(|_| center_rng.normal()).collect())
                    .collect(),
            );
        }
    }

    let c = spec.num_classes;
    let mut label_maps: Vec<Vec<usize>> = Vec::with_capacity(t);
    for task in 0..t {
        let partner = spec
            .confusion_pairs
            .iter()
            .find_map(|&(a, b)| match (a, b) {
                (a, b) if b == task && a < task => Some(a),
                (a, b) if a == task && b < task => Some(b),
                _ => None,
            });
        let map = match partner {
            Some(a) => {
                let shift = derangement(&mut label_rng, c);
                label_maps[a].iter().map(|&l| shift[l]).collect()
            }
            None => {
                let perm = label_rng.permutation(c);
                (0..spec.clusters_per_task).map(|k| perm[k % c]).collect()
            }
        };
        label_maps.push(map);
    }

    let task_offsets: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| center_rng.normal()).collect();
            let n = crate::numkit::norm(&v).max(1e-12);
            v.iter().map(|x| x * spec.task_signal / n).collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.samples);
    let mut clusters = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let task = i % t;
        let cluster = (i / t) % spec.clusters_per_task;
        let center = &centers[center_group[task]].as_ref().expect("centers")[cluster];
        let features = center
            .iter()
            .zip(&task_offsets[task])
            .map(|(m, o)| m + o + spec.noise_sigma * noise_rng.normal())
            .collect();
        samples.push(TokenSample {
            features,
            label: label_maps[task][cluster],
            task_id: task,
        });
        clusters.push(cluster);
    }
    let mut order: Vec<usize> = (0..spec.samples).collect();
    order_rng.shuffle(&mut order);
    let samples = order.iter().map(|&i| samples[i].clone()).collect();
    let sample_clusters = order.iter().map(|&i| clusters[i]).collect();

    Ok((
        Dataset {
            input_dim: dim,
            num_classes: c,
            num_tasks: t,
            samples,
        },
        SynthLayout {
            center_group,
            label_maps,
            sample_clusters,
        },
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.input_dim);
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.samples[i].features);
        }
        m
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Leading samples for training, trailing `val_fraction` for validation.
    pub fn split(&self, val_fraction: f64) -> (Dataset, Dataset) {
        let n_val = ((self.len() as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
        let cut = self.len() - n_val.min(self.len());
        let part = |s: &[TokenSample]| Dataset {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            num_tasks: self.num_tasks,
            samples: s.to_vec(),
        };
        (part(&self.samples[..cut]), part(&self.samples[cut..]))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != self.input_dim
                || s.label >= self.num_classes
                || s.task_id >= self.num_tasks
                || s.features.iter().any(|v| !v.is_finite())
            {
                return Err(StgcError::Precondition(format!("sample {i} is malformed")));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            DATASET_VERSION,
            self.len() as u32,
            self.input_dim as u32,
            self.num_classes as u32,
            self.num_tasks as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for s in &self.samples {
            for f in &s.features {
                w.write_all(&f.to_le_bytes())?;
            }
            w.write_all(&(s.label as u32).to_le_bytes())?;
            w.write_all(&(s.task_id as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R, origin: &Path) -> Result<Dataset> {
        let fmt = |reason: String| StgcError::Format {
            path: origin.to_path_buf(),
            reason,
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| StgcError::io(origin, e))?;
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(fmt("missing STGD header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(4) as u32;
        if version != DATASET_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let (n, dim, c, t) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let stride = dim * 8 + 8;
        if bytes.len() != 24 + n * stride {
            return Err(fmt(format!(
                "expected {} bytes for {n} samples of dim {dim}, found {}",
                24 + n * stride,
                bytes.len()
            )));
        }
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let base = 24 + i * stride;
            let features = (0..dim)
                .map(|j| {
                    let o = base + 8 * j;
                    f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
                })
                .collect();
            samples.push(TokenSample {
                features,
                label: u32_at(base + dim * 8),
                task_id: u32_at(base + dim * 8 + 4),
            });
        }
        let ds = Dataset {
            input_dim: dim,
            num_classes: c,
            num_tasks: t,
            samples,
        };
        ds.validate().map_err(|e| fmt(e.to_string()))?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| StgcError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w).map_err(|e| StgcError::io(path, e))?;
        w.flush().map_err(|e| StgcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| StgcError::io(path, e))?;
        Dataset::read(&mut std::io::BufReader::new(file), path)
    }

    /// Plain CSV: `f0,...,f{dim-1},label,task`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.input_dim).map(|j| format!("f{j}")).collect();
        writeln!(w, "{},label,task", header.join(","))?;
        for s in &self.samples {
            let f: Vec<String> = s.features.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{},{}", f.join(","), s.label, s.task_id)?;
        }
        Ok(())
    }
}
