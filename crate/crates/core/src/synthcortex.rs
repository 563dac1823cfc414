//! Synthetic cortical-like surface datasets.
//!
//! Every channel is a sum of smooth spherical bumps whose amplitudes vary
//! smoothly with a scalar phenotype, plus white vertex noise. The bump layout
//! is fixed by the dataset seed and shared across subjects, so there is
//! common structure for a reconstruction task to learn, and the phenotype is
//! recoverable from the spatial pattern even after per-subject normalisation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter, FormatError};
use crate::error::{Error, Result};
use crate::geodesy::{icosphere, PatchTable};
use crate::sit::patchify;
use crate::tensor::{Scalar, Tensor};

const DATASET_MAGIC: [u8; 4] = *b"SSRF";
const DATASET_VERSION: u32 = 1;
pub const CLIP: f64 = 3.0;
const DEGENERATE_STD: f64 = 1e-8;
pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSubject {
    pub id: String,
    pub phenotype: f64,
    pub split: Split,
    /// `|V| × C`, row-major.
    pub map: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDataset {
    pub data_level: u32,
    pub patch_level: u32,
    pub channels: usize,
    pub subjects: Vec<SurfaceSubject>,
    pub provenance: serde_json::Value,
}

impl SurfaceDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SurfaceSubject> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn num_vertices(&self) -> usize {
        10 * 4usize.pow(self.data_level) + 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct GeneratorConfig {
    pub subjects: usize,
    pub data_level: u32,
    pub patch_level: u32,
    pub channels: usize,
    pub seed: u64,
    /// Ratio of the signal's spatial standard deviation to the noise's.
    /// `f64::INFINITY` disables noise.
    pub snr: f64,
    /// Number of spherical bumps per channel.
    pub components: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            subjects: 200,
            data_level: 4,
            patch_level: 1,
            channels: 4,
            seed: 0,
            snr: 5.0,
            components: 12,
        }
    }
}

struct Bump {
    centre: [f64; 3],
    concentration: f64,
}

struct ChannelModel {
    /// Amplitude of bump k at phenotype y: `a + b y + c y^2`.
    coeffs: Vec<[f64; 3]>,
    mean_slope: f64,
    noise_std: f64,
}

/// Fixed bump layout and per-channel phenotype response for one seed.
pub struct Generator {
    cfg: GeneratorConfig,
    basis: Vec<Vec<f64>>,
    channels: Vec<ChannelModel>,
    rng: ChaCha8Rng,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        if cfg.subjects < 10 {
            return Err(Error::Config(format!("need at least 10 subjects, got {}", cfg.subjects)));
        }
        if cfg.data_level < 2 {
            return Err(Error::Config(format!("dataLevel must be at least 2, got {}", cfg.data_level)));
        }
        if cfg.patch_level >= cfg.data_level {
            return Err(Error::Config("patchLevel must be below dataLevel".into()));
        }
        if cfg.channels == 0 || cfg.components == 0 {
            return Err(Error::Config("channels and components must be positive".into()));
        }
        if cfg.snr.is_nan() || cfg.snr <= 0.0 {
            return Err(Error::Config(format!("snr must be positive, got {}", cfg.snr)));
        }

        let mesh = icosphere(cfg.data_level);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bumps: Vec<Bump> = (0..cfg.components)
            .map(|_| Bump {
                centre: random_unit(&mut rng),
                concentration: rng.gen_range(2.0..8.0),
            })
            .collect();
        let basis: Vec<Vec<f64>> = bumps
            .iter()
            .map(|b| {
                mesh.vertices
                    .iter()
                    .map(|v| (b.concentration * (dot(*v, b.centre) - 1.0)).exp())
                    .collect()
            })
            .collect();

        let mut channels: Vec<ChannelModel> = (0..cfg.channels)
            .map(|_| ChannelModel {
                coeffs: (0..cfg.components)
                    .map(|_| [normal(&mut rng), 1.5 * normal(&mut rng), normal(&mut rng)])
                    .collect(),
                mean_slope: normal(&mut rng),
                noise_std: 0.0,
            })
            .collect();
        let nv = mesh.vertices.len();
        for ch in &mut channels {
            let reference = clean_channel(ch, &basis, 0.5, nv);
            let (_, std) = mean_std(&reference);
            ch.noise_std = if cfg.snr.is_infinite() { 0.0 } else { std / cfg.snr };
        }
        Ok(Self {
            cfg: cfg.clone(),
            basis,
            channels,
            rng,
        })
    }

    fn num_vertices(&self) -> usize {
        self.basis[0].len()
    }

    /// Noise-free `|V| × C` map at phenotype `y`.
    pub fn clean_map(&self, y: f64) -> Tensor<f32> {
        let (nv, c) = (self.num_vertices(), self.cfg.channels);
        let mut data = vec![0f32; nv * c];
        for (ci, ch) in self.channels.iter().enumerate() {
            for (v, value) in clean_channel(ch, &self.basis, y, nv).into_iter().enumerate() {
                data[v * c + ci] = value as f32;
            }
        }
        Tensor::new(&[nv, c], data).expect("consistent shape")
    }

    pub fn generate(mut self) -> Result<SurfaceDataset> {
        let (nv, c) = (self.num_vertices(), self.cfg.channels);
        let mut subjects = Vec::with_capacity(self.cfg.subjects);
        for s in 0..self.cfg.subjects {
            let y: f64 = self.rng.gen_range(0.0..1.0);
            let mut data = vec![0f32; nv * c];
            for (ci, ch) in self.channels.iter().enumerate() {
                let clean = clean_channel(ch, &self.basis, y, nv);
                for (v, value) in clean.into_iter().enumerate() {
                    let noise = if ch.noise_std > 0.0 {
                        ch.noise_std * normal(&mut self.rng)
                    } else {
                        0.0
                    };
                    data[v * c + ci] = (value + noise) as f32;
                }
            }
            subjects.push(SurfaceSubject {
                id: format!("sub-{s:04}"),
                phenotype: y,
                split: Split::Train,
                map: Tensor::new(&[nv, c], data)?,
            });
        }
        Ok(SurfaceDataset {
            data_level: self.cfg.data_level,
            patch_level: self.cfg.patch_level,
            channels: c,
            subjects,
            provenance: serde_json::json!({ "generator": self.cfg }),
        })
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<SurfaceDataset> {
    Generator::new(cfg)?.generate()
}

fn clean_channel(ch: &ChannelModel, basis: &[Vec<f64>], y: f64, nv: usize) -> Vec<f64> {
    let mut out = vec![ch.mean_slope * y; nv];
    for (coef, b) in ch.coeffs.iter().zip(basis) {
        let amp = coef[0] + coef[1] * y + coef[2] * y * y;
        for (o, bv) in out.iter_mut().zip(b) {
            *o += amp * bv;
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [normal(rng), normal(rng), normal(rng)];
        let n = dot(v, v).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-channel z-score with clipping to `[-3, 3]`. Channels whose standard
/// deviation is below `1e-8` become all zeros.
pub fn normalize(subject: &SurfaceSubject) -> SurfaceSubject {
    let mut out = subject.clone();
    let c = subject.map.shape()[1];
    let nv = subject.map.shape()[0];
    for ch in 0..c {
        let values: Vec<f64> = (0..nv).map(|v| subject.map.data()[v * c + ch] as f64).collect();
        let (mean, std) = mean_std(&values);
        for (v, x) in values.iter().enumerate() {
            let z = if std < DEGENERATE_STD {
                0.0
            } else {
                ((x - mean) / std).clamp(-CLIP, CLIP)
            };
            out.map.data_mut()[v * c + ch] = z as f32;
        }
    }
    out
}

/// Normalised subject as `N × (P·C)` patch tokens.
pub fn subject_tokens<T: Scalar>(subject: &SurfaceSubject, table: &PatchTable) -> Result<Tensor<T>> {
    patchify(&normalize(subject).map.cast::<T>(), table)
}

/// Equal-width bin index of every value over `[min, max]`.
pub fn phenotype_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    values
        .iter()
        .map(|v| {
            if width <= 0.0 {
                0
            } else {
                (((v - lo) / width) as usize).min(bins - 1)
            }
        })
        .collect()
}

/// Round half away from zero.
pub fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Integer split sizes summing to `n`: floors plus largest remainders.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[*i] += 1;
        missing -= 1;
    }
    counts
}

/// Assigns train/val/test labels stratified by phenotype bin.
///
/// Subjects are ordered bin by bin (shuffled within each bin) and labels are
/// dealt along that order so that every split tracks its target share at
/// each prefix; each bin therefore receives each split in proportion.
pub fn split(dataset: &SurfaceDataset, ratios: [f64; 3], bins: usize, seed: u64) -> Result<SurfaceDataset> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let n = dataset.subjects.len();
    let phen: Vec<f64> = dataset.subjects.iter().map(|s| s.phenotype).collect();
    let bin_of = phenotype_bins(&phen, bins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(n);
    for b in 0..bins {
        let mut members: Vec<usize> = (0..n).filter(|&i| bin_of[i] == b).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let targets = apportion(n, &ratios);
    let mut assigned = [0usize; 3];
    let mut out = dataset.clone();
    for (j, &i) in order.iter().enumerate() {
        let progress = (j + 1) as f64 / n as f64;
        let pick = (0..3)
            .filter(|&s| assigned[s] < targets[s])
            .max_by(|&a, &b| {
                let da = targets[a] as f64 * progress - assigned[a] as f64;
                let db = targets[b] as f64 * progress - assigned[b] as f64;
                da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .expect("targets sum to n");
        assigned[pick] += 1;
        out.subjects[i].split = Split::ALL[pick];
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DatasetHeader {
    data_level: u32,
    patch_level: u32,
    channels: usize,
    subject_count: usize,
    provenance: serde_json::Value,
}

pub fn encode_dataset(ds: &SurfaceDataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        data_level: ds.data_level,
        patch_level: ds.patch_level,
        channels: ds.channels,
        subject_count: ds.subjects.len(),
        provenance: ds.provenance.clone(),
    };
    let nv = ds.num_vertices();
    let mut w = ByteWriter::new();
    w.bytes(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.blob(&serde_json::to_vec(&header)?);
    for s in &ds.subjects {
        if s.map.shape() != [nv, ds.channels] {
            return Err(Error::Shape(format!("subject {} map {:?}", s.id, s.map.shape())));
        }
        w.blob(s.id.as_bytes());
        w.f64(s.phenotype);
        w.u8(s.split.code());
        s.map.data().iter().for_each(|v| w.f32(*v));
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SurfaceDataset, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let header: DatasetHeader = serde_json::from_slice(r.blob()?)?;
    let nv = 10 * 4usize.pow(header.data_level) + 2;
    let mut subjects = Vec::with_capacity(header.subject_count);
    for i in 0..header.subject_count {
        let subject = (|| -> Result<SurfaceSubject, FormatError> {
            let id = String::from_utf8(r.blob()?.to_vec())
                .map_err(|e| FormatError::Inconsistent(format!("subject id: {e}")))?;
            let phenotype = r.f64()?;
            let code = r.u8()?;
            let split = Split::from_code(code)
                .ok_or_else(|| FormatError::Inconsistent(format!("split code {code}")))?;
            let data = r.f32_vec(nv * header.channels)?;
            let map = Tensor::new(&[nv, header.channels], data)
                .map_err(|e| FormatError::Inconsistent(e.to_string()))?;
            Ok(SurfaceSubject {
                id,
                phenotype,
                split,
                map,
            })
        })()
        .map_err(|e| match e {
            FormatError::Truncated { .. } => FormatError::Inconsistent(format!(
                "header declares {} subjects but payload ends inside subject {i}",
                header.subject_count
            )),
            other => other,
        })?;
        subjects.push(subject);
    }
    if r.remaining() != 0 {
        return Err(FormatError::Inconsistent(format!(
            "{} bytes after the {} declared subjects",
            r.remaining(),
            header.subject_count
        )));
    }
    Ok(SurfaceDataset {
        data_level: header.data_level,
        patch_level: header.patch_level,
        channels: header.channels,
        subjects,
        provenance: header.provenance,
    })
}

pub fn write_dataset(ds: &SurfaceDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<SurfaceDataset> {
    Ok(decode_dataset(&fs::read(path)?)?)
}
