//! Synthetic Gaussian-blob classification data with graded distribution shift.
//!
//! Shifted variants mimic a corruption benchmark: four shift families, each
//! at intensities 1 through 5. Intensity 0 always means "no shift".

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledBatch;
use crate::rng;

pub const MAX_INTENSITY: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Translate,
    Rotate,
    GaussianNoise,
    FeatureScale,
}

impl ShiftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::Translate => "translate",
            ShiftKind::Rotate => "rotate",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::FeatureScale => "feature_scale",
        }
    }

    fn tag(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => ShiftKind::None,
            "translate" => ShiftKind::Translate,
            "rotate" => ShiftKind::Rotate,
            "gaussian_noise" => ShiftKind::GaussianNoise,
            "feature_scale" => ShiftKind::FeatureScale,
            other => return Err(Error::InvalidArgument(format!("unknown shift kind '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub shift_kind: ShiftKind,
    pub intensity: u8,
}

impl Provenance {
    pub fn unshifted(seed: u64) -> Self {
        Self {
            seed,
            shift_kind: ShiftKind::None,
            intensity: 0,
        }
    }
}

/// Row-major `n x d` inputs, labels in `0..num_classes`, and where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    provenance: Provenance,
}

impl SyntheticDataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::LengthMismatch {
                what: "inputs vs labels x dim",
                left: inputs.len(),
                right: labels.len() * dim,
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {y} >= {num_classes}")));
        }
        if (provenance.intensity == 0) != (provenance.shift_kind == ShiftKind::None)
            || provenance.intensity > MAX_INTENSITY
        {
            return Err(Error::InvalidArgument(format!(
                "inconsistent provenance: {:?} at intensity {}",
                provenance.shift_kind, provenance.intensity
            )));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.inputs.chunks_exact(self.dim)
    }

    pub fn to_batch(&self) -> LabeledBatch {
        LabeledBatch::new(self.inputs.clone(), self.labels.clone(), self.dim, self.num_classes)
            .expect("dataset invariants imply a valid batch")
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Self {
            inputs,
            labels,
            dim: self.dim,
            num_classes: self.num_classes,
            provenance: self.provenance,
        }
    }

    /// Concatenates rows of datasets sharing shape and provenance.
    pub fn concat(parts: &[&SyntheticDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut out = (*first).clone();
        for p in &parts[1..] {
            if p.dim != out.dim || p.num_classes != out.num_classes {
                return Err(Error::InvalidArgument("datasets differ in shape".into()));
            }
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}

/// Class means: `k` points on the sphere of radius `class_sep` in `d`
/// dimensions. 64 seeded random configurations are drawn and the one with
/// the largest minimum pairwise distance is kept, so classes never collide.
pub fn blob_means(k: usize, d: usize, class_sep: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::seeded(rng::derive_seed(seed, &[0xB10B]));
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for _ in 0..64 {
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                v.iter_mut().for_each(|x| *x *= class_sep / norm);
                v
            })
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let dist: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                min_dist = min_dist.min(dist);
            }
        }
        if best.as_ref().is_none_or(|(b, _)| min_dist > *b) {
            best = Some((min_dist, means));
        }
    }
    best.unwrap().1
}

/// Balanced isotropic Gaussian blobs; example `i` has label `i % k`.
pub fn make_blobs(
    k: usize,
    d: usize,
    n: usize,
    class_sep: f64,
    within_std: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if k < 2 || d < 2 || n < k {
        return Err(Error::InvalidArgument(format!(
            "make_blobs needs K >= 2, d >= 2, n >= K (got K={k}, d={d}, n={n})"
        )));
    }
    if !(class_sep >= 0.0 && within_std >= 0.0) {
        return Err(Error::InvalidArgument("class_sep and within_std must be >= 0".into()));
    }
    let means = blob_means(k, d, class_sep, seed);
    let mut rng = rng::seeded(rng::derive_seed(seed, &[0xDA7A]));
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % k;
        for &m in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(m + within_std * z);
        }
        labels.push(y);
    }
    SyntheticDataset::new(inputs, labels, d, k, Provenance::unshifted(seed))
}

/// Per-unit-intensity shift magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Translation length along `(1, ..., 1) / sqrt(d)`.
    pub translate_step: f64,
    /// Rotation of the first two coordinates, in degrees.
    pub rotate_degrees: f64,
    /// Standard deviation of the added noise.
    pub noise_step: f64,
    /// Relative coordinate scaling.
    pub scale_step: f64,
}

impl ShiftParams {
    pub fn for_within_std(within_std: f64) -> Self {
        Self {
            translate_step: 0.5 * within_std,
            rotate_degrees: 10.0,
            noise_step: 0.4 * within_std,
            scale_step: 0.15,
        }
    }
}

/// Applies one shift family at `intensity` in `1..=5`. Labels and row count
/// are untouched. Noise draws are seeded from the dataset's generator seed,
/// the shift kind and the intensity.
pub fn apply_shift(
    ds: &SyntheticDataset,
    kind: ShiftKind,
    intensity: u8,
    params: &ShiftParams,
) -> Result<SyntheticDataset> {
    if !(1..=MAX_INTENSITY).contains(&intensity) {
        return Err(Error::InvalidArgument(format!(
            "shift intensity must be in 1..=5, got {intensity}"
        )));
    }
    if kind == ShiftKind::None {
        return Err(Error::InvalidArgument("cannot apply shift kind 'none'".into()));
    }
    if ds.provenance.shift_kind != ShiftKind::None {
        return Err(Error::InvalidArgument("dataset is already shifted".into()));
    }
    let d = ds.dim;
    let level = intensity as f64;
    let mut inputs = ds.inputs.clone();
    match kind {
        ShiftKind::None => unreachable!(),
        ShiftKind::Translate => {
            let step = level * params.translate_step / (d as f64).sqrt();
            inputs.iter_mut().for_each(|v| *v += step);
        }
        ShiftKind::Rotate => {
            let theta = (level * params.rotate_degrees).to_radians();
            let (s, c) = theta.sin_cos();
            for row in inputs.chunks_exact_mut(d) {
                let (a, b) = (row[0], row[1]);
                row[0] = c * a - s * b;
                row[1] = s * a + c * b;
            }
        }
        ShiftKind::GaussianNoise => {
            let noise = Normal::new(0.0, level * params.noise_step)
                .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
            let seed = rng::derive_seed(ds.provenance.seed, &[kind.tag(), intensity as u64]);
            let mut rng = rng::seeded(seed);
            inputs.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        ShiftKind::FeatureScale => {
            let factor = 1.0 + level * params.scale_step;
            inputs.iter_mut().for_each(|v| *v *= factor);
        }
    }
    SyntheticDataset::new(
        inputs,
        ds.labels.clone(),
        d,
        ds.num_classes,
        Provenance {
            seed: ds.provenance.seed,
            shift_kind: kind,
            intensity,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub cal: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.cal, self.test];
        if f.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("split fractions must be positive".into()));
        }
        let total: f64 = f.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions sum to {total}")));
        }
        Ok(())
    }

    /// Partition sizes for `n` rows; the test partition takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<[usize; 4]> {
        self.validate()?;
        let round = |f: f64| (f * n as f64).round() as usize;
        let (a, b, c) = (round(self.train), round(self.val), round(self.cal));
        if a + b + c > n {
            return Err(Error::InvalidArgument(format!("cannot split {n} rows")));
        }
        Ok([a, b, c, n - a - b - c])
    }
}

/// Row indices of the four partitions (train, val, cal, test).
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<[Vec<usize>; 4]> {
    let sizes = spec.sizes(n)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(spec.seed));
    let mut out: [Vec<usize>; 4] = Default::default();
    let mut start = 0;
    for (part, size) in out.iter_mut().zip(sizes) {
        *part = perm[start..start + size].to_vec();
        start += size;
    }
    Ok(out)
}

/// Disjoint, exhaustive, seeded split into (train, val, cal, test).
pub fn split(ds: &SyntheticDataset, spec: &SplitSpec) -> Result<[SyntheticDataset; 4]> {
    let [a, b, c, d] = split_indices(ds.len(), spec)?;
    Ok([ds.subset(&a), ds.subset(&b), ds.subset(&c), ds.subset(&d)])
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(flatten)]
    provenance: Provenance,
    num_classes: usize,
    dim: usize,
    rows: usize,
}

/// JSON sidecar path next to a CSV file (`foo.csv` -> `foo.json`).
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `x0..x{d-1},label` rows plus the provenance sidecar. Values use
/// Rust's shortest round-trip float formatting, which is locale-independent
/// and recovers every `f64` exactly.
pub fn save_csv(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = String::with_capacity(ds.len() * (ds.dim + 1) * 20);
    for j in 0..ds.dim {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("label\n");
    for (row, y) in ds.rows().zip(&ds.labels) {
        for v in row {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{y}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        provenance: ds.provenance,
        num_classes: ds.num_classes,
        dim: ds.dim,
        rows: ds.len(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

/// Reads a dataset written by [`save_csv`]. Without a sidecar the provenance
/// defaults to unshifted seed 0 and `num_classes` to `max(label) + 1`.
pub fn load_csv(path: &Path) -> Result<SyntheticDataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().next_back() != Some("label") {
        return Err(parse_err(1, "missing trailing 'label' column".into()));
    }
    let dim = headers.len() - 1;
    for (j, h) in headers.iter().take(dim).enumerate() {
        if h != format!("x{j}") {
            return Err(parse_err(1, format!("expected column x{j}, found '{h}'")));
        }
    }
    if dim == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, got {}", dim + 1, record.len()),
            ));
        }
        for field in record.iter().take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number '{field}'")))?;
            inputs.push(v);
        }
        let y: usize = record[dim]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label '{}'", &record[dim])))?;
        labels.push(y);
    }

    let side = sidecar_path(path);
    let (provenance, num_classes) = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sc: Sidecar = serde_json::from_str(&text)?;
        if sc.dim != dim || sc.rows != labels.len() {
            return Err(parse_err(0, "sidecar does not match CSV shape".into()));
        }
        (sc.provenance, sc.num_classes)
    } else {
        let k = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        (Provenance::unshifted(0), k)
    };
    SyntheticDataset::new(inputs, labels, dim, num_classes, provenance)
}
