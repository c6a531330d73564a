//! Datasets: synthetic generation, federated splitting, CSV import/export.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Concentration of the symmetric Dirichlet used for non-iid label skew.
pub const NONIID_CONCENTRATION: f64 = 0.3;
/// Per-part sampling ratio bounds for the overlapping split.
pub const OVERLAP_RATIO: (f64, f64) = (0.20, 0.40);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Class(Vec<usize>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(rows.iter().map(|&r| v[r]).collect()),
            Labels::Real(v) => Labels::Real(rows.iter().map(|&r| v[r]).collect()),
        }
    }

    /// Class label of row `i`; real targets map to class 0.
    fn class_of(&self, i: usize) -> usize {
        match self {
            Labels::Class(v) => v[i],
            Labels::Real(_) => 0,
        }
    }

    fn render(&self, i: usize) -> String {
        match self {
            Labels::Class(v) => v[i].to_string(),
            Labels::Real(v) => v[i].to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Class,
    Real,
}

/// A worker's private data: row-major feature matrix, labels, and its
/// quality-of-data score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    dims: usize,
    labels: Labels,
    qod: f64,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dims: usize, labels: Labels, qod: f64) -> Result<Self> {
        if dims == 0 {
            return Err(Error::param("dims", "must be positive"));
        }
        if !features.len().is_multiple_of(dims) {
            return Err(Error::param("features", "matrix is not rectangular"));
        }
        if features.len() / dims != labels.len() {
            return Err(Error::Shape {
                expected: features.len() / dims,
                actual: labels.len(),
            });
        }
        if !(qod > 0.0 && qod <= 1.0) {
            return Err(Error::param("qod", format!("{qod} not in (0, 1]")));
        }
        crate::params::check_finite(&features)?;
        Ok(Self {
            features,
            dims,
            labels,
            qod,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn qod(&self) -> f64 {
        self.qod
    }

    pub fn with_qod(mut self, qod: f64) -> Result<Self> {
        if !(qod > 0.0 && qod <= 1.0) {
            return Err(Error::param("qod", format!("{qod} not in (0, 1]")));
        }
        self.qod = qod;
        Ok(self)
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dims)
    }

    /// Copy of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.dims);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Dataset {
            features,
            dims: self.dims,
            labels: self.labels.select(rows),
            qod: self.qod,
        }
    }

    /// Row counts per class label (length = max label + 1).
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        for i in 0..self.len() {
            let c = self.labels.class_of(i);
            if counts.len() <= c {
                counts.resize(c + 1, 0);
            }
            counts[c] += 1;
        }
        counts
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dims).map(|d| format!("f{d}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels.render(i));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, kind: LabelKind, qod: f64) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let dims = header.len().saturating_sub(1);
        for (d, name) in header.iter().take(dims).enumerate() {
            if name != format!("f{d}") {
                return Err(Error::param("header", format!("column {d} is `{name}`, expected `f{d}`")));
            }
        }
        if header.get(dims) != Some("label") {
            return Err(Error::param("header", "last column must be `label`"));
        }
        let mut features = Vec::new();
        let mut classes = Vec::new();
        let mut reals = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            for field in rec.iter().take(dims) {
                features.push(parse_field::<f64>(field, line + 2)?);
            }
            let label = rec.get(dims).unwrap_or_default();
            match kind {
                LabelKind::Class => classes.push(parse_field::<usize>(label, line + 2)?),
                LabelKind::Real => reals.push(parse_field::<f64>(label, line + 2)?),
            }
        }
        let labels = match kind {
            LabelKind::Class => Labels::Class(classes),
            LabelKind::Real => Labels::Real(reals),
        };
        Dataset::new(features, dims, labels, qod)
    }
}

fn parse_field<T: std::str::FromStr>(field: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::param("csv", format!("line {line}: cannot parse `{field}`")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Gaussian class clusters with unit variance. Neighbouring class means
/// are `separation` apart; labels are balanced to within one sample.
pub fn make_synthetic_dataset(
    n: usize,
    dims: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if dims == 0 {
        return Err(Error::param("dims", "must be positive"));
    }
    if classes == 0 {
        return Err(Error::param("classes", "must be positive"));
    }
    if n < classes {
        return Err(Error::param("n", format!("{n} samples cannot cover {classes} classes")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::param("separation", "must be finite and nonnegative"));
    }
    let means = class_means(dims, classes, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dims);
    for &c in &labels {
        for m in means[c].iter().take(dims) {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(m + z);
        }
    }
    Dataset::new(features, dims, Labels::Class(labels), 1.0)
}

fn class_means(dims: usize, classes: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut means = vec![vec![0.0; dims]; classes];
    if classes == 1 {
        return means;
    }
    if classes == 2 || dims == 1 {
        // evenly spaced along the first axis, centred at the origin
        let offset = separation * (classes - 1) as f64 / 2.0;
        for (c, m) in means.iter_mut().enumerate() {
            m[0] = separation * c as f64 - offset;
        }
        return means;
    }
    // regular polygon in the first two axes with side length `separation`
    let step = std::f64::consts::TAU / classes as f64;
    let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
    for (c, m) in means.iter_mut().enumerate() {
        m[0] = radius * (step * c as f64).cos();
        m[1] = radius * (step * c as f64).sin();
    }
    means
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    OverlapIid,
    DisjointIid,
    DisjointNoniid,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap_iid" => Ok(SplitMode::OverlapIid),
            "disjoint_iid" => Ok(SplitMode::DisjointIid),
            "disjoint_noniid" => Ok(SplitMode::DisjointNoniid),
            other => Err(Error::param("split", format!("unknown split mode `{other}`"))),
        }
    }
}

/// Splits `data` into `n_parts` worker datasets.
pub fn split_dataset(
    data: &Dataset,
    n_parts: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if n_parts == 1 && mode != SplitMode::OverlapIid {
        return Ok(vec![data.clone()]);
    }
    Ok(split_indices(data, n_parts, mode, seed)?
        .iter()
        .map(|rows| data.select(rows))
        .collect())
}

/// Row indices of each part, as used by [`split_dataset`].
pub fn split_indices(
    data: &Dataset,
    n_parts: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_parts == 0 {
        return Err(Error::param("n_parts", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SplitMode::OverlapIid => overlap_iid(data.len(), n_parts, &mut rng),
        SplitMode::DisjointIid => disjoint_iid(data, n_parts, &mut rng),
        SplitMode::DisjointNoniid => disjoint_noniid(data, n_parts, &mut rng),
    }
}

fn overlap_iid(n: usize, n_parts: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let lo = (OVERLAP_RATIO.0 * n as f64).ceil() as usize;
    let hi = (OVERLAP_RATIO.1 * n as f64).floor() as usize;
    if lo == 0 || lo > hi {
        return Err(Error::param("n", format!("{n} samples too few for a 20-40% split")));
    }
    let mut parts = Vec::with_capacity(n_parts);
    for _ in 0..n_parts {
        let ratio = rng.random_range(OVERLAP_RATIO.0..=OVERLAP_RATIO.1);
        let size = ((ratio * n as f64).round() as usize).clamp(lo, hi);
        let mut rows = rand::seq::index::sample(rng, n, size).into_vec();
        rows.sort_unstable();
        parts.push(rows);
    }
    Ok(parts)
}

fn label_pools(data: &Dataset, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); data.label_counts().len()];
    for i in 0..data.len() {
        pools[data.labels.class_of(i)].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    pools
}

fn disjoint_iid(data: &Dataset, n_parts: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let pools = label_pools(data, rng);
    for (label, pool) in pools.iter().enumerate() {
        if !pool.is_empty() && pool.len() < n_parts {
            return Err(Error::Split {
                label,
                available: pool.len(),
                required: n_parts,
            });
        }
    }
    let mut parts = vec![Vec::new(); n_parts];
    // one cursor across all labels so leftovers spread evenly
    let mut cursor = 0;
    for pool in pools {
        for row in pool {
            parts[cursor % n_parts].push(row);
            cursor += 1;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

fn dirichlet(k: usize, concentration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

fn disjoint_noniid(
    data: &Dataset,
    n_parts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let n = data.len();
    if n < n_parts {
        return Err(Error::param("n_parts", format!("{n_parts} parts from {n} samples")));
    }
    let mut pools = label_pools(data, rng);
    let k = pools.len();
    let mut parts = Vec::with_capacity(n_parts);
    for j in 0..n_parts {
        let target = n / n_parts + usize::from(j < n % n_parts);
        if j + 1 == n_parts {
            let mut rest: Vec<usize> = pools.iter_mut().flat_map(std::mem::take).collect();
            rest.sort_unstable();
            parts.push(rest);
            break;
        }
        let props = dirichlet(k, NONIID_CONCENTRATION, rng);
        let mut take = largest_remainder(&props, target);
        for (c, t) in take.iter_mut().enumerate() {
            *t = (*t).min(pools[c].len());
        }
        // refill any shortfall from the labels with the most rows left
        let mut deficit = target - take.iter().sum::<usize>();
        while deficit > 0 {
            let c = (0..k)
                .max_by_key(|&c| (pools[c].len() - take[c], std::cmp::Reverse(c)))
                .expect("at least one label");
            take[c] += 1;
            deficit -= 1;
        }
        let mut rows = Vec::with_capacity(target);
        for (c, &t) in take.iter().enumerate() {
            let at = pools[c].len() - t;
            rows.extend(pools[c].drain(at..));
        }
        rows.sort_unstable();
        parts.push(rows);
    }
    Ok(parts)
}

/// Integer counts summing to `total`, proportional to `props`.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = total.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[c] += 1;
        left -= 1;
    }
    counts
}
