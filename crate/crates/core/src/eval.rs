//! Image metrics and paired-comparison study analysis.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use cascade_autograd::{Tape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::luminance;
use crate::losses::FeatureExtractor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM of two grayscale grids over every position where the
/// 11x11 Gaussian window fits, dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::Metric(format!(
            "ssim inputs of {} and {} values for a {height}x{width} grid",
            a.len(),
            b.len()
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Metric(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {height}x{width}")));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                let row = (y + dy) * width + x;
                for (dx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let (va, vb) = (a[row + dx], b[row + dx]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM on the luminance of two RGB frames.
pub fn ssim_rgb(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let (_, h, w) = a.dims3()?;
    if a.shape() != b.shape() {
        return Err(Error::Metric(format!("frames {:?} vs {:?}", a.shape(), b.shape())));
    }
    let la: Vec<f64> = luminance(a)?.into_iter().map(f64::from).collect();
    let lb: Vec<f64> = luminance(b)?.into_iter().map(f64::from).collect();
    ssim(&la, &lb, h, w)
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Metric(format!("{what} is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = 1.0 + m.amax();
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(Error::Metric(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Symmetric square root with slightly negative eigenvalues clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let tol = 1e-8 * (1.0 + m.amax());
    if eig.eigenvalues.iter().any(|&l| l < -tol) {
        return Err(Error::Metric(format!("{what} is not positive semi-definite")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the cross term
/// computed as the trace of `(S1^(1/2) S2 S1^(1/2))^(1/2)`.
pub fn frechet_distance(mu1: &DVector<f64>, sigma1: &DMatrix<f64>, mu2: &DVector<f64>, sigma2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::Metric(format!(
            "frechet inputs disagree: means {d}/{}, covariances {:?}/{:?}",
            mu2.len(),
            sigma1.shape(),
            sigma2.shape()
        )));
    }
    check_symmetric(sigma1, "first covariance")?;
    check_symmetric(sigma2, "second covariance")?;
    let r1 = sqrt_psd(sigma1, "first covariance")?;
    sqrt_psd(sigma2, "second covariance")?;
    let inner = &r1 * sigma2 * &r1;
    let cross = sqrt_psd(&inner, "covariance product")?.trace();
    let value = (mu1 - mu2).norm_squared() + sigma1.trace() + sigma2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Sample mean and unbiased covariance of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        let d = samples.first().map(Vec::len).unwrap_or(0);
        if n < 2 || d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Metric(format!("need at least two equal-length embeddings, got {n}")));
        }
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let covariance = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, covariance })
    }

    pub fn frechet(&self, other: &GaussianStats) -> Result<f64> {
        frechet_distance(&self.mean, &self.covariance, &other.mean, &other.covariance)
    }
}

fn feature_grids(image: &Tensor<f32>, phi: &dyn FeatureExtractor<f32>) -> Result<Vec<Tensor<f32>>> {
    let tape = Tape::new();
    let feats = phi.features(&tape, tape.constant(image.clone()))?;
    Ok(feats.into_iter().map(|v| v.value().as_ref().clone()).collect())
}

/// Sum over extractor layers of the per-pixel squared distance between
/// channel-normalized features, averaged over pixels.
pub fn perceptual_distance(a: &Tensor<f32>, b: &Tensor<f32>, phi: &dyn FeatureExtractor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Metric(format!("frames {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (fa, fb) = (feature_grids(a, phi)?, feature_grids(b, phi)?);
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (c, h, w) = x.dims3()?;
        let plane = h * w;
        let (xd, yd) = (x.data(), y.data());
        let mut layer = 0.0;
        for p in 0..plane {
            let norm = |d: &[f32]| (0..c).map(|k| (d[k * plane + p] as f64).powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (nx, ny) = (norm(xd), norm(yd));
            layer += (0..c)
                .map(|k| (xd[k * plane + p] as f64 / nx - yd[k * plane + p] as f64 / ny).powi(2))
                .sum::<f64>();
        }
        total += layer / plane as f64;
    }
    Ok(total)
}

/// Globally pooled extractor features, concatenated over layers.
pub fn embedding(image: &Tensor<f32>, phi: &dyn FeatureExtractor<f32>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for f in feature_grids(image, phi)? {
        let (c, h, w) = f.dims3()?;
        let plane = (h * w) as f64;
        out.extend((0..c).map(|k| f.channel(k).iter().map(|&v| v as f64).sum::<f64>() / plane));
    }
    Ok(out)
}

/// Fréchet distance between the embedding distributions of two image sets.
pub fn feature_frechet_distance(a: &[Tensor<f32>], b: &[Tensor<f32>], phi: &dyn FeatureExtractor<f32>) -> Result<f64> {
    let ea: Vec<Vec<f64>> = a.iter().map(|x| embedding(x, phi)).collect::<Result<_>>()?;
    let eb: Vec<Vec<f64>> = b.iter().map(|x| embedding(x, phi)).collect::<Result<_>>()?;
    GaussianStats::from_samples(&ea)?.frechet(&GaussianStats::from_samples(&eb)?)
}

/// Mean per-frame metrics of a rendered sequence against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Absent for sequences shorter than two frames.
    pub frechet: Option<f64>,
}

pub fn evaluate_sequence(predicted: &[Tensor<f32>], truth: &[Tensor<f32>], phi: &dyn FeatureExtractor<f32>) -> Result<SequenceMetrics> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Metric(format!("{} predicted frames vs {} reference frames", predicted.len(), truth.len())));
    }
    let n = predicted.len() as f64;
    let (mut l1, mut s, mut p) = (0.0, 0.0, 0.0);
    for (a, b) in predicted.iter().zip(truth) {
        if a.shape() != b.shape() {
            return Err(Error::Metric(format!("frames {:?} vs {:?}", a.shape(), b.shape())));
        }
        l1 += a.mean_abs_diff(b) as f64 / n;
        s += ssim_rgb(a, b)? / n;
        p += perceptual_distance(a, b, phi)? / n;
    }
    let frechet = (predicted.len() >= 2).then(|| feature_frechet_distance(predicted, truth, phi)).transpose()?;
    Ok(SequenceMetrics { l1, ssim: s, perceptual: p, frechet })
}

/// Fixed-width text table of named metric rows.
pub fn format_metrics_table(rows: &[(String, SequenceMetrics)]) -> String {
    let mut out = format!("{:<10} {:>9} {:>9} {:>11} {:>10}\n", "variant", "L1", "SSIM", "perceptual", "frechet");
    for (name, m) in rows {
        let fr = m.frechet.map(|f| format!("{f:.5}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{name:<10} {:>9.5} {:>9.5} {:>11.5} {fr:>10}", m.l1, m.ssim, m.perceptual);
    }
    out
}

/// Critical values `W(t, alpha)` of the range of `t` standard normal
/// variables, keyed by `(t, alpha)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalValues {
    entries: Vec<(usize, f64, f64)>,
}

impl Default for CriticalValues {
    fn default() -> Self {
        Self { entries: vec![(3, 0.01, 4.125), (4, 0.01, 4.405)] }
    }
}

impl CriticalValues {
    pub fn insert(&mut self, methods: usize, alpha: f64, w: f64) {
        self.entries.retain(|&(t, a, _)| !(t == methods && (a - alpha).abs() < 1e-12));
        self.entries.push((methods, alpha, w));
    }

    pub fn get(&self, methods: usize, alpha: f64) -> Option<f64> {
        self.entries.iter().find(|&&(t, a, _)| t == methods && (a - alpha).abs() < 1e-12).map(|e| e.2)
    }
}

/// A linked paired-comparison study: every participant judges every pair
/// of methods `comparisons_per_pair` times, each judgement one vote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub methods: Vec<String>,
    pub participants: usize,
    pub alpha: f64,
    /// Critical value for `methods.len()` methods at `alpha`.
    pub critical_value: f64,
    pub comparisons_per_pair: usize,
    pub votes: BTreeMap<String, u64>,
}

impl StudyDesign {
    pub fn num_methods(&self) -> usize {
        self.methods.len()
    }

    /// Largest total number of votes the design can produce.
    pub fn vote_budget(&self) -> u64 {
        let t = self.num_methods() as u64;
        self.participants as u64 * t * t.saturating_sub(1) / 2 * self.comparisons_per_pair as u64
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.num_methods();
        if t < 2 || self.participants == 0 {
            return Err(Error::Study(format!("need at least 2 methods and 1 participant, got {t} and {}", self.participants)));
        }
        if self.comparisons_per_pair == 0 {
            return Err(Error::Study("comparisons_per_pair must be positive".into()));
        }
        if !(self.critical_value.is_finite() && self.critical_value >= 0.0) {
            return Err(Error::Study(format!("critical value {} is not a finite non-negative number", self.critical_value)));
        }
        let unique: BTreeSet<&String> = self.methods.iter().collect();
        if unique.len() != t {
            return Err(Error::Study("duplicate method names".into()));
        }
        if let Some(m) = self.votes.keys().find(|m| !unique.contains(m)) {
            return Err(Error::Study(format!("votes for undeclared method '{m}'")));
        }
        let total: u64 = self.votes.values().sum();
        if total > self.vote_budget() {
            return Err(Error::Study(format!("{total} votes exceed the design budget of {}", self.vote_budget())));
        }
        Ok(())
    }
}

/// Smallest vote difference that is significant: `(W sqrt(m t) + 0.5) / 2`.
pub fn significance_threshold(design: &StudyDesign) -> Result<f64> {
    let mt = design.participants as f64 * design.num_methods() as f64;
    if mt <= 0.0 {
        return Err(Error::Study("participants times methods must be positive".into()));
    }
    Ok((design.critical_value * mt.sqrt() + 0.5) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub method: String,
    pub votes: u64,
    /// 1-based group; methods share a group until a significant gap.
    pub group: usize,
    /// Vote gap to the next method down, if any.
    pub gap_to_next: Option<u64>,
    pub significant_to_next: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub threshold: f64,
    pub entries: Vec<RankEntry>,
    pub groups: usize,
}

/// Sorts methods by descending votes (name breaks ties) and flags adjacent
/// differences of at least the significance threshold.
pub fn rank_methods(design: &StudyDesign) -> Result<Ranking> {
    design.validate()?;
    let threshold = significance_threshold(design)?;
    let mut sorted = Vec::with_capacity(design.num_methods());
    for m in &design.methods {
        let v = *design.votes.get(m).ok_or_else(|| Error::Study(format!("no votes recorded for '{m}'")))?;
        sorted.push((m.clone(), v));
    }
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut entries = Vec::with_capacity(sorted.len());
    let mut group = 1;
    for (i, (method, votes)) in sorted.iter().enumerate() {
        let gap = sorted.get(i + 1).map(|next| votes - next.1);
        let significant = gap.map(|g| g as f64 >= threshold);
        entries.push(RankEntry { method: method.clone(), votes: *votes, group, gap_to_next: gap, significant_to_next: significant });
        if significant == Some(true) {
            group += 1;
        }
    }
    Ok(Ranking { threshold, entries, groups: group })
}

/// Per-method vote totals and the number of distinct participants from a
/// `method,participant,vote` CSV.
pub fn load_votes(path: impl AsRef<Path>) -> Result<(BTreeMap<String, u64>, usize)> {
    #[derive(Deserialize)]
    struct Row {
        method: String,
        participant: String,
        vote: u64,
    }
    let path = path.as_ref();
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Study(format!("{}: {e}", path.display())))?;
    let mut totals = BTreeMap::new();
    let mut people = BTreeSet::new();
    for (i, row) in rd.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Study(format!("{} row {}: {e}", path.display(), i + 1)))?;
        *totals.entry(row.method).or_insert(0) += row.vote;
        people.insert(row.participant);
    }
    Ok((totals, people.len()))
}

pub fn ranking_csv(ranking: &Ranking) -> String {
    let mut out = String::from("rank_group,method,votes,gap_to_next,significant\n");
    for e in &ranking.entries {
        let gap = e.gap_to_next.map(|g| g.to_string()).unwrap_or_default();
        let sig = e.significant_to_next.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{gap},{sig}", e.group, e.method, e.votes);
    }
    out
}

pub fn ranking_table(ranking: &Ranking) -> String {
    let mut out = format!("threshold R' = {:.5}, {} distinguishable groups\n", ranking.threshold, ranking.groups);
    let _ = writeln!(out, "{:<6} {:<16} {:>7} {:>6}  significant", "group", "method", "votes", "gap");
    for e in &ranking.entries {
        let gap = e.gap_to_next.map(|g| g.to_string()).unwrap_or_else(|| "-".into());
        let sig = match (e.significant_to_next, e.gap_to_next) {
            (Some(true), _) => "yes",
            (Some(false), Some(0)) => "no (tie)",
            (Some(false), _) => "no",
            (None, _) => "",
        };
        let _ = writeln!(out, "{:<6} {:<16} {:>7} {gap:>6}  {sig}", e.group, e.method, e.votes);
    }
    out
}
