//! Verification metrics and Error-versus-Discard evaluation.
//!
//! The threshold τ is fixed once on the full comparison set (match iff
//! similarity ≥ τ). For each discard fraction d the ⌊d·total⌋ lowest-quality
//! comparisons are removed, ties broken by input index with genuine pairs
//! indexed before impostors, and FNMR is recomputed on what is left.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CURVE_HEADER: [&str; 5] = [
    "discard",
    "fnmr",
    "retained_genuine",
    "retained_impostor",
    "flagged",
];
pub const PAUC_LIMIT: f64 = 0.3;
pub const DEFAULT_DMAX: f64 = 0.98;

/// Slack added before flooring `d·total`, so that grid fractions such as
/// 0.29 discard 29 of 100 despite binary rounding.
const DISCARD_SLACK: f64 = 1e-9;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for n in [na, nb] {
        if n == 0.0 {
            return Err(Error::Degenerate {
                op: "cosine_similarity",
                norm: n,
                eps: 0.0,
            });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Decision threshold at a target false match rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub achieved_fmr: f64,
    pub target_fmr: f64,
    /// The target is below 1/|impostors|: τ sits just above the highest
    /// impostor similarity and the achieved FMR is 0.
    pub unsaturated: bool,
}

/// Smallest observed impostor similarity τ with `#(s ≥ τ)/n ≤ target`.
pub fn fmr_threshold(impostors: &[f64], target_fmr: f64) -> Result<Threshold> {
    if impostors.is_empty() {
        return Err(Error::contract("fmr_threshold needs impostor comparisons"));
    }
    if !(target_fmr > 0.0 && target_fmr < 1.0) {
        return Err(Error::contract(format!(
            "target FMR {target_fmr} outside (0, 1)"
        )));
    }
    if impostors.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("impostor similarities must be finite"));
    }
    let mut sorted = impostors.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        let fmr = j as f64 / n;
        if fmr > target_fmr {
            break;
        }
        best = Some((v, fmr));
        i = j;
    }
    Ok(match best {
        Some((tau, fmr)) => Threshold {
            tau,
            achieved_fmr: fmr,
            target_fmr,
            unsaturated: false,
        },
        None => Threshold {
            tau: sorted[0].next_up(),
            achieved_fmr: 0.0,
            target_fmr,
            unsaturated: true,
        },
    })
}

/// Fraction of genuine similarities below τ.
pub fn fnmr_at(genuine: &[f64], tau: f64) -> Result<f64> {
    if genuine.is_empty() {
        return Err(Error::contract("fnmr_at needs genuine comparisons"));
    }
    Ok(genuine.iter().filter(|&&s| s < tau).count() as f64 / genuine.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairQuality {
    #[default]
    Min,
    Mean,
}

impl PairQuality {
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            PairQuality::Min => a.min(b),
            PairQuality::Mean => 0.5 * (a + b),
        }
    }
}

impl fmt::Display for PairQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairQuality::Min => "min",
            PairQuality::Mean => "mean",
        })
    }
}

impl FromStr for PairQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(PairQuality::Min),
            "mean" => Ok(PairQuality::Mean),
            _ => Err(Error::config(format!(
                "pair quality must be min or mean, got {s:?}"
            ))),
        }
    }
}

pub fn pair_quality(a: f64, b: f64) -> f64 {
    PairQuality::Min.combine(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub similarity: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonSet {
    pub genuine: Vec<Comparison>,
    pub impostor: Vec<Comparison>,
}

impl ComparisonSet {
    pub fn genuine_similarities(&self) -> Vec<f64> {
        self.genuine.iter().map(|c| c.similarity).collect()
    }

    pub fn impostor_similarities(&self) -> Vec<f64> {
        self.impostor.iter().map(|c| c.similarity).collect()
    }

    pub fn len(&self) -> usize {
        self.genuine.len() + self.impostor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same comparisons with every quality passed through `f`.
    pub fn map_quality(&self, f: impl Fn(f64) -> f64) -> Self {
        let m = |v: &Vec<Comparison>| {
            v.iter()
                .map(|c| Comparison {
                    similarity: c.similarity,
                    quality: f(c.quality),
                })
                .collect()
        };
        ComparisonSet {
            genuine: m(&self.genuine),
            impostor: m(&self.impostor),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdcCurve {
    pub tau: f64,
    pub grid: Vec<f64>,
    pub fnmr: Vec<f64>,
    pub retained_genuine: Vec<usize>,
    pub retained_impostor: Vec<usize>,
    /// No genuine pair left: FNMR carried forward from the previous point.
    pub flagged: Vec<bool>,
}

/// `0, 0.01, …, d_max` (inclusive up to rounding).
pub fn default_grid(d_max: f64) -> Vec<f64> {
    let steps = (d_max * 100.0 + 1e-9).floor() as usize;
    (0..=steps).map(|i| i as f64 / 100.0).collect()
}

/// Number of comparisons removed at discard fraction `d`.
pub fn discard_count(d: f64, total: usize) -> usize {
    ((d * total as f64 + DISCARD_SLACK).floor() as usize).min(total)
}

pub fn edc_compute(set: &ComparisonSet, tau: f64, grid: &[f64]) -> Result<EdcCurve> {
    if set.genuine.is_empty() || set.impostor.is_empty() {
        return Err(Error::contract(
            "EDC needs genuine and impostor comparisons",
        ));
    }
    if !tau.is_finite() && tau != f64::INFINITY {
        return Err(Error::contract("threshold must be finite"));
    }
    if grid.is_empty() || grid.iter().any(|d| !(0.0..1.0).contains(d)) {
        return Err(Error::contract(
            "discard grid must be nonempty and inside [0, 1)",
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("discard grid must be strictly ascending"));
    }
    if set
        .genuine
        .iter()
        .chain(&set.impostor)
        .any(|c| !c.quality.is_finite())
    {
        return Err(Error::contract("qualities must be finite"));
    }
    let g = set.genuine.len();
    let total = set.len();
    // (quality, index) ascending; genuine pairs take indices 0..g.
    let mut order: Vec<(f64, usize)> = set
        .genuine
        .iter()
        .chain(&set.impostor)
        .enumerate()
        .map(|(i, c)| (c.quality, i))
        .collect();
    // partial_cmp, not total_cmp: -0.0 and 0.0 are the same quality.
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite qualities")
            .then(a.1.cmp(&b.1))
    });

    let global_errors = set.genuine.iter().filter(|c| c.similarity < tau).count();
    let mut curve = EdcCurve {
        tau,
        grid: grid.to_vec(),
        fnmr: Vec::with_capacity(grid.len()),
        retained_genuine: Vec::with_capacity(grid.len()),
        retained_impostor: Vec::with_capacity(grid.len()),
        flagged: Vec::with_capacity(grid.len()),
    };
    let (mut removed, mut removed_gen, mut removed_err) = (0, 0, 0);
    let mut last = global_errors as f64 / g as f64;
    for &d in grid {
        let k = discard_count(d, total);
        while removed < k {
            let idx = order[removed].1;
            if idx < g {
                removed_gen += 1;
                if set.genuine[idx].similarity < tau {
                    removed_err += 1;
                }
            }
            removed += 1;
        }
        let kept_gen = g - removed_gen;
        let kept_imp = total - k - kept_gen;
        let flagged = kept_gen == 0;
        if !flagged {
            last = (global_errors - removed_err) as f64 / kept_gen as f64;
        }
        curve.fnmr.push(last);
        curve.retained_genuine.push(kept_gen);
        curve.retained_impostor.push(kept_imp);
        curve.flagged.push(flagged);
    }
    Ok(curve)
}

/// Trapezoidal area under FNMR(d) over [0, d_max], interpolating linearly at
/// d_max when it falls between grid points.
pub fn auc(curve: &EdcCurve, d_max: f64) -> Result<f64> {
    let (x, y) = (&curve.grid, &curve.fnmr);
    if x.first() != Some(&0.0) || *x.last().expect("nonempty") < d_max || !(d_max >= 0.0) {
        return Err(Error::contract(format!(
            "discard grid does not cover [0, {d_max}]"
        )));
    }
    let mut area = 0.0;
    for i in 1..x.len() {
        if x[i - 1] >= d_max {
            break;
        }
        let (x1, y1) = if x[i] > d_max {
            let t = (d_max - x[i - 1]) / (x[i] - x[i - 1]);
            (d_max, y[i - 1] + t * (y[i] - y[i - 1]))
        } else {
            (x[i], y[i])
        };
        area += 0.5 * (x1 - x[i - 1]) * (y[i - 1] + y1);
    }
    Ok(area)
}

pub fn pauc(curve: &EdcCurve) -> Result<f64> {
    auc(curve, PAUC_LIMIT)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract(
            "spearman needs two equal-length samples of size ≥ 2",
        ));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::contract(
            "spearman is undefined for a constant sample",
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

// ---- CSV files ----

/// Rows of `id,<values…>` loaded from one file.
#[derive(Clone, Debug, PartialEq)]
pub struct Table<V> {
    pub source: String,
    pub rows: Vec<(String, V)>,
    index: HashMap<String, usize>,
}

impl<V> Table<V> {
    pub fn new(source: impl Into<String>, rows: Vec<(String, V)>) -> Result<Self> {
        let source = source.into();
        let mut index = HashMap::with_capacity(rows.len());
        for (i, (id, _)) in rows.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::format(format!("{source}: duplicate id {id}")));
            }
        }
        Ok(Self {
            source,
            rows,
            index,
        })
    }

    pub fn get(&self, id: &str) -> Result<&V> {
        self.index
            .get(id)
            .map(|&i| &self.rows[i].1)
            .ok_or_else(|| Error::format(format!("{}: unknown id {id}", self.source)))
    }
}

pub type Embeddings = Table<Vec<f64>>;
pub type Scores = Table<f64>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub genuine: bool,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: Vec<u8>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn records(
    text: &str,
    source: &str,
    header_ok: impl Fn(&csv::StringRecord) -> bool,
    expected: &str,
) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r
        .headers()
        .map_err(|e| Error::format(format!("{source}: {e}")))?
        .clone();
    if !header_ok(&header) {
        return Err(Error::format(format!(
            "{source}: expected header {expected}, got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::format(format!("{source} row {}: {e}", i + 2))))
        .collect()
}

fn number(source: &str, row: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format(format!("{source} row {}: bad number {field:?}", row + 2)))
}

pub fn embeddings_from_csv(text: &str, source: &str) -> Result<Embeddings> {
    let ok = |h: &csv::StringRecord| {
        h.len() >= 2
            && &h[0] == "id"
            && h.iter()
                .skip(1)
                .enumerate()
                .all(|(i, f)| f == format!("e{i}"))
    };
    let recs = records(text, source, ok, "id,e0,...,e{E-1}")?;
    let rows = recs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let v = r
                .iter()
                .skip(1)
                .map(|f| number(source, i, f))
                .collect::<Result<Vec<_>>>()?;
            Ok((r[0].to_string(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    Table::new(source, rows)
}

pub fn embeddings_to_csv(rows: &[(String, Vec<f64>)]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(e.to_string());
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..dim).map(|i| format!("e{i}")))
        .collect();
    w.write_record(&header).map_err(fail)?;
    for (id, v) in rows {
        if v.len() != dim {
            return Err(Error::contract(format!(
                "embedding {id} has width {}, expected {dim}",
                v.len()
            )));
        }
        let rec: Vec<String> = std::iter::once(id.clone())
            .chain(v.iter().map(f64::to_string))
            .collect();
        w.write_record(&rec).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

pub fn scores_from_csv(text: &str, source: &str) -> Result<Scores> {
    let ok = |h: &csv::StringRecord| h.iter().collect::<Vec<_>>() == ["id", "quality"];
    let recs = records(text, source, ok, "id,quality")?;
    let rows = recs
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((r[0].to_string(), number(source, i, &r[1])?)))
        .collect::<Result<Vec<_>>>()?;
    Table::new(source, rows)
}

pub fn scores_to_csv(rows: &[(String, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(e.to_string());
    w.write_record(["id", "quality"]).map_err(fail)?;
    for (id, q) in rows {
        w.write_record([id.as_str(), &q.to_string()])
            .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

pub fn pairs_from_csv(text: &str, source: &str) -> Result<Vec<Pair>> {
    let ok = |h: &csv::StringRecord| h.iter().collect::<Vec<_>>() == ["id_a", "id_b", "genuine"];
    let recs = records(text, source, ok, "id_a,id_b,genuine")?;
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            let genuine = match r[2].trim() {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::format(format!(
                        "{source} row {}: genuine must be 0 or 1, got {other:?}",
                        i + 2
                    )))
                }
            };
            Ok(Pair {
                a: r[0].to_string(),
                b: r[1].to_string(),
                genuine,
            })
        })
        .collect()
}

pub fn pairs_to_csv(pairs: &[Pair]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(e.to_string());
    w.write_record(["id_a", "id_b", "genuine"]).map_err(fail)?;
    for p in pairs {
        w.write_record([
            p.a.as_str(),
            p.b.as_str(),
            if p.genuine { "1" } else { "0" },
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    embeddings_from_csv(&read_text(path)?, &path.display().to_string())
}

pub fn read_scores(path: &Path) -> Result<Scores> {
    scores_from_csv(&read_text(path)?, &path.display().to_string())
}

pub fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    pairs_from_csv(&read_text(path)?, &path.display().to_string())
}

pub fn write_embeddings(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    write_bytes(path, embeddings_to_csv(rows)?)
}

pub fn write_scores(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    write_bytes(path, scores_to_csv(rows)?)
}

pub fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    write_bytes(path, pairs_to_csv(pairs)?)
}

/// Every unordered pair of manifest entries, labelled genuine when both
/// share an identity. Ids are manifest paths.
pub fn all_pairs(manifest: &crate::data::Manifest) -> Vec<Pair> {
    let e = manifest.entries();
    let mut out = Vec::with_capacity(e.len() * e.len().saturating_sub(1) / 2);
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            out.push(Pair {
                a: e[i].path.clone(),
                b: e[j].path.clone(),
                genuine: e[i].identity == e[j].identity,
            });
        }
    }
    out
}

/// Cosine similarity and combined quality for every listed pair.
pub fn build_comparison_set(
    embeddings: &Embeddings,
    scores: &Scores,
    pairs: &[Pair],
    combine: PairQuality,
) -> Result<ComparisonSet> {
    let mut set = ComparisonSet::default();
    for p in pairs {
        let similarity = cosine_similarity(embeddings.get(&p.a)?, embeddings.get(&p.b)?)?;
        let quality = combine.combine(*scores.get(&p.a)?, *scores.get(&p.b)?);
        let c = Comparison {
            similarity,
            quality,
        };
        if p.genuine {
            set.genuine.push(c);
        } else {
            set.impostor.push(c);
        }
    }
    Ok(set)
}

pub fn curve_to_csv(curve: &EdcCurve) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(e.to_string());
    w.write_record(CURVE_HEADER).map_err(fail)?;
    for i in 0..curve.grid.len() {
        w.write_record([
            curve.grid[i].to_string(),
            curve.fnmr[i].to_string(),
            curve.retained_genuine[i].to_string(),
            curve.retained_impostor[i].to_string(),
            u8::from(curve.flagged[i]).to_string(),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

/// Everything the `edc` command reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EdcSummary {
    pub threshold: Threshold,
    pub auc: f64,
    pub pauc30: f64,
    pub d_max: f64,
    pub pair_quality: PairQuality,
    pub genuine: usize,
    pub impostor: usize,
    pub flagged_points: usize,
}

/// τ at `target_fmr`, the curve over `grid`, and its areas.
pub fn evaluate(
    set: &ComparisonSet,
    target_fmr: f64,
    grid: &[f64],
    d_max: f64,
    pair_quality: PairQuality,
) -> Result<(EdcCurve, EdcSummary)> {
    if set.genuine.is_empty() || set.impostor.is_empty() {
        return Err(Error::contract(
            "evaluation needs genuine and impostor pairs",
        ));
    }
    let threshold = fmr_threshold(&set.impostor_similarities(), target_fmr)?;
    let curve = edc_compute(set, threshold.tau, grid)?;
    let summary = EdcSummary {
        threshold,
        auc: auc(&curve, d_max)?,
        pauc30: pauc(&curve)?,
        d_max,
        pair_quality,
        genuine: set.genuine.len(),
        impostor: set.impostor.len(),
        flagged_points: curve.flagged.iter().filter(|&&f| f).count(),
    };
    Ok((curve, summary))
}

/// `metric,value` rows. The first four are the headline numbers; the rest
/// record the conventions they depend on.
pub fn summary_to_csv(s: &EdcSummary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(e.to_string());
    w.write_record(["metric", "value"]).map_err(fail)?;
    let rows = [
        ("tau", s.threshold.tau.to_string()),
        ("achieved_fmr", s.threshold.achieved_fmr.to_string()),
        ("auc", s.auc.to_string()),
        ("pauc30", s.pauc30.to_string()),
        ("fmr_target", s.threshold.target_fmr.to_string()),
        ("unsaturated", u8::from(s.threshold.unsaturated).to_string()),
        ("d_max", s.d_max.to_string()),
        ("pair_quality", s.pair_quality.to_string()),
        ("area", "unnormalized".to_string()),
        ("genuine_pairs", s.genuine.to_string()),
        ("impostor_pairs", s.impostor.to_string()),
        ("flagged_points", s.flagged_points.to_string()),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()]).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(gen: &[(f64, f64)], imp: &[(f64, f64)]) -> ComparisonSet {
        let c = |v: &[(f64, f64)]| {
            v.iter()
                .map(|&(similarity, quality)| Comparison {
                    similarity,
                    quality,
                })
                .collect()
        };
        ComparisonSet {
            genuine: c(gen),
            impostor: c(imp),
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 0.7071067811865475).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let imp = [0.1, 0.2, 0.3, 0.4];
        let t = fmr_threshold(&imp, 0.25).unwrap();
        assert_eq!((t.tau, t.achieved_fmr, t.unsaturated), (0.4, 0.25, false));
        let t = fmr_threshold(&imp, 0.5).unwrap();
        assert_eq!((t.tau, t.achieved_fmr), (0.3, 0.5));
        let t = fmr_threshold(&imp, 0.1).unwrap();
        assert!(t.unsaturated && t.tau > 0.4 && t.tau == 0.4f64.next_up());
        assert_eq!(t.achieved_fmr, 0.0);
        assert!(fmr_threshold(&[], 0.1).is_err());
        assert!(fmr_threshold(&imp, 0.0).is_err());
    }

    #[test]
    fn fnmr_examples() {
        assert_eq!(fnmr_at(&[0.6, 0.9], 0.5).unwrap(), 0.0);
        assert_eq!(fnmr_at(&[0.1, 0.9], 0.5).unwrap(), 0.5);
    }

    #[test]
    fn pair_quality_is_min() {
        assert_eq!(pair_quality(0.3, 0.7), 0.3);
        assert_eq!(pair_quality(0.7, 0.3), 0.3);
        assert_eq!(pair_quality(0.5, 0.5), 0.5);
        assert_eq!(PairQuality::Mean.combine(0.2, 0.4), 0.30000000000000004);
    }

    #[test]
    fn edc_start_matches_global_fnmr() {
        let s = set(
            &[(0.2, 0.1), (0.9, 0.5), (0.7, 0.9)],
            &[(0.1, 0.3), (0.3, 0.2)],
        );
        let c = edc_compute(&s, 0.5, &[0.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(c.fnmr[0], fnmr_at(&s.genuine_similarities(), 0.5).unwrap());
        // d = 0.2 drops the genuine error (lowest quality 0.1).
        assert_eq!(c.fnmr[1], 0.0);
        assert_eq!(c.retained_genuine, vec![3, 2, 2, 2, 1]);
        assert_eq!(c.retained_impostor, vec![2, 2, 1, 0, 0]);
    }

    #[test]
    fn edc_carries_forward_when_no_genuine_left() {
        let s = set(&[(0.2, 0.0)], &[(0.1, 1.0), (0.3, 2.0)]);
        let c = edc_compute(&s, 0.5, &[0.0, 0.5]).unwrap();
        assert_eq!(c.fnmr, vec![1.0, 1.0]);
        assert_eq!(c.flagged, vec![false, true]);
    }

    #[test]
    fn ties_break_by_index_genuine_first() {
        let s = set(&[(0.9, 1.0), (0.1, 1.0)], &[(0.2, 1.0), (0.4, 1.0)]);
        let c = edc_compute(&s, 0.5, &[0.0, 0.25, 0.5]).unwrap();
        assert_eq!(c.retained_genuine, vec![2, 1, 0]);
        assert_eq!(c.fnmr, vec![0.5, 1.0, 1.0]);
        assert_eq!(c.flagged, vec![false, false, true]);
    }

    #[test]
    fn discard_count_is_exact_on_percent_grid() {
        assert_eq!(discard_count(0.29, 100), 29);
        assert_eq!(discard_count(0.57, 100), 57);
        assert_eq!(discard_count(0.5, 3), 1);
        let g = default_grid(0.98);
        assert_eq!(g.len(), 99);
        assert_eq!(*g.last().unwrap(), 0.98);
    }

    #[test]
    fn area_examples() {
        let grid = default_grid(0.98);
        let flat = EdcCurve {
            tau: 0.0,
            fnmr: vec![0.2; grid.len()],
            retained_genuine: vec![1; grid.len()],
            retained_impostor: vec![1; grid.len()],
            flagged: vec![false; grid.len()],
            grid: grid.clone(),
        };
        assert!((pauc(&flat).unwrap() - 0.3 * 0.2).abs() < 1e-15);
        let tri = EdcCurve {
            grid: vec![0.0, 0.5, 1.0],
            fnmr: vec![0.4, 0.2, 0.0],
            ..flat.clone()
        };
        assert!((auc(&tri, 1.0).unwrap() - 0.2).abs() < 1e-15);
        // Interpolated end point.
        assert!((auc(&tri, 0.25).unwrap() - 0.25 * 0.35).abs() < 1e-15);
        assert!(auc(&tri, 1.5).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_round_trips_and_lookup_errors() {
        let emb = vec![
            ("a".to_string(), vec![0.1, -2.5]),
            ("b".to_string(), vec![1.0, 0.0]),
        ];
        let text = String::from_utf8(embeddings_to_csv(&emb).unwrap()).unwrap();
        assert!(text.starts_with("id,e0,e1\n"));
        let table = embeddings_from_csv(&text, "emb.csv").unwrap();
        assert_eq!(table.rows, emb);
        let scores = scores_from_csv("id,quality\na,0.5\nb,0.25\n", "q.csv").unwrap();
        let pairs = pairs_from_csv("id_a,id_b,genuine\na,b,1\na,zz,0\n", "p.csv").unwrap();
        let err = build_comparison_set(&table, &scores, &pairs, PairQuality::Min).unwrap_err();
        assert!(err.to_string().contains("zz") && err.to_string().contains("emb.csv"));
        let ok = build_comparison_set(&table, &scores, &pairs[..1], PairQuality::Min).unwrap();
        assert_eq!(ok.genuine[0].quality, 0.25);
        assert!(pairs_from_csv("id_a,id_b,genuine\na,b,2\n", "p.csv").is_err());
        assert!(scores_from_csv("id,score\n", "q.csv").is_err());
    }

    #[test]
    fn identical_embeddings_score_one() {
        let table = embeddings_from_csv("id,e0,e1\nx,0.3,0.4\ny,0.3,0.4\n", "e").unwrap();
        let scores = scores_from_csv("id,quality\nx,1\ny,2\n", "s").unwrap();
        let pairs = vec![Pair {
            a: "x".into(),
            b: "y".into(),
            genuine: true,
        }];
        let s = build_comparison_set(&table, &scores, &pairs, PairQuality::Min).unwrap();
        assert!((s.genuine[0].similarity - 1.0).abs() < 1e-15);
    }
}
