//! Latent retrieval, word-KL rankings, rank-biased overlap and the
//! peak-dB significance test.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::normalize;
use crate::error::{Error, Result};

pub const DEFAULT_PERSISTENCE: f64 = 0.9;
pub const DEFAULT_DEPTH: usize = 100;
/// Pseudo-count added to every word of the union vocabulary in `p_N`.
pub const DEFAULT_SMOOTHING: f64 = 0.5;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Stats("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// An embedded clip with its song / album / artist labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalItem {
    pub clip_ref: String,
    pub song_id: String,
    pub album_id: String,
    pub artist_id: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Proportions {
    pub same_song: f64,
    pub same_album: f64,
    pub same_artist: f64,
}

impl Proportions {
    /// `same_song ≤ same_album ≤ same_artist`.
    pub fn respects_hierarchy(&self) -> bool {
        self.same_song <= self.same_album && self.same_album <= self.same_artist
    }
}

/// Fractions of the `n` pool items most cosine-similar to `query` that share
/// each label. Pool entries with the query's clip_ref are skipped; ties are
/// broken by clip_ref.
pub fn topn_retrieval(query: &RetrievalItem, pool: &[RetrievalItem], n: usize) -> Result<Proportions> {
    if n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for item in pool.iter().filter(|i| i.clip_ref != query.clip_ref) {
        scored.push((cosine_similarity(&query.embedding, &item.embedding)?, item));
    }
    if scored.len() < n {
        return Err(Error::InvalidConfig(format!(
            "n = {n} exceeds pool size {}",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.clip_ref.cmp(&b.1.clip_ref))
    });
    let mut counts = [0usize; 3];
    for (_, item) in &scored[..n] {
        counts[0] += usize::from(item.song_id == query.song_id);
        counts[1] += usize::from(item.album_id == query.album_id);
        counts[2] += usize::from(item.artist_id == query.artist_id);
    }
    let f = |c: usize| c as f64 / n as f64;
    Ok(Proportions {
        same_song: f(counts[0]),
        same_album: f(counts[1]),
        same_artist: f(counts[2]),
    })
}

/// Query-averaged retrieval proportions for one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub n: usize,
    pub queries: usize,
    pub mean: Proportions,
    /// Queries whose own proportions break the label hierarchy.
    pub hierarchy_violations: usize,
}

pub fn retrieval_table(queries: &[RetrievalItem], pool: &[RetrievalItem], ns: &[usize]) -> Result<Vec<RetrievalSummary>> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("retrieval queries"));
    }
    ns.iter()
        .map(|&n| {
            let per: Vec<Proportions> = queries
                .par_iter()
                .map(|q| topn_retrieval(q, pool, n))
                .collect::<Result<_>>()?;
            let k = per.len() as f64;
            let mean = Proportions {
                same_song: per.iter().map(|p| p.same_song).sum::<f64>() / k,
                same_album: per.iter().map(|p| p.same_album).sum::<f64>() / k,
                same_artist: per.iter().map(|p| p.same_artist).sum::<f64>() / k,
            };
            Ok(RetrievalSummary {
                n,
                queries: per.len(),
                mean,
                hierarchy_violations: per.iter().filter(|p| !p.respects_hierarchy()).count(),
            })
        })
        .collect()
}

/// Word probabilities over a fixed support.
#[derive(Debug, Clone, PartialEq)]
pub struct WordDistribution {
    probs: BTreeMap<String, f64>,
}

impl WordDistribution {
    /// `p(w) = (count(w) + smoothing) / (total + smoothing·|support|)`.
    /// The support is the union of `support` and the counted words.
    pub fn from_counts(counts: &BTreeMap<String, usize>, support: &BTreeSet<String>, smoothing: f64) -> Result<Self> {
        if !(smoothing >= 0.0) {
            return Err(Error::InvalidConfig("smoothing must be ≥ 0".into()));
        }
        let words: BTreeSet<&String> = support.iter().chain(counts.keys()).collect();
        let total: f64 = counts.values().sum::<usize>() as f64 + smoothing * words.len() as f64;
        if total <= 0.0 {
            return Err(Error::EmptyInput("word distribution"));
        }
        let probs = words
            .into_iter()
            .map(|w| {
                let c = counts.get(w).copied().unwrap_or(0) as f64;
                (w.clone(), (c + smoothing) / total)
            })
            .collect();
        Ok(Self { probs })
    }

    pub fn from_probs(probs: BTreeMap<String, f64>) -> Result<Self> {
        let sum: f64 = probs.values().sum();
        if probs.values().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Stats(format!("probabilities must be ≥ 0 and sum to 1, got {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn prob(&self, word: &str) -> f64 {
        self.probs.get(word).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(w, &p)| (w.as_str(), p))
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }
}

pub fn word_counts<S: AsRef<str>>(lines: &[S]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for line in lines {
        for w in normalize(line.as_ref()) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Words ordered by descending score, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWordList(Vec<(String, f64)>);

impl RankedWordList {
    pub fn new(mut items: Vec<(String, f64)>) -> Self {
        items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
        let mut seen = HashSet::new();
        items.retain(|(w, _)| seen.insert(w.clone()));
        Self(items)
    }

    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        let items: Vec<(String, f64)> = words.into_iter().map(Into::into).zip(0..).map(|(w, i)| (w, -(i as f64))).collect();
        Self::new(items)
    }

    pub fn items(&self) -> &[(String, f64)] {
        &self.0
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(w, _)| w.as_str())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `p_G(w)·ln(p_G(w)/p_N(w))` for every word with `p_G(w) > 0`.
pub fn word_kl_from_distributions(pg: &WordDistribution, pn: &WordDistribution) -> Result<RankedWordList> {
    let mut items = Vec::new();
    for (w, p) in pg.iter().filter(|(_, p)| *p > 0.0) {
        let q = pn.prob(w);
        if q <= 0.0 {
            return Err(Error::Stats(format!("word {w:?} has zero background probability")));
        }
        items.push((w.to_string(), p * (p / q).ln()));
    }
    if items.is_empty() {
        return Err(Error::EmptyInput("generated corpus"));
    }
    Ok(RankedWordList::new(items))
}

/// Ranks the words of `gk` by word-KL against the background corpus. `p_G`
/// is the maximum-likelihood estimate; `p_N` is add-`smoothing` over the
/// union vocabulary of both corpora.
pub fn word_kl<S: AsRef<str>, T: AsRef<str>>(gk: &[S], background: &[T], smoothing: f64) -> Result<RankedWordList> {
    let g = word_counts(gk);
    let n = word_counts(background);
    if g.is_empty() {
        return Err(Error::EmptyInput("generated corpus"));
    }
    if n.is_empty() {
        return Err(Error::EmptyInput("background corpus"));
    }
    let union: BTreeSet<String> = g.keys().chain(n.keys()).cloned().collect();
    let pg = WordDistribution::from_counts(&g, &BTreeSet::new(), 0.0)?;
    let pn = WordDistribution::from_counts(&n, &union, smoothing)?;
    word_kl_from_distributions(&pg, &pn)
}

/// Extrapolated rank-biased overlap
/// `(1−p)·Σ_{d=1..k} p^{d−1}·A_d + p^k·A_k` with
/// `A_d = |head_d(s) ∩ head_d(t)| / d` and
/// `k = min(depth, max(|s|, |t|))`.
pub fn rbo(s: &RankedWordList, t: &RankedWordList, p: f64, depth: usize) -> Result<f64> {
    rbo_words(&s.words().collect::<Vec<_>>(), &t.words().collect::<Vec<_>>(), p, depth)
}

pub fn rbo_words<T: Eq + std::hash::Hash>(s: &[T], t: &[T], p: f64, depth: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("persistence must be in (0, 1), got {p}")));
    }
    if depth == 0 {
        return Err(Error::InvalidConfig("depth must be at least 1".into()));
    }
    if s.is_empty() || t.is_empty() {
        return Err(Error::EmptyInput("ranked list"));
    }
    let k = depth.min(s.len().max(t.len()));
    let mut seen_s: HashSet<&T> = HashSet::new();
    let mut seen_t: HashSet<&T> = HashSet::new();
    let mut overlap = 0usize;
    let mut sum = 0.0;
    let mut weight = 1.0;
    let mut agreement = 0.0;
    for d in 1..=k {
        if let Some(x) = s.get(d - 1) {
            if seen_s.insert(x) && seen_t.contains(x) {
                overlap += 1;
            }
        }
        if let Some(y) = t.get(d - 1) {
            if seen_t.insert(y) && seen_s.contains(y) {
                overlap += 1;
            }
        }
        agreement = overlap as f64 / d as f64;
        sum += weight * agreement;
        weight *= p;
    }
    Ok(((1.0 - p) * sum + weight * agreement).clamp(0.0, 1.0))
}

/// Generated lines for one song or clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCorpus {
    pub name: String,
    pub label: String,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RboMatrix {
    pub names: Vec<String>,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl RboMatrix {
    /// Mean off-diagonal entry over pairs with equal / different labels.
    pub fn within_cross_means(&self) -> (f64, f64) {
        let (mut w, mut nw, mut c, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..self.names.len() {
            for j in 0..self.names.len() {
                if i == j {
                    continue;
                }
                if self.labels[i] == self.labels[j] {
                    w += self.values[i][j];
                    nw += 1;
                } else {
                    c += self.values[i][j];
                    nc += 1;
                }
            }
        }
        (w / nw.max(1) as f64, c / nc.max(1) as f64)
    }
}

fn background_excluding<'a>(corpora: &'a [GeneratedCorpus], skip: &str) -> Vec<&'a str> {
    corpora
        .iter()
        .filter(|c| c.name != skip)
        .flat_map(|c| c.lines.iter().map(String::as_str))
        .collect()
}

/// Entry `(i, j)` is the RBO of song i's and song j's word-KL lists, each
/// ranked against the union of every other song.
pub fn rbo_matrix(songs: &[GeneratedCorpus], smoothing: f64, p: f64, depth: usize) -> Result<RboMatrix> {
    if songs.len() < 2 {
        return Err(Error::EmptyInput("RBO matrix needs at least two songs"));
    }
    let ranked: Vec<RankedWordList> = songs
        .par_iter()
        .map(|s| word_kl(&s.lines, &background_excluding(songs, &s.name), smoothing))
        .collect::<Result<_>>()?;
    let n = songs.len();
    let upper: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, j)| Ok((i, j, rbo(&ranked[i], &ranked[j], p, depth)?)))
        .collect::<Result<_>>()?;
    let mut values = vec![vec![1.0; n]; n];
    for (i, j, v) in upper {
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(RboMatrix {
        names: songs.iter().map(|s| s.name.clone()).collect(),
        labels: songs.iter().map(|s| s.label.clone()).collect(),
        values,
    })
}

/// One clip of the song being traced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineClip {
    pub clip_ref: String,
    pub start: f64,
    pub peak_db: f64,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub t: f64,
    pub rbo_calm: f64,
    pub rbo_intense: f64,
    pub peak_db: f64,
}

/// For each clip, ranks its corpus against the union of all other test
/// clips' corpora (`test_clips`, keyed by `name == clip_ref`), ranks both
/// reference corpora against that same background, and reports the RBO with
/// each. Points are ordered by start time.
pub fn clip_timeline(
    clips: &[TimelineClip],
    test_clips: &[GeneratedCorpus],
    calm_reference: &[String],
    intense_reference: &[String],
    smoothing: f64,
    p: f64,
    depth: usize,
) -> Result<Vec<TimelinePoint>> {
    if calm_reference.is_empty() || intense_reference.is_empty() {
        return Err(Error::EmptyInput("reference corpus"));
    }
    let mut order: Vec<&TimelineClip> = clips.iter().collect();
    order.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap_or(Ordering::Equal));
    if order.windows(2).any(|w| w[0].start >= w[1].start) {
        return Err(Error::InvalidConfig("clip start times must be distinct".into()));
    }
    order
        .par_iter()
        .map(|clip| {
            let background = background_excluding(test_clips, &clip.clip_ref);
            let own = word_kl(&clip.lines, &background, smoothing)?;
            let calm = word_kl(calm_reference, &background, smoothing)?;
            let intense = word_kl(intense_reference, &background, smoothing)?;
            Ok(TimelinePoint {
                t: clip.start,
                rbo_calm: rbo(&own, &calm, p, depth)?,
                rbo_intense: rbo(&own, &intense, p, depth)?,
                peak_db: clip.peak_db,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Welch two-sample t-test with Welch–Satterthwaite degrees of freedom;
/// the p-value is two-sided.
pub fn ttest_peak_db(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats("each group needs at least two values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) {
        return Err(Error::Stats("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Stats(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p_value })
}

/// Fraction of content words in `lines` that belong to `words`.
pub fn token_purity<S: AsRef<str>>(lines: &[S], words: &HashSet<String>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for line in lines {
        for w in normalize(line.as_ref()) {
            total += 1;
            hit += usize::from(words.contains(&w));
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the matrix CSV (header `song,label,<names...>`) and a JSON
/// descriptor next to it.
pub fn write_rbo_matrix(path: &Path, m: &RboMatrix) -> Result<()> {
    let mut out = String::from("song,label");
    for n in &m.names {
        out.push(',');
        out.push_str(&csv_field(n));
    }
    out.push('\n');
    for (i, row) in m.values.iter().enumerate() {
        out.push_str(&csv_field(&m.names[i]));
        out.push(',');
        out.push_str(&csv_field(&m.labels[i]));
        for v in row {
            write!(out, ",{v:.12}").expect("string write");
        }
        out.push('\n');
    }
    write_text(path, &out)?;
    write_text(&path.with_extension("json"), &serde_json::to_string_pretty(m)?)
}

pub fn write_timeline(path: &Path, points: &[TimelinePoint]) -> Result<()> {
    let mut out = String::from("t,rbo_calm,rbo_intense,peak_db\n");
    for p in points {
        writeln!(out, "{},{:.12},{:.12},{:.6}", p.t, p.rbo_calm, p.rbo_intense, p.peak_db).expect("string write");
    }
    write_text(path, &out)
}

pub fn write_retrieval(path: &Path, table: &[RetrievalSummary]) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(table)?)
}
