//! Multiple-choice evaluation, the latent step-count sweep, and embedding
//! projection with cluster-quality scoring.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{lvr_infer, MAX_ANSWER_TOKENS, SWEEP_KS};
use crate::error::{Error, Result};
use crate::model::{Inference, Model};
use crate::synthworld::{self, read_jsonl, SerializeMode, TrajectoryExample, Vocab, LETTERS};

pub const PCA_ITERS: usize = 200;
pub const PCA_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    /// Answer straight from the input view.
    Direct,
    /// Roll out `k` continuous latents first.
    Lvr { k: usize },
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Direct => write!(f, "direct"),
            EvalMode::Lvr { k } => write!(f, "lvr_k{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegimeScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_regime: BTreeMap<String, RegimeScore>,
    pub unparsed: usize,
    /// Benchmark lines that failed to parse and were skipped.
    pub malformed: usize,
    /// Mean negative log-likelihood of the gold letter at the first answer
    /// position.
    pub answer_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub regime: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
}

/// Option index of the first generated letter, if any.
pub fn parse_answer(tokens: &[usize], vocab: &Vocab) -> Option<usize> {
    let letters = vocab.letter_ids();
    tokens.iter().find_map(|t| letters.iter().position(|l| l == t))
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn log_softmax_at(z: &[f64], i: usize) -> f64 {
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    z[i] - lse
}

/// Scores `examples` with greedy decoding of at most four tokens. Decoding
/// stops at the first option letter, which is the token the parser reads.
pub fn evaluate_examples(
    model: &Model,
    examples: &[TrajectoryExample],
    mode: EvalMode,
) -> Result<(EvalReport, Vec<ItemOutcome>)> {
    let vocab = Vocab::standard();
    let letters = vocab.letter_ids();
    let eos = model.cfg.vocab_size - 1;
    let mut inf = Inference::new(model);
    let mut items = Vec::with_capacity(examples.len());
    let mut per_regime: BTreeMap<String, RegimeScore> = BTreeMap::new();
    let (mut correct, mut unparsed, mut nll) = (0, 0, 0.0);
    for ex in examples {
        let input = synthworld::serialize_example(ex, SerializeMode::InputView, &vocab)?;
        let is_letter = |c: usize| letters.contains(&c);
        let decoded = match mode {
            EvalMode::Direct => inf.greedy(&input, None, MAX_ANSWER_TOKENS, eos, is_letter)?,
            EvalMode::Lvr { k } => lvr_infer(&mut inf, &input, k, is_letter)?.answer,
        };
        let gold = ex.question.gold_index().ok_or_else(|| Error::Data(format!("{}: bad gold letter", ex.id)))?;
        if !decoded.first_logits.is_empty() {
            nll -= log_softmax_at(&decoded.first_logits, letters[gold]);
        }
        let parsed = parse_answer(&decoded.tokens, &vocab);
        let ok = parsed == Some(gold);
        correct += ok as usize;
        unparsed += parsed.is_none() as usize;
        let score = per_regime.entry(ex.regime.name().to_string()).or_default();
        score.n += 1;
        score.correct += ok as usize;
        items.push(ItemOutcome {
            id: ex.id.clone(),
            regime: ex.regime.name().to_string(),
            gold: ex.question.gold.clone(),
            predicted: parsed.map(|i| LETTERS[i].to_string()),
            correct: ok,
        });
    }
    for s in per_regime.values_mut() {
        s.accuracy = ratio(s.correct, s.n);
    }
    let n = examples.len();
    let report = EvalReport {
        mode: mode.to_string(),
        n,
        correct,
        accuracy: ratio(correct, n),
        per_regime,
        unparsed,
        malformed: 0,
        answer_nll: if n == 0 { 0.0 } else { nll / n as f64 },
    };
    Ok((report, items))
}

/// Evaluates a benchmark file; malformed lines are counted and skipped.
pub fn evaluate(model: &Model, bench: &Path, mode: EvalMode) -> Result<(EvalReport, Vec<ItemOutcome>)> {
    let split = read_jsonl(bench)?;
    let (mut report, items) = evaluate_examples(model, &split.examples, mode)?;
    report.malformed = split.malformed;
    Ok((report, items))
}

/// Writes `<stem>.csv` (one row per item) and `<stem>.json` (the summary).
pub fn write_eval_report(dir: &Path, stem: &str, report: &EvalReport, items: &[ItemOutcome]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join(format!("{stem}.csv")))?;
    writeln!(f, "id,regime,gold,predicted,correct")?;
    for it in items {
        writeln!(
            f,
            "{},{},{},{},{}",
            it.id,
            it.regime,
            it.gold,
            it.predicted.as_deref().unwrap_or(""),
            it.correct as u8
        )?;
    }
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Pearson correlation; `(0.0, true)` when either variable has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len().min(y.len());
    if n < 2 {
        return (0.0, true);
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, true);
    }
    ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub accuracy: f64,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Correlation of accuracy with log2(k).
    pub pearson_r: f64,
    pub r_squared: f64,
    /// Correlation of accuracy with k itself.
    pub pearson_r_raw_k: f64,
    pub zero_variance: bool,
    /// Largest minus smallest accuracy across k.
    pub spread: f64,
}

impl SweepReport {
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let log_k: Vec<f64> = rows.iter().map(|r| (r.k as f64).log2()).collect();
        let raw_k: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
        let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
        let (r, zero_variance) = pearson(&log_k, &acc);
        let (r_raw, _) = pearson(&raw_k, &acc);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        SweepReport {
            rows,
            pearson_r: r,
            r_squared: r * r,
            pearson_r_raw_k: r_raw,
            zero_variance,
            spread: if acc.is_empty() { 0.0 } else { hi - lo },
        }
    }
}

/// Accuracy of a latent-baseline model at each latent step count.
pub fn sweep_steps(model: &Model, examples: &[TrajectoryExample], ks: &[usize]) -> Result<SweepReport> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let (rep, _) = evaluate_examples(model, examples, EvalMode::Lvr { k })?;
        rows.push(SweepRow { k, accuracy: rep.accuracy, n_eval: rep.n });
    }
    Ok(SweepReport::from_rows(rows))
}

pub fn default_sweep_ks() -> Vec<usize> {
    SWEEP_KS.to_vec()
}

/// Writes `sweep.csv` (`k,accuracy,n_eval`) and `sweep.json`.
pub fn write_sweep(dir: &Path, report: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("sweep.csv"))?;
    writeln!(f, "k,accuracy,n_eval")?;
    for r in &report.rows {
        writeln!(f, "{},{},{}", r.k, r.accuracy, r.n_eval)?;
    }
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub explained: Vec<f64>,
    pub total_variance: f64,
    pub note: Option<String>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((ci, xi), mi)| ci * (xi - mi)).sum())
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top principal directions by power iteration on the covariance matrix,
/// deflating after each component.
pub fn pca(points: &[Vec<f64>], n_components: usize) -> Result<Pca> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Contract(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape { op: "pca", left: vec![n, d], right: vec![] });
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        let c: Vec<f64> = p.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut components: Vec<Vec<f64>> = Vec::new();
    let mut explained = Vec::new();
    let mut note = None;
    for comp in 0..n_components.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.01 * ((i * 7 + comp * 3) % 11) as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..PCA_ITERS {
            for c in &components {
                let proj = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, ci)| *x -= proj * ci);
            }
            let mut w: Vec<f64> = (0..d).map(|i| dot(&cov[i * d..(i + 1) * d], &v)).collect();
            if normalize(&mut w) == 0.0 {
                lambda = 0.0;
                v = w;
                break;
            }
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = (0..d).map(|i| v[i] * dot(&cov[i * d..(i + 1) * d], &v)).sum();
            if delta < PCA_TOL {
                break;
            }
        }
        for c in &components {
            let proj = dot(&v, c);
            v.iter_mut().zip(c).for_each(|(x, ci)| *x -= proj * ci);
        }
        if lambda <= 1e-12 * total_variance.max(f64::MIN_POSITIVE) || normalize(&mut v) == 0.0 {
            note = Some(format!("data has rank {comp}; returned {comp} of {n_components} components"));
            break;
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        explained.push(lambda);
    }
    Ok(Pca { mean, components, explained, total_variance, note })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Input,
    Trajectory,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Input => "input",
            View::Trajectory => "trajectory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub x: f64,
    pub y: f64,
    pub view: View,
    pub task: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub points: Vec<EmbeddingPoint>,
    pub pca: Pca,
}

/// Last-position hidden states of the input view and of the trajectory view.
pub fn view_encodings(model: &Model, ex: &TrajectoryExample) -> Result<(Vec<f64>, Vec<f64>)> {
    let vocab = Vocab::standard();
    let mut inf = Inference::new(model);
    let input = synthworld::serialize_example(ex, SerializeMode::InputView, &vocab)?;
    let traj = synthworld::serialize_example(ex, SerializeMode::TrajectoryView, &vocab)?;
    Ok((inf.last_hidden(&input, None)?, inf.last_hidden(&traj, None)?))
}

/// Projects both views of every example onto a shared top-2 PCA basis.
pub fn project_embeddings(model: &Model, examples: &[TrajectoryExample], labels: &[String]) -> Result<Projection> {
    if examples.len() < 3 {
        return Err(Error::Contract(format!("need at least 3 examples, got {}", examples.len())));
    }
    if labels.len() != examples.len() {
        return Err(Error::Contract(format!("{} labels for {} examples", labels.len(), examples.len())));
    }
    let mut raw = Vec::with_capacity(2 * examples.len());
    let mut tags = Vec::with_capacity(2 * examples.len());
    for (ex, label) in examples.iter().zip(labels) {
        let (h_x, h_r) = view_encodings(model, ex)?;
        raw.push(h_x);
        tags.push((View::Input, label.clone()));
        raw.push(h_r);
        tags.push((View::Trajectory, label.clone()));
    }
    let pca = pca(&raw, 2)?;
    let points = raw
        .iter()
        .zip(tags)
        .map(|(h, (view, task))| {
            let p = pca.project(h);
            EmbeddingPoint { x: p.first().copied().unwrap_or(0.0), y: p.get(1).copied().unwrap_or(0.0), view, task }
        })
        .collect();
    Ok(Projection { points, pca })
}

pub fn write_points_csv(path: &Path, points: &[EmbeddingPoint]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "x,y,view,task")?;
    for p in points {
        writeln!(f, "{},{},{},{}", p.x, p.y, p.view.name(), p.task)?;
    }
    Ok(())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distance. Points in singleton clusters
/// score 0, as does any point whose intra and nearest-cluster distances are
/// both 0.
pub fn cluster_quality(points: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Contract(format!("{} labels for {} points", labels.len(), points.len())));
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        clusters.entry(l.as_str()).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::Contract("silhouette needs at least 2 labels".into()));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let own = &clusters[labels[i].as_str()];
        if own.len() < 2 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| euclid(p, &points[j])).sum::<f64>() / (own.len() - 1) as f64;
        let b = clusters
            .iter()
            .filter(|(l, _)| **l != labels[i].as_str())
            .map(|(_, m)| m.iter().map(|&j| euclid(p, &points[j])).sum::<f64>() / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Silhouettes of a projection by task label: over input-view points only
/// and over both views.
pub fn projection_silhouettes(proj: &Projection) -> Result<(f64, f64)> {
    let all: Vec<Vec<f64>> = proj.points.iter().map(|p| vec![p.x, p.y]).collect();
    let labels: Vec<String> = proj.points.iter().map(|p| p.task.clone()).collect();
    let (inp, inp_labels): (Vec<Vec<f64>>, Vec<String>) =
        proj.points.iter().filter(|p| p.view == View::Input).map(|p| (vec![p.x, p.y], p.task.clone())).unzip();
    Ok((cluster_quality(&inp, &inp_labels)?, cluster_quality(&all, &labels)?))
}
