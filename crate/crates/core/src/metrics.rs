//! Caption metrics (BLEU-1..4, ROUGE-L, CIDEr), bootstrap confidence
//! intervals, and the sentence-count complexity analysis.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

/// One aligned hypothesis/reference pair, whitespace-tokenized.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub hyp: Vec<String>,
    pub reference: Vec<String>,
}

/// Corpus scores plus the per-report table kept for complexity analysis.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider: f64,
    pub mean: f64,
    pub per_report: Vec<PerReportScore>,
}

#[derive(Clone, Debug)]
pub struct PerReportScore {
    pub id: String,
    pub bleu1: f64,
}

/// Summary record serialized alongside the CSV output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub mean: f64,
}

impl EvalResult {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            bleu1: self.bleu[0],
            bleu2: self.bleu[1],
            bleu3: self.bleu[2],
            bleu4: self.bleu[3],
            rouge_l: self.rouge_l,
            cider: self.cider,
            mean: self.mean,
        }
    }

    pub fn headline(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("bleu1", self.bleu[0]),
            ("bleu2", self.bleu[1]),
            ("bleu3", self.bleu[2]),
            ("bleu4", self.bleu[3]),
            ("rougeL", self.rouge_l),
            ("cider", self.cider),
            ("mean", self.mean),
        ]
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: clipped n-gram precisions aggregated over the
/// corpus, uniform-weight geometric mean, standard brevity penalty.
/// Zero when any order has zero clipped matches.
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("bleu: empty corpus"));
    }
    let mut clipped = vec![0u64; n];
    let mut totals = vec![0u64; n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for p in pairs {
        hyp_len += p.hyp.len();
        ref_len += p.reference.len();
        for k in 1..=n {
            let hc = ngram_counts(&p.hyp, k);
            let rc = ngram_counts(&p.reference, k);
            for (gram, &c) in &hc {
                totals[k - 1] += c;
                let r = rc.get(gram).copied().unwrap_or(0);
                clipped[k - 1] += c.min(r);
            }
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if clipped[k] == 0 || totals[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped[k] as f64 / totals[k] as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    Ok(brevity_penalty(hyp_len, ref_len) * precision)
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
}

/// Pair-level BLEU-1 used for the per-report table.
fn pair_bleu1(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let hc = ngram_counts(hyp, 1);
    let rc = ngram_counts(reference, 1);
    let mut clipped = 0u64;
    for (gram, &c) in &hc {
        clipped += c.min(rc.get(gram).copied().unwrap_or(0));
    }
    if clipped == 0 {
        return 0.0;
    }
    brevity_penalty(hyp.len(), reference.len()) * clipped as f64 / hyp.len() as f64
}

/// Mean-over-pairs ROUGE-L F-measure with the recall-leaning beta.
pub fn rouge_l(pairs: &[EvalPair], beta: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("rouge_l: empty corpus"));
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += pair_rouge_l(&p.hyp, &p.reference, beta);
    }
    Ok(sum / pairs.len() as f64)
}

fn pair_rouge_l(hyp: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 || hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// TF-IDF n-gram consensus over orders 1..=n_max, averaged and scaled by
/// ten. IDF comes from reference document frequencies
/// (`ln(corpus / max(df, 1))`); a corpus needs at least two references.
/// `cider_d` adds count clipping and the Gaussian length penalty.
pub fn cider(pairs: &[EvalPair], n_max: usize, cider_d: bool) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::invalid(
            "cider: needs at least 2 reference documents for IDF",
        ));
    }
    let n_docs = pairs.len() as f64;
    let mut total = 0.0;
    for order in 1..=n_max {
        // document frequency over the reference corpus
        let mut df: HashMap<Vec<String>, u64> = HashMap::new();
        for p in pairs {
            let mut seen: Vec<&[String]> = ngram_counts(&p.reference, order)
                .into_keys()
                .collect();
            seen.sort();
            for gram in seen {
                *df.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
        let idf = |gram: &[String]| -> f64 {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            (n_docs / d).ln()
        };
        let mut order_sum = 0.0;
        for p in pairs {
            let hc = ngram_counts(&p.hyp, order);
            let rc = ngram_counts(&p.reference, order);
            let mut dot = 0.0;
            let mut h_norm2 = 0.0;
            let mut r_norm2 = 0.0;
            for (gram, &c) in &hc {
                let w = idf(gram);
                let gh = c as f64 * w;
                h_norm2 += gh * gh;
                if let Some(&rcount) = rc.get(gram) {
                    let gr = rcount as f64 * w;
                    let num = if cider_d {
                        (c.min(rcount) as f64 * w) * gr
                    } else {
                        gh * gr
                    };
                    dot += num;
                }
            }
            for (gram, &c) in &rc {
                let w = idf(gram);
                let gr = c as f64 * w;
                r_norm2 += gr * gr;
            }
            // sqrt of the product keeps identical hyp/ref at exactly 1
            let mut sim = if h_norm2 > 0.0 && r_norm2 > 0.0 {
                dot / (h_norm2 * r_norm2).sqrt()
            } else {
                0.0
            };
            if cider_d {
                let dl = p.hyp.len() as f64 - p.reference.len() as f64;
                sim *= (-dl * dl / 72.0).exp(); // sigma = 6
            }
            order_sum += sim;
        }
        total += order_sum / pairs.len() as f64;
    }
    Ok(10.0 * total / n_max as f64)
}

/// All six headline metrics plus the per-report BLEU-1 table.
pub fn evaluate(pairs: &[EvalPair]) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate: empty corpus"));
    }
    let bleu = [
        bleu_n(pairs, 1)?,
        bleu_n(pairs, 2)?,
        bleu_n(pairs, 3)?,
        bleu_n(pairs, 4)?,
    ];
    let rouge = rouge_l(pairs, 1.2)?;
    let cdr = cider(pairs, 4, false)?;
    let mean = (bleu.iter().sum::<f64>() + rouge + cdr) / 6.0;
    let per_report = pairs
        .iter()
        .map(|p| PerReportScore {
            id: p.id.clone(),
            bleu1: pair_bleu1(&p.hyp, &p.reference),
        })
        .collect();
    Ok(EvalResult {
        bleu,
        rouge_l: rouge,
        cider: cdr,
        mean,
        per_report,
    })
}

/// Align generated and reference records by id: every hypothesis must have
/// exactly one reference.
pub fn align(hyps: &[(String, String)], refs: &[(String, String)]) -> Result<Vec<EvalPair>> {
    let ref_map: HashMap<&str, &str> = refs.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    if ref_map.len() != refs.len() {
        return Err(Error::invalid("align: duplicate reference ids"));
    }
    let mut pairs = Vec::with_capacity(hyps.len());
    for (id, text) in hyps {
        let rt = ref_map
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("align: no reference for id {id:?}")))?;
        pairs.push(EvalPair {
            id: id.clone(),
            hyp: text.split_whitespace().map(String::from).collect(),
            reference: rt.split_whitespace().map(String::from).collect(),
        });
    }
    Ok(pairs)
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

/// Line-delimited `{id, text}` records.
pub fn load_text_records(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push((rec.id, rec.text));
    }
    Ok(out)
}

pub fn save_text_records(path: &Path, records: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, text) in records {
        let rec = TextRecord {
            id: id.clone(),
            text: text.clone(),
        };
        serde_json::to_writer(&mut f, &rec).map_err(|e| Error::format(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

// ---- bootstrap --------------------------------------------------------------

/// Per-metric interval: the replicate mean, the t-based half-width, bounds,
/// and the raw replicate standard deviation (both spreads are reported).
#[derive(Clone, Debug)]
pub struct MetricCi {
    pub name: String,
    pub point: f64,
    pub half_width: f64,
    pub lower: f64,
    pub upper: f64,
    pub sd: f64,
}

#[derive(Clone, Debug)]
pub struct BootstrapResult {
    pub metrics: Vec<MetricCi>,
    pub replicates: usize,
    pub conf: f64,
}

/// The training indices for replicate `r`: `train_size` draws with
/// replacement, seeded independently per replicate.
pub fn replicate_indices(seed: u64, replicate: usize, train_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, replicate as u64));
    (0..train_size).map(|_| rng.gen_range(0..train_size)).collect()
}

/// Resample-train-evaluate loop: `evaluate_fn` receives the replicate index
/// and its resampled training indices and returns named metric values. The
/// interval is `mean ± t_{B-1,(1+conf)/2} * sd / sqrt(B)`.
pub fn bootstrap<F>(
    b: usize,
    conf: f64,
    seed: u64,
    train_size: usize,
    mut evaluate_fn: F,
) -> Result<BootstrapResult>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<(String, f64)>>,
{
    if b < 2 {
        return Err(Error::invalid("bootstrap: needs at least 2 replicates"));
    }
    if !(0.0 < conf && conf < 1.0) {
        return Err(Error::invalid("bootstrap: conf must lie in (0, 1)"));
    }
    let mut names: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in 0..b {
        let indices = replicate_indices(seed, r, train_size);
        let metrics = evaluate_fn(r, &indices)?;
        if r == 0 {
            names = metrics.iter().map(|(n, _)| n.clone()).collect();
            values = vec![Vec::with_capacity(b); names.len()];
        }
        if metrics.len() != names.len() {
            return Err(Error::invalid("bootstrap: replicate metric sets differ"));
        }
        for (k, (name, v)) in metrics.iter().enumerate() {
            if *name != names[k] {
                return Err(Error::invalid("bootstrap: replicate metric order differs"));
            }
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "bootstrap: replicate {r} produced non-finite {name}"
                )));
            }
            values[k].push(*v);
        }
    }
    Ok(summarize_bootstrap(&names, &values, conf))
}

/// Interval construction on already-collected replicate values.
pub fn summarize_bootstrap(names: &[String], values: &[Vec<f64>], conf: f64) -> BootstrapResult {
    let b = values.first().map(Vec::len).unwrap_or(0);
    let t = student_t_quantile(b - 1, 0.5 + conf / 2.0);
    let metrics = names
        .iter()
        .zip(values)
        .map(|(name, vs)| {
            let mean = vs.iter().sum::<f64>() / b as f64;
            let var = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (b as f64 - 1.0);
            let sd = var.sqrt();
            let half = t * sd / (b as f64).sqrt();
            MetricCi {
                name: name.clone(),
                point: mean,
                half_width: half,
                lower: mean - half,
                upper: mean + half,
                sd,
            }
        })
        .collect();
    BootstrapResult {
        metrics,
        replicates: b,
        conf,
    }
}

/// Two-sided probability `P(|T| <= t)` for integer degrees of freedom via
/// the classical closed-form series in `theta = arctan(t/sqrt(df))`.
fn student_t_two_sided(t: f64, df: usize) -> f64 {
    let nu = df as f64;
    let theta = (t / nu.sqrt()).atan();
    let (s, c) = theta.sin_cos();
    if df == 1 {
        return 2.0 * theta / std::f64::consts::PI;
    }
    if df % 2 == 1 {
        // odd: (2/pi) [theta + sin * (cos + 2/3 cos^3 + ...)]
        let mut term = c;
        let mut sum = c;
        let mut k = 1.0;
        let c2 = c * c;
        while (2.0 * k + 1.0) <= (nu - 2.0) {
            term *= 2.0 * k / (2.0 * k + 1.0) * c2;
            sum += term;
            k += 1.0;
        }
        2.0 / std::f64::consts::PI * (theta + s * sum)
    } else {
        // even: sin * (1 + 1/2 cos^2 + 1*3/(2*4) cos^4 + ...)
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        let c2 = c * c;
        while 2.0 * k <= (nu - 2.0) {
            term *= (2.0 * k - 1.0) / (2.0 * k) * c2;
            sum += term;
            k += 1.0;
        }
        s * sum
    }
}

/// Inverse CDF of Student's t with integer `df`, by bisection on the exact
/// closed-form CDF.
pub fn student_t_quantile(df: usize, p: f64) -> f64 {
    assert!(df >= 1, "t quantile needs df >= 1");
    assert!(0.0 < p && p < 1.0);
    if p == 0.5 {
        return 0.0;
    }
    if p < 0.5 {
        return -student_t_quantile(df, 1.0 - p);
    }
    let cdf = |t: f64| 0.5 + student_t_two_sided(t, df) / 2.0;
    let mut hi = 1.0;
    while cdf(hi) < p {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---- complexity analysis ----------------------------------------------------

/// One BLEU-1 bin: `[low, high)` (the last bin includes 1.0), the mean
/// reference sentence count of reports falling in it, and how many did.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityBin {
    pub low: f64,
    pub high: f64,
    pub mean_sentences: f64,
    pub count: usize,
}

/// Bin per-report BLEU-1 into ten equal bins over [0, 1] and average the
/// reference sentence counts per bin. Empty bins appear with count 0.
pub fn complexity_table(
    per_report: &[PerReportScore],
    ref_sentence_counts: &HashMap<String, usize>,
) -> Result<Vec<ComplexityBin>> {
    let mut sums = vec![0.0f64; 10];
    let mut counts = vec![0usize; 10];
    for score in per_report {
        let n = *ref_sentence_counts.get(&score.id).ok_or_else(|| {
            Error::invalid(format!("complexity: no sentence count for id {:?}", score.id))
        })?;
        let mut bin = (score.bleu1 * 10.0).floor() as usize;
        if bin > 9 {
            bin = 9; // bleu1 == 1.0 lands in the top bin
        }
        sums[bin] += n as f64;
        counts[bin] += 1;
    }
    Ok((0..10)
        .map(|k| ComplexityBin {
            low: k as f64 / 10.0,
            high: (k + 1) as f64 / 10.0,
            mean_sentences: if counts[k] > 0 {
                sums[k] / counts[k] as f64
            } else {
                0.0
            },
            count: counts[k],
        })
        .collect())
}

pub fn write_complexity_csv<W: Write>(w: &mut W, bins: &[ComplexityBin]) -> Result<()> {
    writeln!(w, "bin_low,bin_high,mean_sentences,count")?;
    for b in bins {
        writeln!(w, "{},{},{},{}", b.low, b.high, b.mean_sentences, b.count)?;
    }
    Ok(())
}

pub fn write_eval_csv<W: Write>(w: &mut W, result: &EvalResult) -> Result<()> {
    writeln!(w, "metric,value")?;
    for (name, v) in result.headline() {
        writeln!(w, "{name},{v}")?;
    }
    Ok(())
}

pub fn write_bootstrap_csv<W: Write>(w: &mut W, result: &BootstrapResult) -> Result<()> {
    writeln!(w, "metric,point,half_width,lower,upper,sd,replicates,conf")?;
    for m in &result.metrics {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            m.name, m.point, m.half_width, m.lower, m.upper, m.sd, result.replicates, result.conf
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, hyp: &str, reference: &str) -> EvalPair {
        EvalPair {
            id: id.into(),
            hyp: hyp.split_whitespace().map(String::from).collect(),
            reference: reference.split_whitespace().map(String::from).collect(),
        }
    }

    #[test]
    fn bleu_identity_is_one_for_all_orders() {
        let pairs = vec![
            pair("a", "the lungs are clear .", "the lungs are clear ."),
            pair("b", "no acute disease .", "no acute disease ."),
        ];
        for n in 1..=4 {
            assert!((bleu_n(&pairs, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_clipping_hand_case() {
        // hyp "the the the the" vs ref "the cat sat": clipped unigram = 1,
        // total = 4, BP = exp(1 - 3/4) ... hyp longer than ref -> BP = 1
        let pairs = vec![pair("a", "the the the the", "the cat sat")];
        let got = bleu_n(&pairs, 1).unwrap();
        assert!((got - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bleu_short_hypothesis_penalized() {
        let pairs = vec![pair("a", "the lungs", "the lungs are clear")];
        let got = bleu_n(&pairs, 1).unwrap();
        // p1 = 1, BP = exp(1 - 4/2) = e^-1
        assert!((got - (-1.0f64).exp()).abs() < 1e-12);
        assert!(got < 1.0);
    }

    #[test]
    fn bleu_zero_when_any_order_empty() {
        let pairs = vec![pair("a", "alpha beta", "alpha gamma")];
        // bigram "alpha beta" never matches -> BLEU-2 = 0
        assert_eq!(bleu_n(&pairs, 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let pairs = vec![pair("a", "x y z", "x y z")];
        assert!((rouge_l(&pairs, 1.2).unwrap() - 1.0).abs() < 1e-12);
        let pairs = vec![pair("a", "p q", "x y")];
        assert_eq!(rouge_l(&pairs, 1.2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_hand_case_two_thirds() {
        // hyp "a b c", ref "a x c": LCS = 2, P = R = 2/3 -> F = 2/3 at any beta
        let pairs = vec![pair("a", "a b c", "a x c")];
        let got = rouge_l(&pairs, 1.2).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_symmetric_when_beta_one() {
        let a = vec![pair("a", "x y z w", "x z")];
        let b = vec![pair("a", "x z", "x y z w")];
        let fa = rouge_l(&a, 1.0).unwrap();
        let fb = rouge_l(&b, 1.0).unwrap();
        assert!((fa - fb).abs() < 1e-12);
    }

    #[test]
    fn lcs_matches_recursive_memo_oracle() {
        fn rec(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == 0 || j == 0 {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i - 1] == b[j - 1] {
                rec(a, b, i - 1, j - 1, memo) + 1
            } else {
                rec(a, b, i - 1, j, memo).max(rec(a, b, i, j - 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        let a: Vec<String> = "the heart is mildly enlarged".split_whitespace().map(String::from).collect();
        let b: Vec<String> = "heart size is enlarged".split_whitespace().map(String::from).collect();
        let mut memo = HashMap::new();
        assert_eq!(lcs_len(&a, &b), rec(&a, &b, a.len(), b.len(), &mut memo));
    }

    #[test]
    fn cider_identity_distinct_corpus_is_ten() {
        let pairs = vec![
            pair("a", "alpha beta gamma delta", "alpha beta gamma delta"),
            pair("b", "epsilon zeta eta theta", "epsilon zeta eta theta"),
            pair("c", "iota kappa lambda mu", "iota kappa lambda mu"),
        ];
        let got = cider(&pairs, 4, false).unwrap();
        assert!((got - 10.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn cider_disjoint_is_zero_and_single_doc_errors() {
        let pairs = vec![
            pair("a", "p q r s", "alpha beta gamma delta"),
            pair("b", "t u v w", "epsilon zeta eta theta"),
        ];
        assert!(cider(&pairs, 4, false).unwrap().abs() < 1e-12);
        assert!(cider(&pairs[..1], 4, false).is_err());
    }

    #[test]
    fn cider_three_document_hand_case() {
        // from-scratch TF-IDF/cosine oracle on unigrams only (n_max = 1)
        let pairs = vec![
            pair("a", "x y", "x z"),
            pair("b", "z z", "z w"),
            pair("c", "w", "w"),
        ];
        // df over refs: x:1, z:2, w:2 -> idf: ln(3/1), ln(3/2), ln(3/2)
        let ix = (3.0f64 / 1.0).ln();
        let iz = (3.0f64 / 2.0).ln();
        let iw = (3.0f64 / 2.0).ln();
        let iy = (3.0f64 / 1.0).ln(); // unseen in refs -> df clamped to 1
        // pair a: hyp vec {x: ix, y: iy}, ref vec {x: ix, z: iz}
        let sim_a = (ix * ix) / ((ix * ix + iy * iy).sqrt() * (ix * ix + iz * iz).sqrt());
        // pair b: hyp {z: 2*iz}, ref {z: iz, w: iw}
        let sim_b = (2.0 * iz * iz) / ((2.0 * iz) * (iz * iz + iw * iw).sqrt());
        // pair c: identical singleton -> 1
        let sim_c = 1.0;
        let expect = 10.0 * (sim_a + sim_b + sim_c) / 3.0;
        let got = cider(&pairs, 1, false).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn evaluate_self_scores() {
        let pairs = vec![
            pair("a", "the lungs are clear .", "the lungs are clear ."),
            pair("b", "heart size is normal .", "heart size is normal ."),
            pair("c", "no pleural effusion .", "no pleural effusion ."),
        ];
        let r = evaluate(&pairs).unwrap();
        for b in r.bleu {
            assert!((b - 1.0).abs() < 1e-9);
        }
        assert!((r.rouge_l - 1.0).abs() < 1e-12);
        assert!((r.cider - 10.0).abs() < 1e-9);
        assert!((r.mean - 15.0 / 6.0).abs() < 1e-9);
        assert_eq!(r.per_report.len(), 3);
        for pr in &r.per_report {
            assert!((pr.bleu1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_corpus_permutation() {
        let mut pairs = vec![
            pair("a", "x y z", "x y w"),
            pair("b", "p q", "p q r"),
            pair("c", "m n o", "m o"),
        ];
        let base = evaluate(&pairs).unwrap();
        pairs.rotate_left(1);
        let rot = evaluate(&pairs).unwrap();
        for (x, y) in base.headline().iter().zip(rot.headline().iter()) {
            assert!((x.1 - y.1).abs() < 1e-12, "{} changed", x.0);
        }
    }

    #[test]
    fn align_matches_and_rejects() {
        let hyps = vec![("a".to_string(), "x".to_string())];
        let refs = vec![("a".to_string(), "x y".to_string())];
        let pairs = align(&hyps, &refs).unwrap();
        assert_eq!(pairs[0].reference.len(), 2);
        let bad_refs = vec![("b".to_string(), "x".to_string())];
        assert!(align(&hyps, &bad_refs).is_err());
    }

    #[test]
    fn t_quantile_matches_frozen_references() {
        // frozen from a 40-digit incomplete-beta inversion
        let cases = [
            (14usize, 0.975, 2.1447866879178038),
            (9, 0.975, 2.2621571627982055),
            (1, 0.975, 12.706204736174705),
            (2, 0.975, 4.302652729749464),
            (29, 0.995, 2.7563859036706055),
            (4, 0.9, 1.5332062740589439),
            (99, 0.975, 1.9842169515864175),
        ];
        for (df, p, expect) in cases {
            let got = student_t_quantile(df, p);
            assert!(
                (got - expect).abs() < 1e-12 * expect.max(1.0),
                "df {df}, p {p}: {got} vs {expect}"
            );
        }
        assert!((student_t_quantile(5, 0.025) + student_t_quantile(5, 0.975)).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_constant_metric_has_zero_width() {
        let r = bootstrap(15, 0.95, 3, 10, |_, _| Ok(vec![("m".to_string(), 0.4)])).unwrap();
        assert!(r.metrics[0].half_width.abs() < 1e-14);
        assert!((r.metrics[0].point - 0.4).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_known_values_match_hand_t_interval() {
        let values: Vec<f64> = (0..15).map(|i| 0.3 + 0.01 * i as f64).collect();
        let vals = values.clone();
        let r = bootstrap(15, 0.95, 3, 10, move |rep, _| {
            Ok(vec![("m".to_string(), vals[rep])])
        })
        .unwrap();
        let mean: f64 = values.iter().sum::<f64>() / 15.0;
        let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 14.0;
        let t = 2.1447866879178038; // t_{14, 0.975}
        let half = t * var.sqrt() / 15.0f64.sqrt();
        assert!((r.metrics[0].point - mean).abs() < 1e-15);
        assert!((r.metrics[0].half_width - half).abs() < 1e-12);
        assert!((r.metrics[0].lower - (mean - half)).abs() < 1e-12);
        assert!((r.metrics[0].upper - (mean + half)).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_same_seed_same_assignments() {
        let a = replicate_indices(9, 3, 20);
        let b = replicate_indices(9, 3, 20);
        let c = replicate_indices(9, 4, 20);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&i| i < 20));
    }

    #[test]
    fn complexity_binning_hand_case() {
        let per = vec![
            PerReportScore { id: "a".into(), bleu1: 0.05 },
            PerReportScore { id: "b".into(), bleu1: 0.05 },
            PerReportScore { id: "c".into(), bleu1: 0.95 },
            PerReportScore { id: "d".into(), bleu1: 1.0 },
            PerReportScore { id: "e".into(), bleu1: 0.55 },
        ];
        let counts: HashMap<String, usize> = [
            ("a".to_string(), 4),
            ("b".to_string(), 6),
            ("c".to_string(), 2),
            ("d".to_string(), 2),
            ("e".to_string(), 3),
        ]
        .into_iter()
        .collect();
        let bins = complexity_table(&per, &counts).unwrap();
        assert_eq!(bins.len(), 10);
        assert_eq!(bins[0].count, 2);
        assert!((bins[0].mean_sentences - 5.0).abs() < 1e-12);
        assert_eq!(bins[5].count, 1);
        assert_eq!(bins[9].count, 2, "1.0 falls into the top bin");
        assert_eq!(bins[3].count, 0);
        assert_eq!(bins[3].mean_sentences, 0.0);
    }

    #[test]
    fn complexity_single_score_single_bin() {
        let per = vec![
            PerReportScore { id: "a".into(), bleu1: 0.42 },
            PerReportScore { id: "b".into(), bleu1: 0.42 },
        ];
        let counts: HashMap<String, usize> =
            [("a".to_string(), 3), ("b".to_string(), 5)].into_iter().collect();
        let bins = complexity_table(&per, &counts).unwrap();
        let populated: Vec<usize> = bins.iter().enumerate().filter(|(_, b)| b.count > 0).map(|(i, _)| i).collect();
        assert_eq!(populated, vec![4]);
        assert!((bins[4].mean_sentences - 4.0).abs() < 1e-12);
    }

    #[test]
    fn text_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hyp.jsonl");
        let records = vec![
            ("r1".to_string(), "the lungs are clear .".to_string()),
            ("r2".to_string(), "no acute disease .".to_string()),
        ];
        save_text_records(&p, &records).unwrap();
        let loaded = load_text_records(&p).unwrap();
        assert_eq!(loaded, records);
    }
}
