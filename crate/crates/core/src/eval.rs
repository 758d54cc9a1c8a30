//! Corpus BLEU and the BLEU-versus-noise degradation harness.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{inject_corpus, NoiseKind, NoiseSpec};
use crate::rng::derive_seed;

pub const MAX_ORDER: usize = 4;
/// Stand-in for a zero match count inside the log-mean.
pub const ZERO_MATCH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    pub bleu: f64,
    /// Modified n-gram precisions for orders 1..=4; `None` when the
    /// hypotheses contain no n-grams of that order.
    pub precisions: [Option<f64>; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Standard 4-gram corpus BLEU over whitespace tokens.
///
/// Orders for which the hypotheses have no n-grams at all are left out of
/// the geometric mean, so short corpora still get a score.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuScore> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let mut precisions = [None; MAX_ORDER];
    if hyp_len == 0 {
        let bleu = if ref_len == 0 { 100.0 } else { 0.0 };
        return Ok(BleuScore {
            bleu,
            precisions,
            brevity_penalty: if ref_len == 0 { 1.0 } else { 0.0 },
            hyp_len,
            ref_len,
        });
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        let m = if matches[n] == 0 { ZERO_MATCH } else { matches[n] as f64 };
        let p = m / totals[n] as f64;
        precisions[n] = Some(matches[n] as f64 / totals[n] as f64);
        log_sum += p.ln();
        orders += 1;
    }
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = (100.0 * brevity_penalty * (log_sum / orders as f64).exp()).clamp(0.0, 100.0);
    Ok(BleuScore {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub p: f64,
    pub bleu: f64,
}

/// BLEU as a function of noise probability, averaged over noise seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegradationCurve {
    pub model_id: String,
    pub kind: NoiseKind,
    pub points: Vec<CurvePoint>,
    /// `(seed, bleu per p)` before averaging.
    pub per_seed: Vec<(u64, Vec<f64>)>,
}

/// The usual grid: 0.0, 0.1, ..., 1.0.
pub fn default_ps() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

impl DegradationCurve {
    pub fn clean(&self) -> f64 {
        self.points.first().map(|p| p.bleu).unwrap_or(0.0)
    }

    pub fn at(&self, p: f64) -> Option<f64> {
        self.points.iter().find(|c| (c.p - p).abs() < 1e-12).map(|c| c.bleu)
    }

    /// Fractional BLEU loss at `p` relative to the clean point.
    pub fn relative_degradation(&self, p: f64) -> Option<f64> {
        let clean = self.clean();
        let at = self.at(p)?;
        if clean <= 0.0 {
            return Some(0.0);
        }
        Some((clean - at) / clean)
    }

    /// CSV rows `p,bleu,model,kind,seed`: one row per seed and p, then the
    /// mean rows with seed `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,bleu,model,kind,seed\n");
        self.append_csv_rows(&mut out);
        out
    }

    pub fn append_csv_rows(&self, out: &mut String) {
        for (seed, bleus) in &self.per_seed {
            for (pt, b) in self.points.iter().zip(bleus) {
                let _ = writeln!(
                    out,
                    "{:.1},{:.4},{},{},{}",
                    pt.p,
                    b,
                    self.model_id,
                    self.kind.name(),
                    seed
                );
            }
        }
        for pt in &self.points {
            let _ = writeln!(
                out,
                "{:.1},{:.4},{},{},mean",
                pt.p,
                pt.bleu,
                self.model_id,
                self.kind.name()
            );
        }
    }
}

/// Noises the sources at every p in `ps` for every seed, translates with
/// `translate`, and scores against `refs`.
///
/// `base` provides the injector kind and its table or marks; its `p` and
/// `seed` are replaced per point. Noise streams come from
/// `derive_seed(seed, p)` and the sentence index.
pub fn degradation_sweep<F>(
    translate: &mut F,
    sources: &[String],
    refs: &[String],
    base: &NoiseSpec,
    ps: &[f64],
    seeds: &[u64],
    model_id: &str,
) -> Result<DegradationCurve>
where
    F: FnMut(&[String]) -> Result<Vec<String>>,
{
    if ps.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("degradation sweep needs at least one p and one seed"));
    }
    if ps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("p values must be strictly increasing"));
    }
    let clean = corpus_bleu(&translate(sources)?, refs)?.bleu;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut row = Vec::with_capacity(ps.len());
        for &p in ps {
            if p == 0.0 {
                row.push(clean);
                continue;
            }
            let mut spec = base.clone();
            spec.p = p;
            spec.seed = derive_seed(seed, p.to_bits());
            let (noised, _) = inject_corpus(sources, &spec)?;
            row.push(corpus_bleu(&translate(&noised)?, refs)?.bleu);
        }
        per_seed.push((seed, row));
    }
    let points = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| CurvePoint {
            p,
            bleu: per_seed.iter().map(|(_, r)| r[i]).sum::<f64>() / per_seed.len() as f64,
        })
        .collect();
    Ok(DegradationCurve {
        model_id: model_id.to_string(),
        kind: base.kind,
        points,
        per_seed,
    })
}

/// `bleu_a - bleu_b` at each p.
pub fn delta_table(a: &DegradationCurve, b: &DegradationCurve) -> Result<Vec<(f64, f64)>> {
    if a.points.len() != b.points.len() || a.points.iter().zip(&b.points).any(|(x, y)| x.p != y.p) {
        return Err(Error::invalid("curves do not share a p grid"));
    }
    Ok(a.points
        .iter()
        .zip(&b.points)
        .map(|(x, y)| (x.p, x.bleu - y.bleu))
        .collect())
}

pub fn delta_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("p,delta\n");
    for (p, d) in rows {
        let _ = writeln!(out, "{p:.1},{d:.4}");
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A static SVG line chart of BLEU against p, one line per curve.
pub fn curves_svg(title: &str, curves: &[&DegradationCurve]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let ymax = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.bleu))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let ymax = (ymax / 10.0).ceil() * 10.0;
    let x = |p: f64| m + p * (w - 2.0 * m);
    let y = |b: f64| h - m - b / ymax * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{m} {} H{} M{m} {} V{m}" stroke="black" fill="none"/>"#,
        h - m,
        w - m,
        h - m
    );
    for i in 0..=5 {
        let p = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{p:.1}</text>"#,
            x(p),
            h - m + 16.0
        );
        let b = ymax * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{b:.0}</text>"#,
            m - 6.0,
            y(b) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">p</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">BLEU</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.p), y(p.bleu)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{} ({})</text>"#,
            w - m - 120.0,
            m + 14.0 * i as f64,
            escape(&c.model_id),
            c.kind.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::CharTable;

    fn bleu(h: &[&str], r: &[&str]) -> f64 {
        corpus_bleu(h, r).unwrap().bleu
    }

    #[test]
    fn micro_cases() {
        assert_eq!(bleu(&["the cat sat on the mat"], &["the cat sat on the mat"]), 100.0);
        // all four orders match, brevity penalty exp(1 - 5/4)
        assert!((bleu(&["a b c d"], &["a b c d e"]) - 77.8801).abs() < 1e-4);
        // clipped unigram 1/4, higher orders smoothed, no brevity penalty
        let want =
            100.0 * (((0.25f64).ln() + (1e-9f64 / 3.0).ln() + (1e-9f64 / 2.0).ln() + (1e-9f64).ln()) / 4.0).exp();
        let got = bleu(&["the the the the"], &["the cat"]);
        assert!((got - want).abs() < 1e-4 && got > 0.0);
        // two sentences pooled: 5/6, 3/4, 1/2, smoothed 1e-9/1
        let want = 100.0 * (((5.0f64 / 6.0).ln() + (0.75f64).ln() + (0.5f64).ln() + (1e-9f64).ln()) / 4.0).exp();
        assert!((bleu(&["a b", "c d e f"], &["a b", "c d e g"]) - want).abs() < 1e-4);
        // only two orders present
        assert!((bleu(&["a b"], &["a b c d e"]) - 100.0 * (-1.5f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn edge_cases() {
        assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
        assert!(corpus_bleu::<&str, &str>(&[], &[]).is_err());
        assert_eq!(bleu(&[""], &[""]), 100.0);
        assert_eq!(bleu(&[""], &["a b"]), 0.0);
        let s = bleu(&["w x y z"], &["z y x w"]);
        assert!(s > 0.0 && s.is_finite());
    }

    #[test]
    fn truncation_lowers_score() {
        let full = ["one two three four five"];
        assert!(bleu(&["one two three four"], &full) < bleu(&full, &full));
    }

    fn curve(points: &[(f64, f64)]) -> DegradationCurve {
        DegradationCurve {
            model_id: "m".into(),
            kind: NoiseKind::Swap,
            points: points.iter().map(|&(p, bleu)| CurvePoint { p, bleu }).collect(),
            per_seed: vec![],
        }
    }

    #[test]
    fn deltas() {
        let a = curve(&[(0.0, 30.0), (0.5, 20.0)]);
        let b = curve(&[(0.0, 20.0), (0.5, 20.0)]);
        assert_eq!(delta_table(&a, &b).unwrap(), vec![(0.0, 10.0), (0.5, 0.0)]);
        assert!(delta_table(&a, &a).unwrap().iter().all(|r| r.1 == 0.0));
        assert!(delta_table(&a, &curve(&[(0.0, 1.0)])).is_err());
        assert_eq!(delta_csv(&[(0.0, 10.0)]), "p,delta\n0.0,10.0000\n");
    }

    #[test]
    fn sweep_contracts() {
        let src: Vec<String> = ["the quick fox", "jumps over dogs", "lazy brown cat"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let refs = src.clone();
        let mut identity = |x: &[String]| Ok(x.to_vec());
        let swap = NoiseSpec::new(NoiseKind::Swap, 0.0, 0);
        let ps = default_ps();
        let c = degradation_sweep(&mut identity, &src, &refs, &swap, &ps, &[1, 2], "id").unwrap();
        assert_eq!(c.points[0].bleu, 100.0);
        assert!(c.at(1.0).unwrap() < 100.0);
        let again = degradation_sweep(&mut identity, &src, &refs, &swap, &ps, &[1, 2], "id").unwrap();
        assert_eq!(c, again);

        // no source character is in the table, so the injector never fires
        let mut table = CharTable::new();
        table.insert('ж', 'x').unwrap();
        let empty = NoiseSpec::new(NoiseKind::MapChars, 0.0, 0).with_table(table);
        let flat = degradation_sweep(&mut identity, &src, &refs, &empty, &ps, &[1], "id").unwrap();
        assert!(flat.points.iter().all(|p| p.bleu == 100.0));
        assert!(c
            .to_csv()
            .starts_with("p,bleu,model,kind,seed\n0.0,100.0000,id,swap,1\n"));
        assert!(curves_svg("t", &[&c, &flat]).contains("<polyline"));
        assert!(degradation_sweep(&mut identity, &src, &refs, &swap, &[0.5, 0.1], &[1], "id").is_err());
    }
}
