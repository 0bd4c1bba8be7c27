//! Slow, direct reimplementations of the metrics used as test oracles, and
//! small builders shared by the integration tests.

#![allow(dead_code)]

use rerank_core::metrics::stem;

/// All n-grams of `toks`, in order, as owned vectors.
fn ngrams(toks: &[&str], n: usize) -> Vec<Vec<String>> {
    if toks.len() < n {
        return Vec::new();
    }
    (0..=toks.len() - n)
        .map(|i| toks[i..i + n].iter().map(|s| s.to_string()).collect())
        .collect()
}

/// Clipped matches by greedily striking out reference n-grams one at a time.
fn clipped(cand: &[Vec<String>], reference: &[Vec<String>]) -> usize {
    let mut pool: Vec<Option<&Vec<String>>> = reference.iter().map(Some).collect();
    let mut hits = 0;
    for g in cand {
        if let Some(slot) = pool.iter_mut().find(|s| s.is_some_and(|r| r == g)) {
            *slot = None;
            hits += 1;
        }
    }
    hits
}

/// (matches, totals) per order 1..=4 and the two lengths.
pub fn bleu_counts(cand: &[&str], reference: &[&str]) -> ([usize; 4], [usize; 4], usize, usize) {
    let mut m = [0; 4];
    let mut t = [0; 4];
    for n in 1..=4 {
        let c = ngrams(cand, n);
        t[n - 1] = c.len();
        m[n - 1] = clipped(&c, &ngrams(reference, n));
    }
    (m, t, cand.len(), reference.len())
}

fn bleu_from(m: [usize; 4], t: [usize; 4], c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let mut prod = 1.0;
    let mut orders = 0;
    for n in 0..4 {
        if t[n] == 0 {
            break;
        }
        let num = if m[n] == 0 { 0.1 } else { m[n] as f64 };
        prod *= num / t[n] as f64;
        orders += 1;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * prod.powf(1.0 / orders as f64)
}

pub fn bleu(cand: &[&str], reference: &[&str]) -> f64 {
    let (m, t, c, r) = bleu_counts(cand, reference);
    bleu_from(m, t, c, r)
}

pub fn corpus_bleu(pairs: &[(Vec<&str>, Vec<&str>)]) -> f64 {
    let (mut m, mut t, mut c, mut r) = ([0; 4], [0; 4], 0, 0);
    for (cand, reference) in pairs {
        let (pm, pt, pc, pr) = bleu_counts(cand, reference);
        for n in 0..4 {
            m[n] += pm[n];
            t[n] += pt[n];
        }
        c += pc;
        r += pr;
    }
    bleu_from(m, t, c, r)
}

/// LCS by plain recursion; only for short inputs.
pub fn lcs(a: &[&str], b: &[&str]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) => {
            if x == y {
                1 + lcs(ra, rb)
            } else {
                lcs(ra, b).max(lcs(a, rb))
            }
        }
        _ => 0,
    }
}

pub fn rouge_l(cand: &[&str], reference: &[&str]) -> f64 {
    let l = lcs(cand, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best alignment over every partial injection of candidate positions into
/// reference positions: most matches, then most exact matches, then fewest
/// chunks. Returns (matches, chunks).
pub fn meteor_alignment(cand: &[&str], reference: &[&str]) -> (usize, usize) {
    let cs: Vec<String> = cand.iter().map(|t| stem(t)).collect();
    let rs: Vec<String> = reference.iter().map(|t| stem(t)).collect();
    let mut best = (0usize, 0usize, usize::MAX);
    let mut align = vec![None; cand.len()];
    let mut used = vec![false; reference.len()];
    #[allow(clippy::too_many_arguments)]
    fn go(
        i: usize,
        cand: &[&str],
        reference: &[&str],
        cs: &[String],
        rs: &[String],
        align: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut (usize, usize, usize),
    ) {
        if i == cand.len() {
            let matches = align.iter().flatten().count();
            let exact = align
                .iter()
                .enumerate()
                .filter(|(k, a)| a.is_some_and(|j| cand[*k] == reference[j]))
                .count();
            let mut chunks = 0;
            let mut prev: Option<usize> = None;
            for a in align.iter() {
                if let Some(j) = a {
                    if prev.is_none_or(|p| p + 1 != *j) {
                        chunks += 1;
                    }
                }
                prev = *a;
            }
            let better = (matches, exact) > (best.0, best.1) || ((matches, exact) == (best.0, best.1) && chunks < best.2);
            if better {
                *best = (matches, exact, chunks);
            }
            return;
        }
        go(i + 1, cand, reference, cs, rs, align, used, best);
        for j in 0..reference.len() {
            if !used[j] && cs[i] == rs[j] {
                used[j] = true;
                align[i] = Some(j);
                go(i + 1, cand, reference, cs, rs, align, used, best);
                align[i] = None;
                used[j] = false;
            }
        }
    }
    go(0, cand, reference, &cs, &rs, &mut align, &mut used, &mut best);
    (best.0, if best.0 == 0 { 0 } else { best.2 })
}

pub fn meteor(cand: &[&str], reference: &[&str]) -> f64 {
    let (m, chunks) = meteor_alignment(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}
