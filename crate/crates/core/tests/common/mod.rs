//! Shared helpers: a deliberately naive metric oracle and the golden corpus.
#![allow(dead_code)]

use std::path::PathBuf;

use rust_stemmers::{Algorithm, Stemmer};

pub fn golden() -> Vec<(Vec<String>, Vec<String>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden");
    let read = |f: &str| -> Vec<Vec<String>> {
        std::fs::read_to_string(dir.join(f))
            .unwrap()
            .lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    let (h, r) = (read("hyp.txt"), read("ref.txt"));
    assert_eq!(h.len(), r.len());
    h.into_iter().zip(r).collect()
}

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Every contiguous window of length n, listed by index.
fn windows(x: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= x.len() {
        let mut g = Vec::new();
        for k in 0..n {
            g.push(x[i + k].clone());
        }
        out.push(g);
        i += 1;
    }
    out
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// (clipped matches, hypothesis n-gram count) by linear scans.
pub fn clipped(h: &[String], r: &[String], n: usize) -> (usize, usize) {
    let hg = windows(h, n);
    let rg = windows(r, n);
    let mut seen: Vec<Vec<String>> = Vec::new();
    let mut total = 0;
    for g in &hg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g.clone());
        total += occurrences(&hg, g).min(occurrences(&rg, g));
    }
    (total, hg.len())
}

fn bleu_from(m: &[usize], t: &[usize], hl: usize, rl: usize) -> f64 {
    if hl == 0 || m[0] == 0 {
        return 0.0;
    }
    let n = m.len() as f64;
    let mut prod = 1.0;
    for k in 0..m.len() {
        let p = if m[k] == 0 {
            // only reachable for k > 0: add one to both counts
            1.0 / (t[k] as f64 + 1.0)
        } else {
            m[k] as f64 / t[k] as f64
        };
        prod *= p.powf(1.0 / n);
    }
    let bp = if hl >= rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    bp * prod
}

pub fn bleu(h: &[String], r: &[String], n: usize) -> f64 {
    let mut m = Vec::new();
    let mut t = Vec::new();
    for k in 1..=n {
        let (a, b) = clipped(h, r, k);
        m.push(a);
        t.push(b);
    }
    bleu_from(&m, &t, h.len(), r.len())
}

pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
    let mut m = vec![0; n];
    let mut t = vec![0; n];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in pairs {
        for k in 1..=n {
            let (a, b) = clipped(h, r, k);
            m[k - 1] += a;
            t[k - 1] += b;
        }
        hl += h.len();
        rl += r.len();
    }
    bleu_from(&m, &t, hl, rl)
}

fn is_subsequence(small: &[&String], big: &[String]) -> bool {
    let mut j = 0;
    for s in small {
        while j < big.len() && &big[j] != *s {
            j += 1;
        }
        if j == big.len() {
            return false;
        }
        j += 1;
    }
    true
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 20, "brute force only for short sequences");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

pub fn rouge(h: &[String], r: &[String]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let l = lcs(h, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

/// Exact pass then stem pass; each hypothesis word, left to right, takes
/// the first unused reference word it matches.
pub fn meteor(h: &[String], r: &[String]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let mut link: Vec<Option<usize>> = vec![None; h.len()];
    let mut taken = vec![false; r.len()];
    for stage in 0..2 {
        for i in 0..h.len() {
            if link[i].is_some() {
                continue;
            }
            for j in 0..r.len() {
                let same = if stage == 0 {
                    h[i] == r[j]
                } else {
                    stemmer.stem(&h[i]) == stemmer.stem(&r[j])
                };
                if !taken[j] && same {
                    taken[j] = true;
                    link[i] = Some(j);
                    break;
                }
            }
        }
    }
    let aligned: Vec<(usize, usize)> = (0..h.len()).filter_map(|i| link[i].map(|j| (i, j))).collect();
    let m = aligned.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 1;
    for k in 1..m {
        let (a, b) = (aligned[k - 1], aligned[k]);
        if b.0 != a.0 + 1 || b.1 != a.1 + 1 {
            chunks += 1;
        }
    }
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    let frag = chunks as f64 / m as f64;
    f * (1.0 - 0.5 * frag * frag * frag)
}
pub mod criteria;
