//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Written for clarity on tiny inputs, never for speed.
#![allow(dead_code)]

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over a square similarity matrix.
pub fn info_nce(sims: &[Vec<f64>], tau: f64) -> f64 {
    let b = sims.len();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|k| sims[i][k] / tau).collect();
        let col: Vec<f64> = (0..b).map(|k| sims[k][i] / tau).collect();
        total += (sims[i][i] / tau - log_sum_exp(&row)) + (sims[i][i] / tau - log_sum_exp(&col));
    }
    -total / (2.0 * b as f64)
}

pub fn consistency(s1: &[f64], s2: &[f64], tau: f64) -> f64 {
    s1.iter().zip(s2).map(|(a, b)| (a / tau - b / tau) * (a / tau - b / tau)).sum()
}

pub fn unit_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn dot_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// The unique ordering with non-increasing scores and ascending index on
/// ties, found by scanning every permutation.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let valid: Vec<Vec<usize>> = permutations(row.len())
        .into_iter()
        .filter(|p| {
            p.windows(2)
                .all(|w| row[w[0]] > row[w[1]] || (row[w[0]] == row[w[1]] && w[0] < w[1]))
        })
        .collect();
    assert_eq!(valid.len(), 1);
    valid.into_iter().next().unwrap()
}

pub fn recall(scores: &[Vec<f64>], gold: &[usize], k: usize) -> f64 {
    let hits = scores
        .iter()
        .zip(gold)
        .filter(|(row, g)| ranking(row)[..k].contains(g))
        .count();
    100.0 * hits as f64 / scores.len() as f64
}

pub fn map(scores: &[Vec<f64>], relevant: &[Vec<usize>], k: usize) -> Option<f64> {
    let mut aps = Vec::new();
    for (row, rel) in scores.iter().zip(relevant) {
        if rel.is_empty() {
            continue;
        }
        let order = ranking(row);
        let mut ap = 0.0;
        for rank in 1..=k {
            if rel.contains(&order[rank - 1]) {
                let in_top = order[..rank].iter().filter(|j| rel.contains(j)).count();
                ap += in_top as f64 / rank as f64;
            }
        }
        aps.push(ap / rel.len().min(k) as f64);
    }
    if aps.is_empty() {
        None
    } else {
        Some(100.0 * aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn grams<'a>(t: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count<T: PartialEq>(xs: &[T], x: &T) -> usize {
    xs.iter().filter(|y| *y == x).count()
}

pub fn bleu(c: &str, r: &str, n_max: usize) -> f64 {
    let (c, r) = (words(c), words(r));
    if c.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 1..=n_max {
        let cg = grams(&c, n);
        let rg = grams(&r, n);
        let mut seen: Vec<&Vec<&str>> = Vec::new();
        let mut m = 0;
        for g in &cg {
            if !seen.contains(&g) {
                seen.push(g);
                m += count(&cg, g).min(count(&rg, g));
            }
        }
        let p = if n == 1 {
            m as f64 / cg.len() as f64
        } else {
            (m as f64 + 1.0) / (cg.len() as f64 + 1.0)
        };
        prod *= p;
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    100.0 * bp * prod.powf(1.0 / n_max as f64)
}

fn f1(o: usize, lc: usize, lr: usize) -> f64 {
    if o == 0 {
        return 0.0;
    }
    let (p, r) = (o as f64 / lc as f64, o as f64 / lr as f64);
    100.0 * 2.0 * p * r / (p + r)
}

pub fn rouge1(c: &str, r: &str) -> f64 {
    let (c, r) = (words(c), words(r));
    let mut rr = r.clone();
    let mut o = 0;
    for w in &c {
        if let Some(i) = rr.iter().position(|x| x == w) {
            rr.remove(i);
            o += 1;
        }
    }
    f1(o, c.len(), r.len())
}

fn is_subsequence(s: &[&str], t: &[&str]) -> bool {
    let mut it = t.iter();
    s.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by enumerating every candidate subsequence.
pub fn rouge_l(c: &str, r: &str) -> f64 {
    let (c, r) = (words(c), words(r));
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let sub: Vec<&str> = (0..c.len()).filter(|i| mask & (1 << i) != 0).map(|i| c[i]).collect();
        if sub.len() > best && is_subsequence(&sub, &r) {
            best = sub.len();
        }
    }
    f1(best, c.len(), r.len())
}

fn chunks(align: &[Option<usize>]) -> usize {
    let mut n = 0;
    for i in 0..align.len() {
        if let Some(j) = align[i] {
            let continues = i > 0 && align[i - 1].is_some_and(|p| p + 1 == j);
            if !continues {
                n += 1;
            }
        }
    }
    n
}

fn alignments(c: &[&str], r: &[&str], i: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
    if i == c.len() {
        out.push(cur.clone());
        return;
    }
    cur.push(None);
    alignments(c, r, i + 1, used, cur, out);
    cur.pop();
    for j in 0..r.len() {
        if !used[j] && r[j] == c[i] {
            used[j] = true;
            cur.push(Some(j));
            alignments(c, r, i + 1, used, cur, out);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Maximum match count and, among maximum alignments, the fewest chunks.
pub fn meteor_alignment_stats(c: &str, r: &str) -> (usize, usize) {
    let (c, r) = (words(c), words(r));
    let mut all = Vec::new();
    alignments(&c, &r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut all);
    let m = all.iter().map(|a| a.iter().flatten().count()).max().unwrap_or(0);
    let ch = all
        .iter()
        .filter(|a| a.iter().flatten().count() == m)
        .map(|a| chunks(a))
        .min()
        .unwrap_or(0);
    (m, ch)
}

pub fn meteor_from(m: usize, ch: usize, lc: usize, lr: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / lc as f64;
    let r = m as f64 / lr as f64;
    let f = p * r / (0.9 * p + 0.1 * r);
    100.0 * f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3))
}

pub fn meteor(c: &str, r: &str) -> f64 {
    let (m, ch) = meteor_alignment_stats(c, r);
    meteor_from(m, ch, words(c).len(), words(r).len())
}

pub fn accuracy(p: &[&str], g: &[&str]) -> f64 {
    let mut hits = 0;
    for i in 0..p.len() {
        if p[i].to_lowercase().split_whitespace().collect::<Vec<_>>() == g[i].to_lowercase().split_whitespace().collect::<Vec<_>>() {
            hits += 1;
        }
    }
    100.0 * hits as f64 / p.len() as f64
}
