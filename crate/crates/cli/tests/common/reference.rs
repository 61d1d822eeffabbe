//! Slow, direct implementations used as oracles for the optimized code.

use std::collections::HashMap;

use qgkit::decode::{MockOracle, TokenId};

// Decoding

pub struct RefConfig {
    pub alpha: f64,
    pub k: usize,
    pub no_repeat_ngram: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Would appending `t` to `out` repeat an n-gram already in `out`?
fn repeats(out: &[TokenId], t: TokenId, n: usize) -> bool {
    if n == 0 || out.len() + 1 < n {
        return false;
    }
    let mut gram = out[out.len() + 1 - n..].to_vec();
    gram.push(t);
    (0..out.len()).any(|s| s + n <= out.len() && out[s..s + n] == gram[..])
}

/// Contrastive search with argmax selection, recomputing everything from the
/// oracle's table at every step. `None` when no token is admissible.
pub fn contrastive_argmax(oracle: &MockOracle, prompt: &[TokenId], c: &RefConfig) -> Option<Vec<TokenId>> {
    let table = oracle.table();
    let eos = table.eos_token;
    let vocab = table.vocab.len() as TokenId;
    let mut history = prompt.to_vec();
    let mut out: Vec<TokenId> = Vec::new();
    let mut context: Vec<Vec<f64>> = Vec::new();
    for _ in 0..c.max_tokens {
        let entry = oracle.entry(&history);
        context.push(entry.hidden.clone());
        let mut order: Vec<TokenId> = (0..vocab).collect();
        order.sort_by(|&a, &b| {
            entry.logprobs[b as usize]
                .partial_cmp(&entry.logprobs[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let admissible: Vec<TokenId> = order
            .into_iter()
            .filter(|&t| !repeats(&out, t, c.no_repeat_ngram))
            .filter(|&t| !(t == eos && out.len() + 1 < c.min_tokens))
            .take(c.k)
            .collect();
        let mut best: Option<(TokenId, f64)> = None;
        for t in admissible {
            let mut next = history.clone();
            next.push(t);
            let h = oracle.entry(&next).hidden;
            let penalty = context.iter().map(|p| cos(&h, p)).fold(f64::NEG_INFINITY, f64::max);
            let score = (1.0 - c.alpha) * entry.logprobs[t as usize].exp() - c.alpha * penalty;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((t, score));
            }
        }
        let (t, _) = best?;
        out.push(t);
        history.push(t);
        if t == eos {
            break;
        }
    }
    Some(out)
}

/// Plain greedy decoding: the most likely token, lowest id on ties.
pub fn greedy(oracle: &MockOracle, prompt: &[TokenId], max_tokens: usize) -> Vec<TokenId> {
    let eos = oracle.table().eos_token;
    let mut history = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_tokens {
        let lp = oracle.entry(&history).logprobs;
        let mut best = 0;
        for t in 1..lp.len() {
            if lp[t] > lp[best] {
                best = t;
            }
        }
        let t = best as TokenId;
        out.push(t);
        history.push(t);
        if t == eos {
            break;
        }
    }
    out
}

// Metrics

fn count_occurrences(seq: &[&str], gram: &[&str]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

/// Corpus BLEU-4 by explicit enumeration of every candidate n-gram position.
pub fn bleu4(pairs: &[(Vec<&str>, Vec<&str>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in pairs {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            if c.len() < n {
                continue;
            }
            let mut seen: Vec<&[&str]> = Vec::new();
            for i in 0..=c.len() - n {
                let gram = &c[i..i + n];
                den[n - 1] += 1;
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                num[n - 1] += count_occurrences(c, gram).min(count_occurrences(r, gram));
            }
        }
    }
    let mut product = 1.0;
    for n in 0..4 {
        let d = den[n].max(1) as f64;
        let p = if num[n] == 0 { 1e-9 / d } else { num[n] as f64 / d };
        product *= p;
    }
    let bp = if c_len >= r_len {
        1.0
    } else if c_len == 0 {
        0.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * product.powf(0.25)
}

fn lcs(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn rouge_l(c: &[&str], r: &[&str]) -> f64 {
    let l = lcs(c, r, 0, 0, &mut HashMap::new());
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

/// METEOR (exact matches only) over every injective partial matching.
pub fn meteor(c: &[&str], r: &[&str]) -> f64 {
    fn walk(c: &[&str], r: &[&str], i: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = cur.len();
            let chunks = if m == 0 {
                0
            } else {
                1 + cur.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
            };
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        walk(c, r, i + 1, used, cur, best);
        for j in 0..r.len() {
            if !used[j] && c[i] == r[j] {
                used[j] = true;
                cur.push((i, j));
                walk(c, r, i + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    walk(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    let (m, chunks) = best;
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

// Retrieval

/// Indices of the `k` most cosine-similar rows, earlier rows first on ties.
pub fn top_k(rows: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = rows.iter().enumerate().map(|(i, v)| (i, cos(v, query))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

// Early stopping

/// "Validation loss does not improve over the most recent `patience` epochs."
pub fn stop_rule(losses: &[f64], patience: usize) -> bool {
    if losses.len() <= patience {
        return false;
    }
    let (before, recent) = losses.split_at(losses.len() - patience);
    let best_before = before.iter().copied().fold(f64::INFINITY, f64::min);
    recent.iter().all(|&l| l >= best_before)
}
