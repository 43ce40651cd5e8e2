//! Brute-force references shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::io::Write;

use reid_core::eval::Label;

/// Writes a criterion verdict straight to stderr, past output capture.
pub fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "ACCEPTANCE [{tag}] {name}: {detail}");
}

/// Every cell that strictly beats all other cells of its row and of its column.
pub fn brute_mutual(a: &[Vec<f64>]) -> BTreeSet<(usize, usize)> {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut out = BTreeSet::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = a[r][c];
            let row_max = (0..cols).all(|c2| c2 == c || a[r][c2] < v);
            let col_max = (0..rows).all(|r2| r2 == r || a[r2][c] < v);
            if row_max && col_max {
                out.insert((r, c));
            }
        }
    }
    out
}

pub struct BruteMetrics {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries: usize,
    pub skipped: usize,
}

/// Selection-sort ranking by plain Euclidean distance, ties to the lower
/// gallery index, then CMC and mAP by direct counting.
pub fn brute_metrics(
    q: &[Vec<f64>],
    ql: &[Label],
    g: &[Vec<f64>],
    gl: &[Label],
    filter: bool,
    ks: &[usize],
) -> BruteMetrics {
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    let mut skipped = 0;
    for (qi, qv) in q.iter().enumerate() {
        let mut pool: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .filter(|(gi, _)| !(filter && gl[*gi].id == ql[qi].id && gl[*gi].camera == ql[qi].camera))
            .map(|(gi, gv)| {
                let d: f64 = qv.iter().zip(gv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (d, gi)
            })
            .collect();
        let mut ranked = Vec::new();
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let (d, gi) = pool[i];
                if d < pool[best].0 || (d == pool[best].0 && gi < pool[best].1) {
                    best = i;
                }
            }
            ranked.push(pool.remove(best).1);
        }
        let rel: Vec<bool> = ranked.iter().map(|&gi| gl[gi].id == ql[qi].id).collect();
        let total_rel = rel.iter().filter(|&&r| r).count();
        if total_rel == 0 {
            skipped += 1;
            continue;
        }
        first_hits.push(rel.iter().position(|&r| r).unwrap());
        let mut sum = 0.0;
        for k in 1..=rel.len() {
            if rel[k - 1] {
                let in_top = rel[..k].iter().filter(|&&r| r).count();
                sum += in_top as f64 / k as f64;
            }
        }
        aps.push(sum / total_rel as f64);
    }
    let n = first_hits.len();
    let cmc = ks
        .iter()
        .map(|&k| {
            if n == 0 {
                0.0
            } else {
                first_hits.iter().filter(|&&f| f < k).count() as f64 / n as f64
            }
        })
        .collect();
    let map = if n == 0 { 0.0 } else { aps.iter().sum::<f64>() / n as f64 };
    BruteMetrics {
        cmc,
        map,
        queries: n,
        skipped,
    }
}

/// Ridders' extrapolated central difference of `f` at zero. `f` returns
/// `None` where it is not smooth, which aborts the estimate.
pub fn ridders(mut f: impl FnMut(f64) -> Option<f64>, h0: f64) -> Option<f64> {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut hh = h0;
    a[0][0] = (f(hh)? - f(-hh)?) / (2.0 * hh);
    let mut err = f64::MAX;
    let mut ans = a[0][0];
    for i in 1..NTAB {
        hh /= CON;
        a[0][i] = (f(hh)? - f(-hh)?) / (2.0 * hh);
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let errt = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if errt <= err {
                err = errt;
                ans = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Some(ans)
}
