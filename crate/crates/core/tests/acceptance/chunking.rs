use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use collabtrace_core::chunker::{build_hierarchy, chunk_all, Origin};
use collabtrace_core::text::tokenize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WINDOWS: [usize; 3] = [20, 50, 100];

/// Number of chunks a text of `n` words yields: one, or enough further
/// strides to reach the end.
fn expected_count(n: usize, w: usize) -> usize {
    let s = w / 2;
    if n <= w {
        1
    } else {
        1 + (n - w).div_ceil(s)
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let n = rng.random_range(1..=5000);
    let vocab = rng.random_range(3..400);
    let mut canon = Vec::with_capacity(n);
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..vocab);
        let word = format!("w{k}");
        canon.push(word.clone());
        raw.push(match rng.random_range(0..6) {
            0 => format!("{}.", word.to_uppercase()),
            1 => format!("({word},"),
            _ => word,
        });
    }
    (raw.join(" "), canon)
}

pub fn check() -> Result<String, String> {
    let mut elapsed = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let origin = Origin::Report {
        participant_id: "P".into(),
    };
    let (mut n_chunks, mut n_edges, mut words) = (0usize, 0usize, 0usize);
    for case in 0..500 {
        let (text, canon) = random_text(&mut rng);
        let n = canon.len();
        words += n;
        let timer = Instant::now();
        let tokens = tokenize(&text);
        ensure!(tokens.len() == n, "case {case}: {} tokens for {n} words", tokens.len());
        let levels = chunk_all(&tokens, &WINDOWS, &origin).map_err(|e| e.to_string())?;
        let edges = build_hierarchy(&levels).map_err(|e| e.to_string())?;
        elapsed += timer.elapsed().as_secs_f64();
        for (chunks, &w) in levels.iter().zip(&WINDOWS) {
            let s = w / 2;
            ensure!(
                chunks.len() == expected_count(n, w),
                "case {case} w{w} n={n}: {} chunks, oracle {}",
                chunks.len(),
                expected_count(n, w)
            );
            n_chunks += chunks.len();
            let mut covered = vec![false; n];
            for (k, c) in chunks.iter().enumerate() {
                ensure!(
                    c.start_index == k * s,
                    "case {case} w{w}: chunk {k} starts at {}",
                    c.start_index
                );
                let terminus = k + 1 == chunks.len();
                ensure!(
                    c.word_count == w.min(n - c.start_index),
                    "case {case} w{w}: chunk {k} has {} words",
                    c.word_count
                );
                if !terminus {
                    ensure!(c.end_index() < n, "case {case} w{w}: chunk {k} reaches the end early");
                    let next = &chunks[k + 1];
                    let overlap = c.end_index() - next.start_index;
                    ensure!(
                        overlap == s,
                        "case {case} w{w}: overlap {overlap} between chunks {k} and {}",
                        k + 1
                    );
                } else {
                    ensure!(
                        c.end_index() == n,
                        "case {case} w{w}: last chunk ends at {}",
                        c.end_index()
                    );
                }
                covered[c.start_index..c.end_index()].iter_mut().for_each(|x| *x = true);
                let want: HashSet<&str> = canon[c.start_index..c.end_index()].iter().map(String::as_str).collect();
                let got: HashSet<&str> = c.word_set.iter().map(String::as_str).collect();
                ensure!(got == want, "case {case} w{w}: word set of chunk {k}");
            }
            ensure!(covered.iter().all(|&x| x), "case {case} w{w}: words left uncovered");
        }

        // hierarchy against overlap enumeration and set-intersection weights
        let got: BTreeMap<(String, String), f64> = edges.into_iter().map(|e| ((e.parent, e.child), e.weight)).collect();
        let mut want = BTreeMap::new();
        for k in 1..WINDOWS.len() {
            for p in &levels[k] {
                let ps: HashSet<&String> = canon[p.start_index..p.end_index()].iter().collect();
                // children start on a fixed grid, so only a bounded run can overlap
                let s = WINDOWS[k - 1] / 2;
                let first = p.start_index.saturating_sub(WINDOWS[k - 1]) / s;
                for c in levels[k - 1].iter().skip(first) {
                    if c.start_index >= p.end_index() {
                        break;
                    }
                    let overlap = p.start_index.max(c.start_index) < p.end_index().min(c.end_index());
                    if !overlap {
                        continue;
                    }
                    let cs: HashSet<&String> = canon[c.start_index..c.end_index()].iter().collect();
                    let shared = ps.iter().filter(|x| cs.contains(*x)).count();
                    want.insert(
                        (p.chunk_id.clone(), c.chunk_id.clone()),
                        shared as f64 / ps.len() as f64,
                    );
                }
            }
        }
        ensure!(
            got.keys().eq(want.keys()),
            "case {case}: hierarchy edges differ from the overlap enumeration ({} vs {})",
            got.len(),
            want.len()
        );
        for (k, w) in &want {
            let g = got[k];
            ensure!(g > 0.0 && g <= 1.0, "case {case}: weight {g} for {k:?} outside (0, 1]");
            ensure!(g == *w, "case {case}: weight {g} for {k:?}, oracle {w}");
        }
        n_edges += got.len();
    }
    ensure!(elapsed < 10.0, "chunking took {elapsed:.2}s, budget 10s");
    Ok(format!(
        "500 texts, {words} words, {n_chunks} chunks, {n_edges} hierarchy weights; chunking {elapsed:.2}s"
    ))
}
