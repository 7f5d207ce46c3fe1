use std::collections::{BTreeMap, BTreeSet};

use collabtrace_core::corpus::{pair_turns, Speaker, TurnRecord, Utterance};
use collabtrace_core::decomposition::DistanceMode;
use collabtrace_core::metrics::{
    diversity, participant_traversal, AttentionSource, DiversityVariant, FrontierState, MetricsConfig,
};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::world::{random_world, World};

const TOL: f64 = 1e-12;

fn random_codes(rng: &mut ChaCha8Rng, w: &World) -> BTreeSet<String> {
    let k = match rng.random_range(0..10) {
        0 | 1 => 0,
        2..=5 => 1,
        _ => rng.random_range(2..=5),
    };
    let pool: Vec<&String> = w.ids[1..].iter().collect();
    pool.choose_multiple(rng, k).map(|s| s.to_string()).collect()
}

fn utterance(turn: u32, speaker: Speaker, codes: BTreeSet<String>) -> Utterance {
    Utterance {
        participant_id: "D".into(),
        turn_index: turn,
        speaker,
        words: vec!["text".into()],
        subtask_codes: codes,
        specialty_codes: BTreeSet::new(),
    }
}

fn random_dialogue(rng: &mut ChaCha8Rng, w: &World) -> Vec<TurnRecord> {
    let n_turns = rng.random_range(1..=12);
    let mut us = Vec::new();
    for t in 1..=n_turns {
        us.push(utterance(t, Speaker::Prompt, random_codes(rng, w)));
        if rng.random_bool(0.9) {
            us.push(utterance(t, Speaker::Response, random_codes(rng, w)));
        }
    }
    us.shuffle(rng);
    pair_turns(&us).unwrap()
}

/// Mean over ordered pairs of distinct codes; equals the unordered mean.
fn pair_mean(codes: &BTreeSet<&String>, w: &World, mode: DistanceMode) -> f64 {
    let v: Vec<&&String> = codes.iter().collect();
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0u64;
    for a in &v {
        for b in &v {
            if a != b {
                total += w.dist(a, b, mode) as u64;
            }
        }
    }
    total as f64 / (n * (n - 1)) as f64
}

fn cross_mean(p: &BTreeSet<String>, r: &BTreeSet<String>, w: &World, mode: DistanceMode) -> f64 {
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let total: u64 = p
        .iter()
        .flat_map(|a| r.iter().map(move |b| (a, b)))
        .map(|(a, b)| w.dist(a, b, mode) as u64)
        .sum();
    total as f64 / (p.len() * r.len()) as f64
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some((v[n / 2 - 1] + v[n / 2]) / 2.0),
    }
}

fn opt_close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= TOL,
        (None, None) => true,
        _ => false,
    }
}

#[derive(Default)]
struct Tally {
    utterances: usize,
    boundary_hits: usize,
    distances: usize,
}

fn check_dialogue(
    case: usize,
    w: &World,
    turns: &[TurnRecord],
    config: &MetricsConfig,
    tally: &mut Tally,
) -> Result<(), String> {
    let mode = config.distance_mode;
    let got = participant_traversal("D", turns, &w.d, config).map_err(|e| format!("case {case}: {e}"))?;
    let quarter = BigRational::new(BigInt::from(1), BigInt::from(4));
    let mut cumulative: BTreeMap<String, BigRational> = BTreeMap::new();
    let mut frontier: BTreeSet<String> = BTreeSet::new();
    let mut state = FrontierState::new("D");
    let (mut coh_by, mut div_by, mut dist_by): (
        BTreeMap<String, Vec<f64>>,
        BTreeMap<String, Vec<f64>>,
        BTreeMap<String, Vec<f64>>,
    ) = Default::default();
    let mut mentions: BTreeMap<String, usize> = BTreeMap::new();

    let mut k = 0;
    for (ti, t) in turns.iter().enumerate() {
        let sides: Vec<&Utterance> = if t.response_missing {
            vec![&t.prompt]
        } else {
            vec![&t.prompt, &t.response]
        };
        for u in sides {
            let um = &got.utterances[k];
            ensure!(
                um.turn_index == u.turn_index && um.speaker == u.speaker,
                "case {case}: utterance order at {k}"
            );
            let codes: BTreeSet<&String> = u.subtask_codes.iter().collect();
            let n = codes.len();

            // coherence
            let want_coh = (n > 0).then(|| pair_mean(&codes, w, mode));
            ensure!(
                um.coherence == want_coh,
                "case {case} utt {k}: coherence {:?} vs {want_coh:?}",
                um.coherence
            );
            if let (Some(c), Speaker::Response) = (want_coh, u.speaker) {
                for s in &codes {
                    coh_by.entry(s.to_string()).or_default().push(c);
                }
            }

            // attention
            let counts = config.attention_source == AttentionSource::All || u.speaker == Speaker::Prompt;
            if n > 0 && counts {
                ensure!(um.attention.len() == n, "case {case} utt {k}: attention keys");
                let sum: f64 = um.attention.values().sum();
                ensure!((sum - 1.0).abs() <= TOL, "case {case} utt {k}: attention sums to {sum}");
                for (s, a) in &um.attention {
                    ensure!(
                        codes.contains(s) && *a == 1.0 / n as f64,
                        "case {case} utt {k}: attention {s}={a}"
                    );
                }
            } else {
                ensure!(um.attention.is_empty(), "case {case} utt {k}: unexpected attention");
            }

            // distance to the frontier as it stood before this utterance
            for s in &codes {
                let want = frontier.iter().map(|f| w.dist(s, f, mode)).min();
                ensure!(
                    um.distance_to_frontier.get(*s) == Some(&want),
                    "case {case} utt {k}: distance for {s} {:?} vs {want:?}",
                    um.distance_to_frontier.get(*s)
                );
                if let Some(x) = want {
                    dist_by.entry(s.to_string()).or_default().push(x as f64);
                    tally.distances += 1;
                }
                *mentions.entry(s.to_string()).or_insert(0) += 1;
            }

            // exact rational accumulation, inclusive threshold
            let before = frontier.clone();
            if counts && n > 0 {
                let share = BigRational::new(BigInt::from(1), BigInt::from(n as u64));
                for s in &codes {
                    let c = cumulative
                        .entry(s.to_string())
                        .or_insert_with(|| BigRational::from_integer(BigInt::from(0)));
                    *c += &share;
                    if *c == quarter {
                        tally.boundary_hits += 1;
                    }
                    if *c >= quarter {
                        frontier.insert(s.to_string());
                    }
                }
            }
            ensure!(before.is_subset(&frontier), "case {case} utt {k}: frontier shrank");
            state
                .advance(k, u, config.attention_source)
                .map_err(|e| e.to_string())?;
            ensure!(
                state.frontier == frontier,
                "case {case} utt {k}: frontier {:?} vs oracle {frontier:?}",
                state.frontier
            );
            ensure!(um.frontier_size == frontier.len(), "case {case} utt {k}: frontier size");
            k += 1;
            tally.utterances += 1;
        }

        // turn-level sets and diversity
        let tm = &got.turns[ti];
        let (p, r) = (&t.prompt.subtask_codes, &t.response.subtask_codes);
        let unanswered: BTreeSet<String> = p.iter().filter(|s| !r.contains(*s)).cloned().collect();
        let unsolicited: BTreeSet<String> = r.iter().filter(|s| !p.contains(*s)).cloned().collect();
        ensure!(
            tm.unanswered == unanswered && tm.unsolicited == unsolicited,
            "case {case} turn {ti}: unanswered/unsolicited"
        );
        ensure!(
            tm.unanswered.is_disjoint(&tm.unsolicited),
            "case {case} turn {ti}: overlap"
        );
        let both: BTreeSet<String> = p.intersection(r).cloned().collect();
        let rebuilt: BTreeSet<String> = tm.unanswered.union(&both).cloned().collect();
        ensure!(
            &rebuilt == p,
            "case {case} turn {ti}: unanswered plus shared is not the prompt set"
        );

        let union: BTreeSet<&String> = p.union(r).collect();
        let want_div = (!union.is_empty()).then(|| match config.diversity {
            DiversityVariant::UnionPairs => pair_mean(&union, w, mode),
            DiversityVariant::CrossPairs => cross_mean(p, r, w, mode),
        });
        ensure!(
            tm.diversity == want_div,
            "case {case} turn {ti}: diversity {:?} vs {want_div:?}",
            tm.diversity
        );
        if let Some(v) = want_div {
            for s in &union {
                div_by.entry(s.to_string()).or_default().push(v);
            }
        }
        for variant in [DiversityVariant::UnionPairs, DiversityVariant::CrossPairs] {
            let g = diversity(t, &w.d, variant, mode).map_err(|e| e.to_string())?;
            let o = match variant {
                DiversityVariant::UnionPairs => pair_mean(&union, w, mode),
                DiversityVariant::CrossPairs => cross_mean(p, r, w, mode),
            };
            ensure!(g == o, "case {case} turn {ti}: {variant:?} diversity {g} vs {o}");
        }
    }
    ensure!(k == got.utterances.len(), "case {case}: utterance count");

    ensure!(
        got.rows.len() == w.ids.len() - 1,
        "case {case}: one row per non-root subtask"
    );
    for row in &got.rows {
        let s = &row.subtask_id;
        let m = mentions.get(s).copied().unwrap_or(0);
        ensure!(
            row.mention_count == m && row.in_transcript == (m > 0),
            "case {case} {s}: mentions"
        );
        let empty = Vec::new();
        ensure!(
            opt_close(row.avg_response_coherence, mean(coh_by.get(s).unwrap_or(&empty))),
            "case {case} {s}: avg coherence"
        );
        ensure!(
            opt_close(row.median_diversity, median(div_by.get(s).unwrap_or(&empty))),
            "case {case} {s}: median diversity"
        );
        ensure!(
            opt_close(row.avg_distance_to_frontier, mean(dist_by.get(s).unwrap_or(&empty))),
            "case {case} {s}: avg distance to frontier"
        );
    }
    Ok(())
}

pub fn check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut tally = Tally::default();
    for case in 0..1000 {
        let w = random_world(&mut rng);
        for a in &w.ids {
            for b in &w.ids {
                for mode in [DistanceMode::Hierarchy, DistanceMode::HierarchyAndDependencies] {
                    let got = w.d.distance_with(a, b, mode).map_err(|e| e.to_string())?;
                    ensure!(got == w.dist(a, b, mode), "case {case}: distance {a}-{b} {mode:?}");
                }
            }
        }
        let turns = random_dialogue(&mut rng, &w);
        let config = MetricsConfig {
            attention_source: if case % 5 == 4 {
                AttentionSource::PromptsOnly
            } else {
                AttentionSource::All
            },
            diversity: if case % 3 == 2 {
                DiversityVariant::CrossPairs
            } else {
                DiversityVariant::UnionPairs
            },
            distance_mode: if case % 2 == 1 {
                DistanceMode::HierarchyAndDependencies
            } else {
                DistanceMode::Hierarchy
            },
            ..MetricsConfig::default()
        };
        check_dialogue(case, &w, &turns, &config, &mut tally)?;
    }
    ensure!(tally.boundary_hits > 0, "no dialogue reached exactly 0.25 attention");
    Ok(format!(
        "1000 dialogues, {} utterances, {} exact 0.25 boundary hits, {} frontier distances",
        tally.utterances, tally.boundary_hits, tally.distances
    ))
}
