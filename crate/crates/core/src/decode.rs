//! Greedy and prefix beam search decoding of CTC posterior grids.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ctc::{log_sum_exp, LogPosteriorGrid, BLANK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Vocabulary indices, blank-free.
    pub labels: Vec<usize>,
    /// Log-probability (best path for greedy, prefix marginal for beam).
    pub score: f64,
}

/// Applies the CTC collapse rule: merge consecutive duplicates, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (lowest index on ties), collapsed.
pub fn greedy_decode(grid: &LogPosteriorGrid) -> Hypothesis {
    let mut path = Vec::with_capacity(grid.frames());
    let mut score = 0.0;
    for row in grid.values().rows() {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        score += row[best];
        path.push(best);
    }
    Hypothesis {
        labels: collapse(&path),
        score,
    }
}

#[derive(Clone, Copy)]
struct PrefixScore {
    blank: f64,
    non_blank: f64,
}

impl PrefixScore {
    const ZERO: PrefixScore = PrefixScore {
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    };

    fn total(self) -> f64 {
        log_sum_exp(self.blank, self.non_blank)
    }
}

fn by_score_then_labels(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search. Equal prefixes are merged by summing probabilities,
/// so each score is the prefix marginal restricted to surviving paths.
///
/// Returns at most `beam_width` hypotheses, best first; ties are ordered by
/// label sequence. `usize::MAX` disables pruning.
pub fn beam_decode(grid: &LogPosteriorGrid, beam_width: usize) -> Vec<Hypothesis> {
    assert!(beam_width >= 1, "beam width must be positive");
    let lp = grid.values();
    let classes = grid.num_classes();

    let mut beams: Vec<(Vec<usize>, PrefixScore)> = vec![(
        Vec::new(),
        PrefixScore {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];

    for t in 0..grid.frames() {
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let total = score.total();
            let last = prefix.last().copied();

            let blank_lp = lp[[t, BLANK]];
            if blank_lp > f64::NEG_INFINITY {
                let e = next.entry(prefix.clone()).or_insert(PrefixScore::ZERO);
                e.blank = log_sum_exp(e.blank, total + blank_lp);
            }
            if let Some(last) = last {
                let k_lp = lp[[t, last]];
                if k_lp > f64::NEG_INFINITY {
                    let e = next.entry(prefix.clone()).or_insert(PrefixScore::ZERO);
                    e.non_blank = log_sum_exp(e.non_blank, score.non_blank + k_lp);
                }
            }
            for k in (0..classes).filter(|&k| k != BLANK) {
                let k_lp = lp[[t, k]];
                if k_lp == f64::NEG_INFINITY {
                    continue;
                }
                // A repeated label only extends the prefix after a blank.
                let from = if Some(k) == last { score.blank } else { total };
                let mut extended = prefix.clone();
                extended.push(k);
                let e = next.entry(extended).or_insert(PrefixScore::ZERO);
                e.non_blank = log_sum_exp(e.non_blank, from + k_lp);
            }
        }

        let mut ranked: Vec<(Vec<usize>, f64)> = next
            .iter()
            .map(|(p, s)| (p.clone(), s.total()))
            .filter(|(_, s)| *s > f64::NEG_INFINITY)
            .collect();
        ranked.sort_by(by_score_then_labels);
        ranked.truncate(beam_width);
        beams = ranked
            .into_iter()
            .map(|(p, _)| {
                let s = next[&p];
                (p, s)
            })
            .collect();
    }

    let mut out: Vec<(Vec<usize>, f64)> = beams.into_iter().map(|(p, s)| (p, s.total())).collect();
    out.sort_by(by_score_then_labels);
    out.into_iter()
        .map(|(labels, score)| Hypothesis {
            labels,
            score: score.min(0.0),
        })
        .collect()
}

/// Renders labels as space-separated symbols; `symbols[0]` is the blank.
pub fn render(labels: &[usize], symbols: &[String]) -> String {
    labels
        .iter()
        .map(|&k| symbols[k].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}
