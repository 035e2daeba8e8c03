//! Multi-talker WER: Levenshtein alignment with substitution/deletion/
//! insertion counts, and speaker-permutation minimization over hypothesis
//! channels.

use thiserror::Error;

/// Exhaustive permutation search bound.
pub const MAX_CHANNELS: usize = 4;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("at most {MAX_CHANNELS} channels supported, got {0}")]
    TooManyChannels(usize),
}

/// Error counts from one hypothesis/reference alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// (S + D + I) / N. For an empty reference this is 0 when the
    /// hypothesis is empty too, infinite otherwise; pooled reports at the
    /// permutation level fold those errors into a meaningful denominator.
    pub fn wer(&self) -> f64 {
        if self.reference_length > 0 {
            self.errors() as f64 / self.reference_length as f64
        } else if self.errors() == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn add(&mut self, other: &WerReport) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.reference_length += other.reference_length;
    }

    pub fn zero() -> Self {
        WerReport {
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            reference_length: 0,
        }
    }
}

/// Uppercases, strips punctuation to spaces, collapses whitespace, and
/// splits into tokens.
pub fn normalize_text(s: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(s.len());
    for ch in s.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            cleaned.extend(ch.to_uppercase());
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(|t| t.to_string()).collect()
}

/// Minimal-edit alignment with unit costs. Ties prefer substitutions over
/// insertion+deletion pairs (diagonal moves first in the traceback).
pub fn edit_distance_wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> WerReport {
    let (n, m) = (reference.len(), hyp.len());
    // dp[i][j] = minimal errors aligning reference[..i] with hyp[..j]
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }
    // Traceback preferring match/substitution, then deletion, then insertion.
    let (mut i, mut j) = (n, m);
    let (mut subs, mut dels, mut inss) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + cost {
                if cost == 1 {
                    subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            dels += 1;
            i -= 1;
        } else {
            inss += 1;
            j -= 1;
        }
    }
    WerReport {
        substitutions: subs,
        deletions: dels,
        insertions: inss,
        reference_length: n,
    }
}

/// The chosen channel-to-reference assignment and its scores.
#[derive(Debug, Clone)]
pub struct PermutationResult {
    /// `assignment[r]` is the hypothesis channel scored against reference r.
    pub assignment: Vec<usize>,
    pub per_pair: Vec<WerReport>,
    pub pooled: WerReport,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..k).collect();
    permute_into(&mut items, 0, &mut out);
    out
}

fn permute_into(items: &mut Vec<usize>, at: usize, out: &mut Vec<Vec<usize>>) {
    if at == items.len() {
        out.push(items.clone());
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permute_into(items, at + 1, out);
        items.swap(at, i);
    }
}

/// Scores hypothesis channels against reference speakers under the
/// total-error-minimizing assignment. Channel and reference counts are
/// equalized by padding with empty sequences.
pub fn permutation_wer<T: PartialEq + Clone>(
    hyp_channels: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<PermutationResult, EvalError> {
    let k = hyp_channels.len().max(references.len());
    if k > MAX_CHANNELS {
        return Err(EvalError::TooManyChannels(k));
    }
    let empty: Vec<T> = Vec::new();
    let hyp = |c: usize| hyp_channels.get(c).unwrap_or(&empty);
    let reference = |r: usize| references.get(r).unwrap_or(&empty);

    let mut best: Option<PermutationResult> = None;
    for perm in permutations(k) {
        let per_pair: Vec<WerReport> = (0..k)
            .map(|r| edit_distance_wer(hyp(perm[r]), reference(r)))
            .collect();
        let mut pooled = WerReport::zero();
        for p in &per_pair {
            pooled.add(p);
        }
        let better = match &best {
            None => true,
            Some(b) => pooled.errors() < b.pooled.errors(),
        };
        if better {
            best = Some(PermutationResult {
                assignment: perm,
                per_pair,
                pooled,
            });
        }
    }
    Ok(best.expect("k >= 0 always yields at least one permutation"))
}
