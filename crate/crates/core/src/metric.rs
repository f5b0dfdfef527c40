//! Stacktrace similarity and distance.
//!
//! Two crashes are compared through their frame-key sequences. The
//! similarity is a positionally weighted longest-common-subsequence
//! score: frames near the crash site carry the most weight, and the
//! weight ratio between consecutive frames is `decay`. `dist` is the
//! complement, so identical key sequences are at distance 0 and traces
//! with no key in common are at distance 1.
//!
//! The module also provides the ClusterFuzz-style frame comparator and
//! condensed distance matrices for clustering, plus a [`Metric`]
//! abstraction so tests can inject table-based distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{Frame, Stacktrace};
use crate::Scalar;

/// How a frame is reduced to its comparison key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKeyMode {
    /// Function name when present, `module+0xaddr` otherwise.
    #[default]
    #[serde(rename = "function")]
    FunctionName,
    /// `module+0xaddr` whenever a module is known, function otherwise.
    /// Useful for unsymbolized binaries.
    #[serde(rename = "module-offset")]
    FunctionOrModuleOffset,
}

/// The comparison key of one frame under the given mode.
pub fn frame_key(frame: &Frame, mode: FrameKeyMode) -> String {
    let module_offset = || format!("{}+0x{:x}", frame.module, frame.address);
    match mode {
        FrameKeyMode::FunctionName => {
            if !frame.function.is_empty() {
                frame.function.clone()
            } else {
                module_offset()
            }
        }
        FrameKeyMode::FunctionOrModuleOffset => {
            if !frame.module.is_empty() {
                module_offset()
            } else {
                frame.function.clone()
            }
        }
    }
}

/// Key sequence of a stacktrace, innermost frame first.
pub fn frame_keys(trace: &Stacktrace, mode: FrameKeyMode) -> Vec<String> {
    trace.frames.iter().map(|f| frame_key(f, mode)).collect()
}

/// Similarity parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig<F> {
    /// Positional weight ratio in (0, 1]; frame i weighs `decay^i`.
    pub decay: F,
    pub key_mode: FrameKeyMode,
}

impl<F: Scalar> Default for MetricConfig<F> {
    fn default() -> Self {
        MetricConfig {
            decay: F::from(0.9).unwrap(),
            key_mode: FrameKeyMode::default(),
        }
    }
}

impl<F: Scalar> MetricConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.decay > F::zero() && self.decay <= F::one() {
            Ok(())
        } else {
            Err(Error::Parse("decay must lie in (0, 1]".into()))
        }
    }
}

fn weights<F: Scalar>(len: usize, decay: F) -> Vec<F> {
    let mut w = Vec::with_capacity(len);
    let mut cur = F::one();
    for _ in 0..len {
        w.push(cur);
        cur = cur * decay;
    }
    w
}

fn weight_sum<F: Scalar>(w: &[F]) -> F {
    w.iter().fold(F::zero(), |acc, &x| acc + x)
}

/// Weighted-LCS similarity over key sequences.
///
/// With positional weights `w(i) = decay^i`, the score of a common
/// subsequence (a set of index pairs `(i, j)` with `A[i] = B[j]`,
/// strictly increasing in both coordinates) is the sum of
/// `min(w(i), w(j))` over its pairs. The similarity is the best such
/// score divided by `max(W(A), W(B))`, which is 1 exactly when the key
/// sequences are equal and 0 when they share no key.
pub fn similarity<F: Scalar>(a: &Stacktrace, b: &Stacktrace, cfg: &MetricConfig<F>) -> Result<F> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let ka = frame_keys(a, cfg.key_mode);
    let kb = frame_keys(b, cfg.key_mode);
    Ok(key_similarity(&ka, &kb, cfg.decay))
}

/// [`similarity`] on pre-extracted key sequences.
pub fn key_similarity<F: Scalar, S: AsRef<str>>(ka: &[S], kb: &[S], decay: F) -> F {
    let n = ka.len();
    let m = kb.len();
    let wa = weights(n, decay);
    let wb = weights(m, decay);

    // dp[j] holds the best score over A[..i], B[..j] for the current row.
    let mut prev = vec![F::zero(); m + 1];
    let mut cur = vec![F::zero(); m + 1];
    for i in 1..=n {
        for j in 1..=m {
            let mut best = if prev[j] > cur[j - 1] { prev[j] } else { cur[j - 1] };
            if ka[i - 1].as_ref() == kb[j - 1].as_ref() {
                let w = if wa[i - 1] < wb[j - 1] { wa[i - 1] } else { wb[j - 1] };
                let matched = prev[j - 1] + w;
                if matched > best {
                    best = matched;
                }
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let score = prev[m];

    let total_a = weight_sum(&wa);
    let total_b = weight_sum(&wb);
    let denom = if total_a > total_b { total_a } else { total_b };
    score / denom
}

/// `1 - similarity`, the pseudometric used for clustering.
pub fn dist<F: Scalar>(a: &Stacktrace, b: &Stacktrace, cfg: &MetricConfig<F>) -> Result<F> {
    Ok(F::one() - similarity(a, b, cfg)?)
}

/// Minimum number of insert/delete/substitute edits between two strings,
/// computed over Unicode scalar values.
pub fn levenshtein(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Length of the longest common subsequence of two key sequences.
fn lcs_length<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut cur = vec![0usize; m + 1];
    for i in 1..=a.len() {
        for j in 1..=m {
            cur[j] = if a[i - 1].as_ref() == b[j - 1].as_ref() {
                prev[j - 1] + 1
            } else {
                prev[j].max(cur[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// ClusterFuzz comparator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterFuzzConfig<F> {
    /// A common frame subsequence longer than this makes two crashes the
    /// same.
    pub same_frame_threshold: usize,
    /// Mean per-frame similarity ratio must exceed this, strictly.
    pub compare_threshold: F,
}

impl<F: Scalar> Default for ClusterFuzzConfig<F> {
    fn default() -> Self {
        ClusterFuzzConfig {
            same_frame_threshold: 3,
            compare_threshold: F::from(0.7).unwrap(),
        }
    }
}

impl<F: Scalar> ClusterFuzzConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.same_frame_threshold >= 1
            && self.compare_threshold > F::zero()
            && self.compare_threshold <= F::one()
        {
            Ok(())
        } else {
            Err(Error::Parse(
                "same_frame_threshold must be >= 1 and compare_threshold in (0, 1]".into(),
            ))
        }
    }
}

/// ClusterFuzz-style sameness predicate over frame keys.
///
/// Equal key sequences match outright (the upper-frames prefix check is
/// subsumed by full equality). Otherwise a common subsequence longer
/// than `same_frame_threshold` matches; otherwise the mean of the
/// per-position Levenshtein similarity ratios must strictly exceed
/// `compare_threshold`. Positions where both keys are empty count as
/// ratio 1.
pub fn clusterfuzz_same<F: Scalar>(
    a: &Stacktrace,
    b: &Stacktrace,
    cfg: &ClusterFuzzConfig<F>,
    mode: FrameKeyMode,
) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let ka = frame_keys(a, mode);
    let kb = frame_keys(b, mode);
    if ka == kb {
        return Ok(true);
    }
    if lcs_length(&ka, &kb) > cfg.same_frame_threshold {
        return Ok(true);
    }
    let count = ka.len().min(kb.len());
    let mut sum = F::zero();
    for i in 0..count {
        let l1 = ka[i].chars().count();
        let l2 = kb[i].chars().count();
        let ratio = if l1 + l2 == 0 {
            F::one()
        } else {
            let d = levenshtein(&ka[i], &kb[i]);
            F::from(l1 + l2 - d).unwrap() / F::from(l1 + l2).unwrap()
        };
        sum = sum + ratio;
    }
    let mean = sum / F::from(count).unwrap();
    Ok(mean > cfg.compare_threshold)
}

/// Condensed upper-triangular pairwise distance matrix over `n`
/// elements; entry `(i, j)` with `i < j` sits at
/// `i*n - i*(i+1)/2 + (j - i - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<F> {
    n: usize,
    values: Vec<F>,
}

impl<F: Scalar> DistanceMatrix<F> {
    /// Wraps a condensed value vector; its length must be `n*(n-1)/2`.
    pub fn from_condensed(n: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != n * n.saturating_sub(1) / 2 {
            return Err(Error::Parse(format!(
                "condensed matrix for n={n} needs {} values, got {}",
                n * n.saturating_sub(1) / 2,
                values.len()
            )));
        }
        Ok(DistanceMatrix { n, values })
    }

    /// Builds the matrix by evaluating `f` on every pair `i < j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut values = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                values.push(f(i, j));
            }
        }
        DistanceMatrix { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    fn condensed_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.n);
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    /// Distance between elements `i` and `j` (0 on the diagonal).
    pub fn get(&self, i: usize, j: usize) -> F {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => F::zero(),
            std::cmp::Ordering::Less => self.values[self.condensed_index(i, j)],
            std::cmp::Ordering::Greater => self.values[self.condensed_index(j, i)],
        }
    }
}

/// Pairwise distance matrix over normalized stacktraces.
pub fn distance_matrix<F: Scalar>(
    traces: &[&Stacktrace],
    cfg: &MetricConfig<F>,
) -> Result<DistanceMatrix<F>> {
    if traces.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyTrace);
    }
    let keys: Vec<Vec<String>> = traces.iter().map(|t| frame_keys(t, cfg.key_mode)).collect();
    Ok(DistanceMatrix::from_fn(traces.len(), |i, j| {
        F::one() - key_similarity(&keys[i], &keys[j], cfg.decay)
    }))
}

/// Distance oracle over some element type. Production code uses
/// [`StacktraceMetric`]; tests may inject a [`TableMetric`] with
/// hand-picked distances.
pub trait Metric<T: ?Sized, F> {
    /// Distance between two elements. Symmetric, zero on identical
    /// elements; the triangle inequality is not assumed.
    fn dist(&self, a: &T, b: &T) -> F;
}

/// The production metric: `1 - similarity` over frame keys.
#[derive(Debug, Clone, Default)]
pub struct StacktraceMetric<F> {
    pub cfg: MetricConfig<F>,
}

impl<F: Scalar> StacktraceMetric<F> {
    pub fn new(cfg: MetricConfig<F>) -> Self {
        StacktraceMetric { cfg }
    }
}

impl<F: Scalar> Metric<Stacktrace, F> for StacktraceMetric<F> {
    fn dist(&self, a: &Stacktrace, b: &Stacktrace) -> F {
        dist(a, b, &self.cfg).expect("metric inputs must be normalized, nonempty traces")
    }
}

/// Index lookups against a precomputed matrix form a metric over `usize`.
impl<F: Scalar> Metric<usize, F> for DistanceMatrix<F> {
    fn dist(&self, a: &usize, b: &usize) -> F {
        self.get(*a, *b)
    }
}

/// Table-driven metric for tests. Traces are identified by the function
/// name of their first frame; distances between distinct labels must be
/// listed explicitly.
#[derive(Debug, Clone)]
pub struct TableMetric<F> {
    labels: Vec<String>,
    table: Vec<Vec<F>>,
}

impl<F: Scalar> TableMetric<F> {
    /// Builds a symmetric table from `(label_a, label_b, distance)`
    /// entries; the diagonal is 0.
    pub fn new(labels: &[&str], entries: &[(&str, &str, F)]) -> Self {
        let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let n = labels.len();
        let mut table = vec![vec![F::zero(); n]; n];
        let index = |l: &str| {
            labels
                .iter()
                .position(|x| x == l)
                .unwrap_or_else(|| panic!("unknown table metric label {l:?}"))
        };
        for (a, b, d) in entries {
            let (i, j) = (index(a), index(b));
            table[i][j] = *d;
            table[j][i] = *d;
        }
        TableMetric { labels, table }
    }

    /// A one-frame stacktrace carrying the given label.
    pub fn trace(label: &str) -> Stacktrace {
        Stacktrace::new(vec![Frame {
            function: label.to_string(),
            ..Frame::default()
        }])
    }

    fn index_of(&self, trace: &Stacktrace) -> usize {
        let label = &trace.frames[0].function;
        self.labels
            .iter()
            .position(|x| x == label)
            .unwrap_or_else(|| panic!("trace label {label:?} not in table metric"))
    }
}

impl<F: Scalar> Metric<Stacktrace, F> for TableMetric<F> {
    fn dist(&self, a: &Stacktrace, b: &Stacktrace) -> F {
        self.table[self.index_of(a)][self.index_of(b)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(names: &[&str]) -> Stacktrace {
        Stacktrace::new(
            names
                .iter()
                .map(|n| Frame {
                    function: n.to_string(),
                    ..Frame::default()
                })
                .collect(),
        )
    }

    fn cfg(decay: f64) -> MetricConfig<f64> {
        MetricConfig {
            decay,
            key_mode: FrameKeyMode::FunctionName,
        }
    }

    // Exhaustive reference: enumerate every common subsequence (all
    // strictly increasing pair chains) and take the best score.
    fn brute_similarity(ka: &[String], kb: &[String], decay: f64) -> f64 {
        fn explore(ka: &[String], kb: &[String], i: usize, j: usize, decay: f64) -> f64 {
            let mut best = 0.0f64;
            for ii in i..ka.len() {
                for jj in j..kb.len() {
                    if ka[ii] == kb[jj] {
                        let w = decay.powi(ii as i32).min(decay.powi(jj as i32));
                        let v = w + explore(ka, kb, ii + 1, jj + 1, decay);
                        if v > best {
                            best = v;
                        }
                    }
                }
            }
            best
        }
        let total = |len: usize| (0..len).map(|i| decay.powi(i as i32)).sum::<f64>();
        explore(ka, kb, 0, 0, decay) / total(ka.len()).max(total(kb.len()))
    }

    #[test]
    fn frame_key_modes() {
        let full = Frame {
            function: "foo".into(),
            module: "/bin/t".into(),
            address: 5,
            ..Frame::default()
        };
        let unsymbolized = Frame {
            module: "/bin/t".into(),
            address: 5,
            ..Frame::default()
        };
        assert_eq!(frame_key(&full, FrameKeyMode::FunctionName), "foo");
        assert_eq!(
            frame_key(&unsymbolized, FrameKeyMode::FunctionName),
            "/bin/t+0x5"
        );
        assert_eq!(
            frame_key(&full, FrameKeyMode::FunctionOrModuleOffset),
            "/bin/t+0x5"
        );
    }

    #[test]
    fn identical_traces_have_similarity_exactly_one() {
        for decay in [0.5, 0.9, 1.0] {
            let t = trace(&["f", "g", "h"]);
            assert_eq!(similarity(&t, &t, &cfg(decay)).unwrap(), 1.0);
        }
    }

    #[test]
    fn disjoint_traces_have_similarity_zero() {
        let a = trace(&["f"]);
        let b = trace(&["g"]);
        assert_eq!(similarity(&a, &b, &cfg(0.9)).unwrap(), 0.0);
        assert_eq!(dist(&a, &b, &cfg(0.9)).unwrap(), 1.0);
    }

    #[test]
    fn prefix_pair_matches_enumeration() {
        // A=[f,g], B=[f]: only match is (0,0) with weight 1; W(A)=1.9.
        let a = trace(&["f", "g"]);
        let b = trace(&["f"]);
        let sim = similarity(&a, &b, &cfg(0.9)).unwrap();
        assert!((sim - 1.0 / 1.9).abs() < 1e-12);
        assert!((sim - 0.5263157894736842).abs() < 1e-12);
        let d = dist(&a, &b, &cfg(0.9)).unwrap();
        assert!((d - (1.0 - 1.0 / 1.9)).abs() < 1e-12);
        assert!((d - 0.47368421052631576).abs() < 1e-12);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let empty = Stacktrace::default();
        let t = trace(&["f"]);
        assert!(similarity(&empty, &t, &cfg(0.9)).is_err());
    }

    #[test]
    fn dp_matches_exhaustive_enumeration() {
        // Small alphabet to force shared keys and crossing candidates.
        let alphabet = ["f", "g", "h"];
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            seed as usize
        };
        for _ in 0..300 {
            let la = next() % 6 + 1;
            let lb = next() % 6 + 1;
            let ka: Vec<String> = (0..la).map(|_| alphabet[next() % 3].to_string()).collect();
            let kb: Vec<String> = (0..lb).map(|_| alphabet[next() % 3].to_string()).collect();
            let dp = key_similarity(&ka, &kb, 0.9);
            let brute = brute_similarity(&ka, &kb, 0.9);
            assert!(
                (dp - brute).abs() < 1e-12,
                "dp={dp} brute={brute} ka={ka:?} kb={kb:?}"
            );
        }
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn clusterfuzz_full_match_branch() {
        let t = trace(&["a", "b", "c", "d", "e"]);
        let cf = ClusterFuzzConfig::<f64>::default();
        assert!(clusterfuzz_same(&t, &t.clone(), &cf, FrameKeyMode::FunctionName).unwrap());
    }

    #[test]
    fn clusterfuzz_common_subsequence_branch() {
        // Common subsequence [a,b,c,d] of length 4 > threshold 3; frames
        // are long random-ish names so the ratio branch would reject.
        let a = trace(&["aaaaaaaa", "bbbbbbbb", "cccccccc", "dddddddd", "xxxxxxxx"]);
        let b = trace(&["yyyyyyyy", "aaaaaaaa", "bbbbbbbb", "cccccccc", "dddddddd"]);
        let cf = ClusterFuzzConfig {
            same_frame_threshold: 3,
            compare_threshold: 0.99,
        };
        assert!(clusterfuzz_same(&a, &b, &cf, FrameKeyMode::FunctionName).unwrap());
        let strict = ClusterFuzzConfig {
            same_frame_threshold: 4,
            compare_threshold: 0.99,
        };
        assert!(!clusterfuzz_same(&a, &b, &strict, FrameKeyMode::FunctionName).unwrap());
    }

    #[test]
    fn clusterfuzz_ratio_branch_hand_example() {
        // Keys "abcd" vs "abcx": ratio = (4 + 4 - 1) / 8 = 0.875.
        let a = trace(&["abcd"]);
        let b = trace(&["abcx"]);
        let cf = ClusterFuzzConfig {
            same_frame_threshold: 5,
            compare_threshold: 0.7,
        };
        assert!(clusterfuzz_same(&a, &b, &cf, FrameKeyMode::FunctionName).unwrap());
    }

    #[test]
    fn clusterfuzz_threshold_boundary_is_strict() {
        // Mean ratio exactly equal to the threshold must NOT match.
        let a = trace(&["abcd"]);
        let b = trace(&["abcx"]);
        let cf = ClusterFuzzConfig {
            same_frame_threshold: 5,
            compare_threshold: 0.875,
        };
        assert!(!clusterfuzz_same(&a, &b, &cf, FrameKeyMode::FunctionName).unwrap());
    }

    #[test]
    fn distance_matrix_shapes() {
        let t = trace(&["f"]);
        let m = distance_matrix::<f64>(&[&t], &cfg(0.9)).unwrap();
        assert_eq!(m.n(), 1);
        assert!(m.values().is_empty());

        let m = distance_matrix::<f64>(&[&t, &t], &cfg(0.9)).unwrap();
        assert_eq!(m.values(), &[0.0]);
    }

    #[test]
    fn distance_matrix_matches_pairwise_dist() {
        let ts = [
            trace(&["f", "g", "h"]),
            trace(&["f", "g"]),
            trace(&["x", "y"]),
        ];
        let refs: Vec<&Stacktrace> = ts.iter().collect();
        let c = cfg(0.9);
        let m = distance_matrix::<f64>(&refs, &c).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), dist(&ts[i], &ts[j], &c).unwrap());
            }
        }
    }

    #[test]
    fn condensed_index_layout() {
        let m = DistanceMatrix::from_condensed(4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        // (0,1) (0,2) (0,3) (1,2) (1,3) (2,3)
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 3), 3.0);
        assert_eq!(m.get(1, 2), 4.0);
        assert_eq!(m.get(2, 3), 6.0);
        assert_eq!(m.get(3, 2), 6.0);
        assert_eq!(m.get(2, 2), 0.0);
    }

    #[test]
    fn generic_scalar_instantiates_for_f32() {
        let a = trace(&["f", "g"]);
        let b = trace(&["f"]);
        let cfg = MetricConfig::<f32> {
            decay: 0.9,
            key_mode: FrameKeyMode::FunctionName,
        };
        let sim = similarity(&a, &b, &cfg).unwrap();
        assert!((sim - 1.0f32 / 1.9).abs() < 1e-6);
    }

    #[test]
    fn table_metric_lookup() {
        let tm = TableMetric::new(&["a", "b"], &[("a", "b", 0.4f64)]);
        let ta = TableMetric::<f64>::trace("a");
        let tb = TableMetric::<f64>::trace("b");
        assert_eq!(tm.dist(&ta, &tb), 0.4);
        assert_eq!(tm.dist(&ta, &ta), 0.0);
    }
}
