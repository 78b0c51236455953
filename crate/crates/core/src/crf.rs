//! Linear-chain CRF over BIO tags: emission layer, negative log-likelihood
//! via the forward algorithm, and Viterbi decoding.
//!
//! Sequence math runs in f64 whatever the model dtype; the NLL enters the
//! graph as one node whose input gradients are marginals minus gold counts.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{labels_from_spans, spans_from_labels, BioLabel, SlotSpan};
use crate::error::{Error, Result};
use crate::layers::{Dense, DenseSpec};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Real, Tensor};

/// `O`, then `B-x`, `I-x` for each slot in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    slots: Vec<String>,
    labels: Vec<BioLabel>,
}

impl TagSet {
    pub fn new<S: AsRef<str>>(slots: &[S]) -> Result<Self> {
        let mut sorted: Vec<String> = slots.iter().map(|s| s.as_ref().to_string()).collect();
        sorted.sort();
        sorted.dedup();
        if let Some(bad) = sorted
            .iter()
            .find(|s| s.is_empty() || s.chars().any(char::is_whitespace))
        {
            return Err(Error::Config(format!("invalid slot name `{bad}`")));
        }
        let mut labels = vec![BioLabel::Outside];
        for s in &sorted {
            labels.push(BioLabel::Begin(s.clone()));
            labels.push(BioLabel::Inside(s.clone()));
        }
        Ok(Self {
            slots: sorted,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn slots(&self) -> &[String] {
        &self.slots
    }

    pub fn label(&self, index: usize) -> &BioLabel {
        &self.labels[index]
    }

    pub fn index(&self, label: &BioLabel) -> Option<usize> {
        match label {
            BioLabel::Outside => Some(0),
            BioLabel::Begin(s) => self.slots.binary_search(s).ok().map(|i| 1 + 2 * i),
            BioLabel::Inside(s) => self.slots.binary_search(s).ok().map(|i| 2 + 2 * i),
        }
    }

    /// Tag indices for spans over `len` tokens.
    pub fn bio_from_spans(&self, spans: &[SlotSpan], len: usize) -> Result<Vec<usize>> {
        labels_from_spans(spans, len)?
            .iter()
            .map(|l| {
                self.index(l)
                    .ok_or_else(|| Error::Contract(format!("slot of `{l}` is not in the tag set")))
            })
            .collect()
    }

    /// Lenient decoding; a stray `I-x` opens a new span.
    pub fn spans_from_bio(&self, tags: &[usize]) -> Vec<SlotSpan> {
        let labels: Vec<BioLabel> = tags.iter().map(|&t| self.labels[t].clone()).collect();
        spans_from_labels(&labels)
    }
}

impl Serialize for TagSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.slots.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TagSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let slots = Vec::<String>::deserialize(d)?;
        TagSet::new(&slots).map_err(serde::de::Error::custom)
    }
}

/// Scores of a chain as plain f64 arrays.
#[derive(Debug, Clone)]
pub struct ChainScores {
    /// `[T][K]`
    pub emissions: Vec<Vec<f64>>,
    /// `[K][K]`, from-tag then to-tag.
    pub transitions: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ChainScores {
    fn rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v.as_f64()).collect())
            .collect()
    }

    fn vec<T: Real>(t: &Tensor<T>) -> Vec<f64> {
        t.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn from_tensors<T: Real>(
        emissions: &Tensor<T>,
        transitions: &Tensor<T>,
        start: &Tensor<T>,
        end: &Tensor<T>,
    ) -> Result<Self> {
        let k = transitions.rows();
        if emissions.cols() != k || transitions.cols() != k || start.len() != k || end.len() != k {
            return Err(Error::dim("crf", emissions.shape(), transitions.shape()));
        }
        if emissions.rows() == 0 {
            return Err(Error::Contract("CRF needs at least one position".into()));
        }
        Ok(Self {
            emissions: Self::rows(emissions),
            transitions: Self::rows(transitions),
            start: Self::vec(start),
            end: Self::vec(end),
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    fn check_tags(&self, tags: &[usize]) -> Result<()> {
        if tags.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} tags for {} positions",
                tags.len(),
                self.len()
            )));
        }
        if let Some(&bad) = tags.iter().find(|&&t| t >= self.num_tags()) {
            return Err(Error::Contract(format!(
                "tag index {bad} outside tag set of {}",
                self.num_tags()
            )));
        }
        Ok(())
    }

    /// `start + Σ (transition + emission) + end`, summed left to right.
    pub fn path_score(&self, tags: &[usize]) -> Result<f64> {
        self.check_tags(tags)?;
        let mut s = self.start[tags[0]] + self.emissions[0][tags[0]];
        for t in 1..tags.len() {
            s = s + self.transitions[tags[t - 1]][tags[t]] + self.emissions[t][tags[t]];
        }
        Ok(s + self.end[tags[tags.len() - 1]])
    }

    fn forward(&self) -> Vec<Vec<f64>> {
        let k = self.num_tags();
        let mut alpha = vec![(0..k)
            .map(|j| self.start[j] + self.emissions[0][j])
            .collect::<Vec<_>>()];
        for t in 1..self.len() {
            let prev = &alpha[t - 1];
            let row = (0..k)
                .map(|j| {
                    log_sum_exp((0..k).map(|i| prev[i] + self.transitions[i][j]))
                        + self.emissions[t][j]
                })
                .collect();
            alpha.push(row);
        }
        alpha
    }

    fn backward(&self) -> Vec<Vec<f64>> {
        let (n, k) = (self.len(), self.num_tags());
        let mut beta = vec![Vec::new(); n];
        beta[n - 1] = self.end.clone();
        for t in (0..n - 1).rev() {
            let next = &beta[t + 1];
            beta[t] = (0..k)
                .map(|i| {
                    log_sum_exp(
                        (0..k).map(|j| self.transitions[i][j] + self.emissions[t + 1][j] + next[j]),
                    )
                })
                .collect();
        }
        beta
    }

    pub fn log_partition(&self) -> f64 {
        let alpha = self.forward();
        let last = &alpha[self.len() - 1];
        log_sum_exp((0..self.num_tags()).map(|j| last[j] + self.end[j]))
    }

    /// Highest-scoring path and its score. Ties go to the lowest tag index.
    pub fn viterbi(&self) -> (Vec<usize>, f64) {
        let (n, k) = (self.len(), self.num_tags());
        let mut delta: Vec<f64> = (0..k)
            .map(|j| self.start[j] + self.emissions[0][j])
            .collect();
        let mut back = vec![vec![0usize; k]; n];
        for t in 1..n {
            let mut next = vec![0.0; k];
            for j in 0..k {
                let mut best = 0;
                let mut best_v = delta[0] + self.transitions[0][j];
                for i in 1..k {
                    let v = delta[i] + self.transitions[i][j];
                    if v > best_v {
                        best = i;
                        best_v = v;
                    }
                }
                back[t][j] = best;
                next[j] = best_v + self.emissions[t][j];
            }
            delta = next;
        }
        let mut last = 0;
        let mut best_v = delta[0] + self.end[0];
        for j in 1..k {
            let v = delta[j] + self.end[j];
            if v > best_v {
                last = j;
                best_v = v;
            }
        }
        let mut path = vec![last; n];
        for t in (1..n).rev() {
            path[t - 1] = back[t][path[t]];
        }
        (path, best_v)
    }

    /// NLL of `gold` and its gradients w.r.t. emissions, transitions, start
    /// and end, in that order.
    pub fn nll_with_grads(&self, gold: &[usize]) -> Result<(f64, [Vec<f64>; 4])> {
        self.check_tags(gold)?;
        let (n, k) = (self.len(), self.num_tags());
        let alpha = self.forward();
        let beta = self.backward();
        let log_z = log_sum_exp((0..k).map(|j| alpha[n - 1][j] + self.end[j]));
        let nll = log_z - self.path_score(gold)?;

        let mut d_emis = vec![0.0; n * k];
        for t in 0..n {
            for j in 0..k {
                d_emis[t * k + j] = (alpha[t][j] + beta[t][j] - log_z).exp();
            }
            d_emis[t * k + gold[t]] -= 1.0;
        }
        let mut d_trans = vec![0.0; k * k];
        for t in 1..n {
            for i in 0..k {
                for j in 0..k {
                    d_trans[i * k + j] += (alpha[t - 1][i]
                        + self.transitions[i][j]
                        + self.emissions[t][j]
                        + beta[t][j]
                        - log_z)
                        .exp();
                }
            }
            d_trans[gold[t - 1] * k + gold[t]] -= 1.0;
        }
        // Start and end scores enter exactly like the first and last emissions.
        let d_start = d_emis[..k].to_vec();
        let d_end = d_emis[(n - 1) * k..].to_vec();
        Ok((nll, [d_emis, d_trans, d_start, d_end]))
    }
}

#[derive(Debug, Clone)]
pub struct CrfHead {
    pub num_tags: usize,
    pub emission: Dense,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
}

impl CrfHead {
    pub fn new<T: Real>(
        store: &mut ParameterStore<T>,
        d_model: usize,
        num_tags: usize,
    ) -> Result<Self> {
        if num_tags == 0 {
            return Err(Error::Config("tag set is empty".into()));
        }
        let emission = Dense::new(store, "crf.emission", &DenseSpec::new(d_model, num_tags))?;
        let transitions = store.add(
            "crf.transitions",
            Tensor::zeros(&[num_tags, num_tags]),
            false,
        )?;
        let start = store.add("crf.start", Tensor::zeros(&[num_tags]), false)?;
        let end = store.add("crf.end", Tensor::zeros(&[num_tags]), false)?;
        Ok(Self {
            num_tags,
            emission,
            transitions,
            start,
            end,
        })
    }

    pub fn param_breakdown(d_model: usize, num_tags: usize) -> Vec<(String, usize)> {
        vec![
            (
                "crf.emission".into(),
                DenseSpec::new(d_model, num_tags).param_count(),
            ),
            ("crf.transitions".into(), num_tags * num_tags),
            ("crf.start_end".into(), 2 * num_tags),
        ]
    }

    /// `[T, K]` emission scores from fused features `h: [T, d_model]`.
    pub fn emissions<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var> {
        self.emission.linear(g, h)
    }

    pub fn scores<T: Real>(
        &self,
        store: &ParameterStore<T>,
        emissions: &Tensor<T>,
    ) -> Result<ChainScores> {
        ChainScores::from_tensors(
            emissions,
            store.value(self.transitions),
            store.value(self.start),
            store.value(self.end),
        )
    }

    /// Scalar NLL node for the gold tags.
    pub fn nll<T: Real>(&self, g: &mut Graph<'_, T>, h: Var, gold: &[usize]) -> Result<Var> {
        let em = self.emissions(g, h)?;
        let scores = self.scores(g.store(), g.value(em))?;
        let (nll, grads) = scores.nll_with_grads(gold)?;
        let inputs = [
            em,
            g.param(self.transitions),
            g.param(self.start),
            g.param(self.end),
        ];
        let local = inputs
            .iter()
            .zip(grads)
            .map(|(&v, d)| Tensor::new(g.shape(v).to_vec(), d.into_iter().map(T::of).collect()))
            .collect::<Result<Vec<_>>>()?;
        g.scalar_fn(T::of(nll), &inputs, local)
    }

    pub fn decode<T: Real>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<(Vec<usize>, f64)> {
        let em = self.emissions(g, h)?;
        Ok(self.scores(g.store(), g.value(em))?.viterbi())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::params::rng_for;
    use rand::Rng;

    fn random_chain(t: usize, k: usize, seed: u64) -> ChainScores {
        let mut rng = rng_for(seed, "chain");
        let mut m = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r)
                .map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect()
        };
        let emissions = m(t, k);
        let transitions = m(k, k);
        let start = m(1, k).remove(0);
        let end = m(1, k).remove(0);
        ChainScores {
            emissions,
            transitions,
            start,
            end,
        }
    }

    fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
        (0..k.pow(t as u32))
            .map(|mut code| {
                (0..t)
                    .map(|_| {
                        let d = code % k;
                        code /= k;
                        d
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_position_is_cross_entropy() {
        let c = random_chain(1, 4, 1);
        let logits: Vec<f64> = (0..4)
            .map(|j| c.emissions[0][j] + c.start[j] + c.end[j])
            .collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        let (nll, _) = c.nll_with_grads(&[2]).unwrap();
        assert!((nll - (lse - logits[2])).abs() < 1e-12);
    }

    #[test]
    fn zero_structure_factorises() {
        let mut c = random_chain(3, 3, 2);
        c.transitions = vec![vec![0.0; 3]; 3];
        c.start = vec![0.0; 3];
        c.end = vec![0.0; 3];
        let gold = [0, 2, 1];
        let expect: f64 = (0..3)
            .map(|t| {
                c.emissions[t].iter().map(|x| x.exp()).sum::<f64>().ln() - c.emissions[t][gold[t]]
            })
            .sum();
        assert!((c.nll_with_grads(&gold).unwrap().0 - expect).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        for seed in 0..40 {
            let (t, k) = (1 + seed as usize % 5, 1 + seed as usize % 4);
            let c = random_chain(t, k, seed);
            let brute = log_sum_exp(all_paths(t, k).iter().map(|p| c.path_score(p).unwrap()));
            assert!((c.log_partition() - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let c = random_chain(4, 3, 9);
        let total: f64 = all_paths(4, 3)
            .iter()
            .map(|p| (-c.nll_with_grads(p).unwrap().0).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nll_is_non_negative() {
        let c = random_chain(5, 4, 3);
        for p in all_paths(5, 4).iter().step_by(37) {
            assert!(c.nll_with_grads(p).unwrap().0 >= -1e-9);
        }
    }

    #[test]
    fn viterbi_cases() {
        let c = random_chain(3, 1, 0);
        assert_eq!(c.viterbi().0, [0, 0, 0]);

        let gold = [2, 0, 1, 1];
        let mut c = random_chain(4, 3, 4);
        for (t, &y) in gold.iter().enumerate() {
            c.emissions[t][y] += 20.0;
        }
        for i in 0..3 {
            c.transitions[i][i] += 1.0;
        }
        assert_eq!(c.viterbi().0, gold);

        for seed in 0..30 {
            let c = random_chain(1 + seed as usize % 5, 1 + seed as usize % 4, 100 + seed);
            let (path, score) = c.viterbi();
            let best = all_paths(c.len(), c.num_tags())
                .iter()
                .map(|p| c.path_score(p).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(score, best);
            assert_eq!(c.path_score(&path).unwrap(), best);
        }
    }

    #[test]
    fn viterbi_breaks_ties_low() {
        let c = ChainScores {
            emissions: vec![vec![1.0, 1.0, 1.0]; 2],
            transitions: vec![vec![0.0; 3]; 3],
            start: vec![0.0; 3],
            end: vec![0.0; 3],
        };
        assert_eq!(c.viterbi().0, [0, 0]);
    }

    #[test]
    fn invalid_tag_is_contract_error() {
        let c = random_chain(2, 3, 0);
        assert!(matches!(c.nll_with_grads(&[0, 3]), Err(Error::Contract(_))));
        assert!(matches!(c.nll_with_grads(&[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn tagset_layout_and_round_trip() {
        let tags = TagSet::new(&["time", "people", "time"]).unwrap();
        assert_eq!(tags.len(), 5);
        assert_eq!(tags.label(1), &BioLabel::Begin("people".into()));
        assert_eq!(tags.label(4), &BioLabel::Inside("time".into()));
        let spans = vec![SlotSpan::new(0, 1, "time"), SlotSpan::new(3, 3, "people")];
        let bio = tags.bio_from_spans(&spans, 4).unwrap();
        assert_eq!(bio, [3, 4, 0, 1]);
        assert_eq!(tags.spans_from_bio(&bio), spans);
        let json = serde_json::to_string(&tags).unwrap();
        assert_eq!(serde_json::from_str::<TagSet>(&json).unwrap(), tags);
        assert!(tags
            .bio_from_spans(&[SlotSpan::new(0, 0, "date")], 2)
            .is_err());
    }

    #[test]
    fn head_gradients_pass_grad_check() {
        let mut store = ParameterStore::<f64>::new(4);
        let head = CrfHead::new(&mut store, 3, 4).unwrap();
        let mut rng = rng_for(5, "init");
        for name in [
            "crf.transitions",
            "crf.start",
            "crf.end",
            "crf.emission.bias",
        ] {
            for v in store.by_name_mut(name).unwrap().value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let h = Tensor::from_fn(&[3, 3], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        let f = |g: &mut Graph<'_, f64>| {
            let hv = g.input(h.clone());
            head.nll(g, hv, &[1, 2, 0])
        };
        let report = grad_check(&store, f, &GradCheckOptions::default()).unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}
