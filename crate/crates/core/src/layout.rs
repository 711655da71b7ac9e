//! Token-sequence segmentation: system → vision → question → answer.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Segment counts of one sequence.
///
/// `q_effective` is the number of non-padding question tokens; padding always
/// trails the effective tokens inside the question segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SequenceLayout {
    pub n_system: usize,
    pub n_vision: usize,
    pub n_question: usize,
    pub q_effective: usize,
    pub n_answer: usize,
}

impl SequenceLayout {
    pub fn new(n_system: usize, n_vision: usize, n_question: usize, q_effective: usize, n_answer: usize) -> Result<Self> {
        let l = Self {
            n_system,
            n_vision,
            n_question,
            q_effective,
            n_answer,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_vision == 0 {
            return Err(Error::config("n_vision", "vision segment must be non-empty"));
        }
        if self.q_effective == 0 || self.q_effective > self.n_question {
            return Err(Error::config(
                "q_effective",
                format!("must satisfy 1 <= q_effective <= n_question ({})", self.n_question),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_system + self.n_vision + self.n_question + self.n_answer
    }

    pub fn system_span(&self) -> Range<usize> {
        0..self.n_system
    }

    pub fn vision_span(&self) -> Range<usize> {
        let s = self.n_system;
        s..s + self.n_vision
    }

    pub fn question_span(&self) -> Range<usize> {
        let s = self.n_system + self.n_vision;
        s..s + self.n_question
    }

    /// Question positions excluding padding.
    pub fn effective_question_span(&self) -> Range<usize> {
        let s = self.n_system + self.n_vision;
        s..s + self.q_effective
    }

    pub fn answer_span(&self) -> Range<usize> {
        let s = self.n_system + self.n_vision + self.n_question;
        s..s + self.n_answer
    }

    pub fn is_vision(&self, pos: usize) -> bool {
        self.vision_span().contains(&pos)
    }

    pub fn is_answer(&self, pos: usize) -> bool {
        self.answer_span().contains(&pos)
    }

    /// Non-vision token count (never pruned).
    pub fn n_fixed(&self) -> usize {
        self.total() - self.n_vision
    }

    /// Gate over the full sequence.
    pub fn build_gate(&self) -> Result<RegionGate> {
        build_gate(self)
    }
}

/// Binary answer-region indicator over sequence positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGate {
    g: Vec<f64>,
}

impl RegionGate {
    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// Gate restricted to the rows at `positions` (original sequence indices).
    pub fn select(&self, positions: &[usize]) -> RegionGate {
        RegionGate {
            g: positions.iter().map(|&p| self.g[p]).collect(),
        }
    }

    pub fn active_rows(&self) -> Vec<usize> {
        self.g
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// `g[i] = 1` exactly on the answer segment.
pub fn build_gate(layout: &SequenceLayout) -> Result<RegionGate> {
    if layout.n_answer == 0 {
        return Err(Error::EmptyRegion("answer segment"));
    }
    let ans = layout.answer_span();
    Ok(RegionGate {
        g: (0..layout.total())
            .map(|i| if ans.contains(&i) { 1.0 } else { 0.0 })
            .collect(),
    })
}

/// Question→vision block of a `heads×L×L` attention tensor, keeping only the
/// first `q_effective` question rows. Output is `heads×q_effective×n_vision`.
pub fn attention_subblock(attn: &Tensor, layout: &SequenceLayout) -> Result<Tensor> {
    let l = layout.total();
    if attn.rank() != 3 || attn.shape()[1] != l || attn.shape()[2] != l {
        return Err(Error::shape("attention_subblock", attn.shape(), &[0, l, l]));
    }
    let heads = attn.shape()[0];
    let (qs, vs) = (layout.effective_question_span(), layout.vision_span());
    let mut data = Vec::with_capacity(heads * qs.len() * vs.len());
    for h in 0..heads {
        for q in qs.clone() {
            let row = &attn.data()[(h * l + q) * l..(h * l + q + 1) * l];
            data.extend_from_slice(&row[vs.clone()]);
        }
    }
    Tensor::new(vec![heads, qs.len(), vs.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn gate_marks_answer_positions() {
        let l = SequenceLayout::new(1, 4, 2, 2, 2).unwrap();
        let g = build_gate(&l).unwrap();
        assert_eq!(g.values(), &[0., 0., 0., 0., 0., 0., 0., 1., 1.]);
    }

    #[test]
    fn all_answer_layout_is_rejected() {
        assert!(SequenceLayout::new(0, 0, 0, 0, 9).is_err());
    }

    #[test]
    fn empty_answer_gate_errors() {
        let l = SequenceLayout::new(1, 4, 2, 1, 0).unwrap();
        assert!(matches!(build_gate(&l), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn gate_sum_equals_answer_count() {
        let mut rng = Rng::new(11);
        for _ in 0..1000 {
            let nq = 1 + rng.below(4);
            let l = SequenceLayout::new(rng.below(3), 1 + rng.below(8), nq, 1 + rng.below(nq), 1 + rng.below(4)).unwrap();
            let g = build_gate(&l).unwrap();
            assert_eq!(g.values().iter().sum::<f64>(), l.n_answer as f64);
            assert_eq!(build_gate(&l).unwrap(), g);
        }
    }

    #[test]
    fn subblock_slices_question_rows_and_vision_columns() {
        // L=6: system 0, vision 1..=3, question 4..=5
        let l = SequenceLayout::new(1, 3, 2, 2, 0).unwrap();
        let attn = Tensor::full(&[1, 6, 6], 1.0 / 6.0);
        let sb = attention_subblock(&attn, &l).unwrap();
        assert_eq!(sb.shape(), &[1, 2, 3]);
        assert!(sb.data().iter().all(|&x| x == 1.0 / 6.0));
    }

    #[test]
    fn subblock_matches_index_loop() {
        let mut rng = Rng::new(5);
        let l = SequenceLayout::new(2, 5, 3, 2, 2).unwrap();
        let n = l.total();
        let attn = rng.normal_tensor(&[3, n, n], 1.0);
        let sb = attention_subblock(&attn, &l).unwrap();
        for h in 0..3 {
            for (qi, q) in (7..9).enumerate() {
                for (vi, v) in (2..7).enumerate() {
                    assert_eq!(sb.data()[(h * 2 + qi) * 5 + vi], attn.data()[(h * n + q) * n + v]);
                }
            }
        }
    }

    #[test]
    fn mismatched_attention_is_a_shape_error() {
        let l = SequenceLayout::new(1, 3, 2, 2, 1).unwrap();
        assert!(attention_subblock(&Tensor::zeros(&[1, 5, 5]), &l).is_err());
    }
}
