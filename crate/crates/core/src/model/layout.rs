use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tok;

/// A grid of patch feature vectors, row-major, `rows x cols x dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        PatchGrid { rows, cols, dim, data: vec![0.0; rows * cols * dim] }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.cols + c) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

/// Which loss, if any, element `i` is a target of. The prediction always
/// comes from position `i - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMask {
    None,
    Text,
    Latent,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ElementKind {
    Text(usize),
    Patch { feature: Vec<f64>, row: usize, col: usize },
    /// Latent slot `j` of its span.
    Latent(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceElement {
    pub kind: ElementKind,
    pub mask: LossMask,
}

impl SequenceElement {
    pub fn text(id: usize, mask: LossMask) -> Self {
        SequenceElement { kind: ElementKind::Text(id), mask }
    }

    pub fn token(&self) -> Option<usize> {
        match self.kind {
            ElementKind::Text(id) => Some(id),
            _ => None,
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self.kind, ElementKind::Latent(_))
    }
}

/// Mixed text / patch / latent sequence. `boundaries` are exclusive end
/// indices of the question, the pre-image thoughts, the latent span
/// (including `<vend>`) and the post-image thoughts (excluding `<eos>`).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SequenceLayout {
    pub elements: Vec<SequenceElement>,
    pub boundaries: [usize; 4],
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn push_text(&mut self, ids: &[usize], mask: LossMask) {
        self.elements.extend(ids.iter().map(|&id| SequenceElement::text(id, mask)));
    }

    pub fn push_patches(&mut self, grid: &PatchGrid) {
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let feature = grid.cell(r, c).to_vec();
                self.elements.push(SequenceElement { kind: ElementKind::Patch { feature, row: r, col: c }, mask: LossMask::None });
            }
        }
    }

    /// Appends `<vstart>`, `k` latent slots and `<vend>`.
    pub fn push_latent_span(&mut self, k: usize, text_mask: LossMask, latent_mask: LossMask) {
        self.push_text(&[tok::VSTART], text_mask);
        for j in 0..k {
            self.elements.push(SequenceElement { kind: ElementKind::Latent(j), mask: latent_mask });
        }
        self.push_text(&[tok::VEND], text_mask);
    }

    pub fn latent_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.elements[i].is_latent()).collect()
    }

    pub fn text_ids(&self) -> Vec<usize> {
        self.elements.iter().filter_map(SequenceElement::token).collect()
    }

    /// Next-token targets and mask for a cross-entropy over rows `0..T`: row
    /// `i` predicts element `i + 1`.
    pub fn text_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.len();
        let mut targets = vec![0; n];
        let mut mask = vec![false; n];
        for i in 1..n {
            if let (LossMask::Text, Some(id)) = (self.elements[i].mask, self.elements[i].token()) {
                targets[i - 1] = id;
                mask[i - 1] = true;
            }
        }
        (targets, mask)
    }

    /// Rows whose hidden state is the prediction for a latent-target slot,
    /// in slot order.
    pub fn latent_prediction_rows(&self) -> Vec<usize> {
        (1..self.len()).filter(|&i| self.elements[i].mask == LossMask::Latent).map(|i| i - 1).collect()
    }

    /// Checks the structural invariants: latent runs have length exactly `k`,
    /// are numbered `0..k`, and sit between `<vstart>` and `<vend>`; patch
    /// runs advance row-major from `(0, 0)`; boundaries are monotone.
    pub fn validate(&self, k: usize) -> Result<()> {
        let els = &self.elements;
        let mut i = 0;
        while i < els.len() {
            if let ElementKind::Latent(_) = els[i].kind {
                if i == 0 || els[i - 1].token() != Some(tok::VSTART) {
                    return Err(Error::Layout(format!("latent run at {i} not preceded by <vstart>")));
                }
                let start = i;
                while i < els.len() && els[i].is_latent() {
                    if els[i].kind != ElementKind::Latent(i - start) {
                        return Err(Error::Layout(format!("latent slot at {i} is out of order")));
                    }
                    i += 1;
                }
                if i - start != k {
                    return Err(Error::Layout(format!("latent run at {start} has length {}, expected {k}", i - start)));
                }
                if i >= els.len() || els[i].token() != Some(tok::VEND) {
                    return Err(Error::Layout(format!("latent run at {start} not followed by <vend>")));
                }
                continue;
            }
            if let ElementKind::Patch { row, col, .. } = els[i].kind {
                let fresh = (row, col) == (0, 0);
                let prev = match i.checked_sub(1).map(|p| &els[p].kind) {
                    Some(ElementKind::Patch { row: pr, col: pc, .. }) => Some((*pr, *pc)),
                    _ => None,
                };
                let ok = match prev {
                    None => fresh,
                    Some((pr, pc)) => fresh || (row == pr && col == pc + 1) || (row == pr + 1 && col == 0),
                };
                if !ok {
                    return Err(Error::Layout(format!("patch at {i} breaks row-major order")));
                }
            }
            i += 1;
        }
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) || self.boundaries[3] > els.len() {
            return Err(Error::Layout(format!("boundaries {:?} not monotone within {}", self.boundaries, els.len())));
        }
        Ok(())
    }
}
