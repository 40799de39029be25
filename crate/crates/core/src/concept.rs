//! Concept conditionings c^k and ordered concept sets.
//!
//! Coordinates are (cx, cy) in the unit square. A binary attribute is encoded
//! as two one-hot blocks: which attribute (one of A) and which label, so
//! attribute k set to label 1 is `[e_k, 1, 0]` and label 0 is `[e_k, 0, 1]`.
//! The relaxed form replaces the label block with `[l, 1 − l]`, so l is the
//! weight on label 1 and thresholding l at 0.5 reads the label off directly.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptKind {
    Coordinate,
    OneHotLabel,
    RelaxedLabel,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub kind: ConceptKind,
    pub values: Vec<f64>,
    /// Box bounds applied to every entry by [`ConceptVector::project`].
    pub bounds: (f64, f64),
    /// Block sizes for label kinds; empty otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<usize>,
}

impl ConceptVector {
    pub fn coordinate(cx: f64, cy: f64) -> Self {
        Self { kind: ConceptKind::Coordinate, values: vec![cx, cy], bounds: (0.0, 1.0), blocks: vec![] }
    }

    pub fn embedding(values: Vec<f64>) -> Self {
        Self { kind: ConceptKind::Embedding, values, bounds: (f64::NEG_INFINITY, f64::INFINITY), blocks: vec![] }
    }

    /// Attribute `attribute` (of `n_attributes`) set to `label` ∈ {0, 1}.
    pub fn label(attribute: usize, n_attributes: usize, label: bool) -> Self {
        let mut v = Self::relaxed(attribute, n_attributes, if label { 1.0 } else { 0.0 });
        v.kind = ConceptKind::OneHotLabel;
        v
    }

    /// Attribute `attribute` with relaxed label weight `l` on label 1.
    pub fn relaxed(attribute: usize, n_attributes: usize, l: f64) -> Self {
        assert!(attribute < n_attributes, "attribute {attribute} out of {n_attributes}");
        let mut values = vec![0.0; n_attributes + 2];
        values[attribute] = 1.0;
        values[n_attributes] = l;
        values[n_attributes + 1] = 1.0 - l;
        Self { kind: ConceptKind::RelaxedLabel, values, bounds: (0.0, 1.0), blocks: vec![n_attributes, 2] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Label weight l for label kinds (first entry of the label block).
    pub fn label_weight(&self) -> Option<f64> {
        match self.kind {
            ConceptKind::OneHotLabel | ConceptKind::RelaxedLabel => Some(self.values[self.values.len() - 2]),
            _ => None,
        }
    }

    /// Clamp every entry into the declared bounds.
    pub fn project(&mut self) {
        let (lo, hi) = self.bounds;
        for v in &mut self.values {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { context: "concept values".into() });
        }
        let (lo, hi) = self.bounds;
        if self.values.iter().any(|&v| v < lo || v > hi) {
            return Err(param("concept", format!("values {:?} outside bounds [{lo}, {hi}]", self.values)));
        }
        match self.kind {
            ConceptKind::Coordinate => {
                if self.values.len() != 2 {
                    return Err(param("concept", "a coordinate concept has exactly 2 entries"));
                }
            }
            ConceptKind::OneHotLabel | ConceptKind::RelaxedLabel => {
                if self.blocks.iter().sum::<usize>() != self.values.len() {
                    return Err(param("concept", "label blocks do not cover the concept vector"));
                }
                let mut start = 0;
                for &len in &self.blocks {
                    let block = &self.values[start..start + len];
                    start += len;
                    let ok = if self.kind == ConceptKind::OneHotLabel {
                        block.iter().all(|&v| v == 0.0 || v == 1.0) && block.iter().filter(|&&v| v == 1.0).count() == 1
                    } else {
                        (block.iter().sum::<f64>() - 1.0).abs() < 1e-12
                    };
                    if !ok {
                        return Err(param("concept", format!("block {block:?} is not a valid label block")));
                    }
                }
            }
            ConceptKind::Embedding => {}
        }
        Ok(())
    }
}

/// Ordered list of K ≥ 1 concepts of one kind and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub concepts: Vec<ConceptVector>,
}

impl ConceptSet {
    pub fn new(concepts: Vec<ConceptVector>) -> Result<Self> {
        let set = Self { concepts };
        set.validate()?;
        Ok(set)
    }

    pub fn coordinates(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(points.iter().map(|&(x, y)| ConceptVector::coordinate(x, y)).collect())
    }

    /// One one-hot label concept per attribute.
    pub fn labels(bits: &[bool]) -> Result<Self> {
        let n = bits.len();
        Self::new(bits.iter().enumerate().map(|(k, &b)| ConceptVector::label(k, n, b)).collect())
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn kind(&self) -> ConceptKind {
        self.concepts[0].kind
    }

    pub fn dim(&self) -> usize {
        self.concepts[0].dim()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.concepts.first().ok_or_else(|| param("concepts", "a concept set needs K ≥ 1 members"))?;
        for c in &self.concepts {
            if c.kind != first.kind || c.dim() != first.dim() {
                return Err(param("concepts", "all members must share kind and dimension"));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.concepts.iter().map(|c| (c.values[0], c.values[1])).collect()
    }

    /// Label bits by thresholding l (below 0.5 is 0, otherwise 1).
    pub fn bits(&self) -> Vec<bool> {
        self.concepts.iter().map(|c| c.label_weight().is_some_and(|l| l >= 0.5)).collect()
    }

    pub fn concat(&self, other: &ConceptSet) -> Result<ConceptSet> {
        let mut concepts = self.concepts.clone();
        concepts.extend(other.concepts.iter().cloned());
        ConceptSet::new(concepts)
    }
}
