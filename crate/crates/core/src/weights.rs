//! Flat parameter storage with a named segment map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Matrix { rows: usize, cols: usize },
    Vector { len: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Matrix { rows, cols } => rows * cols,
            Shape::Vector { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Weight,
    Bias,
    Other,
}

/// One named, contiguous slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Shape,
    pub kind: SegmentKind,
    /// Dense layer this segment belongs to, if any.
    pub layer: Option<usize>,
    /// For a bias segment: compress it jointly with its layer's weights.
    pub compress_bias: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat real parameter vector of a model together with its segment map.
///
/// Segments are disjoint, appear in offset order and cover the vector exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStore {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

/// Builder-style description of a segment before offsets are assigned.
#[derive(Debug, Clone)]
pub struct SegmentDef {
    pub name: String,
    pub shape: Shape,
    pub kind: SegmentKind,
    pub layer: Option<usize>,
}

impl WeightStore {
    /// Lays the segments out back to back and zero-fills the values.
    pub fn zeros(defs: Vec<SegmentDef>) -> Self {
        let mut offset = 0;
        let segments = defs
            .into_iter()
            .map(|d| {
                let seg = Segment {
                    name: d.name,
                    offset,
                    shape: d.shape,
                    kind: d.kind,
                    layer: d.layer,
                    compress_bias: false,
                };
                offset += seg.len();
                seg
            })
            .collect();
        WeightStore {
            values: vec![0.0; offset],
            segments,
        }
    }

    /// A store with a single vector segment named `w`.
    pub fn from_vector(values: Vec<f64>) -> Self {
        let len = values.len();
        WeightStore {
            values,
            segments: vec![Segment {
                name: "w".into(),
                offset: 0,
                shape: Shape::Vector { len },
                kind: SegmentKind::Other,
                layer: None,
                compress_bias: false,
            }],
        }
    }

    /// A store with a single matrix segment named `W`.
    pub fn from_matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(rows * cols, values.len()));
        }
        Ok(WeightStore {
            values,
            segments: vec![Segment {
                name: "W".into(),
                offset: 0,
                shape: Shape::Matrix { rows, cols },
                kind: SegmentKind::Weight,
                layer: None,
                compress_bias: false,
            }],
        })
    }

    pub fn with_segments(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let store = WeightStore { values, segments };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for s in &self.segments {
            if s.offset != expected {
                return Err(Error::InvalidLayout(format!(
                    "segment {} starts at {} but previous segment ends at {expected}",
                    s.name, s.offset
                )));
            }
            expected += s.len();
        }
        if expected != self.values.len() {
            return Err(Error::InvalidLayout(format!(
                "segments cover {expected} values but store holds {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::shape(self.values.len(), values.len()));
        }
        self.values = values;
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, seg: &Segment) -> &[f64] {
        &self.values[seg.range()]
    }

    /// Marks every bias segment for joint compression with its layer's weights.
    pub fn set_compress_biases(&mut self, on: bool) {
        for s in &mut self.segments {
            if s.kind == SegmentKind::Bias {
                s.compress_bias = on;
            }
        }
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.set_values(values)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_lays_segments_back_to_back() {
        let store = WeightStore::zeros(vec![
            SegmentDef {
                name: "a".into(),
                shape: Shape::Matrix { rows: 2, cols: 3 },
                kind: SegmentKind::Weight,
                layer: Some(0),
            },
            SegmentDef {
                name: "b".into(),
                shape: Shape::Vector { len: 2 },
                kind: SegmentKind::Bias,
                layer: Some(0),
            },
        ]);
        assert_eq!(store.len(), 8);
        assert_eq!(store.segment("b").unwrap().offset, 6);
        store.validate().unwrap();
    }

    #[test]
    fn gaps_are_rejected() {
        let seg = Segment {
            name: "x".into(),
            offset: 1,
            shape: Shape::Vector { len: 2 },
            kind: SegmentKind::Other,
            layer: None,
            compress_bias: false,
        };
        assert!(WeightStore::with_segments(vec![0.0; 3], vec![seg]).is_err());
    }
}
